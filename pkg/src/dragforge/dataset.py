"""The theta -> drag dataset: sampling grid, batch simulation, filtering, CSV I/O."""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._parallel import pmap
from .errors import EmptyDatasetError, ParseError
from .flow_sim import DragSample, FlowConfig, evaluate_shape
from .geometry import ShapeParams, sampling_box

__all__ = [
    "CSV_HEADER",
    "DragSample",
    "Dataset",
    "default_jobs",
    "sample_grid",
    "generate",
    "filter_outliers",
    "save",
    "load",
    "to_csv",
    "from_csv",
]

log = logging.getLogger(__name__)

CSV_HEADER = "theta1,theta2,theta3,theta4,width,drag,converged"
OUTLIER_FENCE = 5.0


def _same_drag(a: float, b: float) -> bool:
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered, immutable collection of samples sharing one case width."""

    samples: tuple[DragSample, ...]
    width: float

    def __post_init__(self):
        samples = tuple(self.samples)
        seen = set()
        for s in samples:
            if s.params.width != self.width:
                raise ValueError(
                    f"sample width {s.params.width} differs from dataset width {self.width}")
            if s.params.theta in seen:
                raise ValueError(f"duplicate theta {s.params.theta}")
            seen.add(s.params.theta)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.width == other.width and len(self) == len(other) and all(
            a.params == b.params and a.converged == b.converged and _same_drag(a.drag, b.drag)
            for a, b in zip(self.samples, other.samples)))

    def features(self) -> np.ndarray:
        """``(n, 5)`` matrix of ``(theta1..theta4, width)`` rows."""
        if not self.samples:
            return np.empty((0, 5))
        return np.array([s.params.as_vector() for s in self.samples])

    def targets(self) -> np.ndarray:
        return np.array([s.drag for s in self.samples], dtype=float)

    def contains(self, params: ShapeParams) -> bool:
        return any(s.params.theta == params.theta for s in self.samples)

    def appended(self, sample: DragSample) -> Dataset:
        return Dataset(self.samples + (sample,), self.width)

    def min_drag(self) -> float:
        """Smallest finite drag among converged samples (``inf`` if none)."""
        drags = [s.drag for s in self.samples if s.converged and math.isfinite(s.drag)]
        return min(drags, default=math.inf)

    def best(self) -> DragSample:
        usable = [s for s in self.samples if s.converged and math.isfinite(s.drag)]
        if not usable:
            raise EmptyDatasetError("no converged sample")
        return min(usable, key=lambda s: s.drag)


def default_jobs() -> int:
    """Worker count from ``DRAGFORGE_JOBS``, else 1."""
    try:
        return max(1, int(os.environ.get("DRAGFORGE_JOBS", "1")))
    except ValueError:
        return 1


def sample_grid(width: float, levels: int) -> list[ShapeParams]:
    """Full-factorial grid of ``levels**4`` shapes over the sampling box,
    in lexicographic order (last theta varies fastest)."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    lo, hi = sampling_box(width)
    values = np.linspace(lo, hi, levels) if levels > 1 else np.array([lo])
    return [ShapeParams(theta, width)
            for theta in itertools.product(values.tolist(), repeat=4)]


def _evaluate(args):
    params, cfg = args
    return evaluate_shape(params, cfg)


def generate(width: float, levels: int, cfg: FlowConfig, jobs: int | None = None) -> Dataset:
    """Simulate every grid point. Failed simulations stay in the dataset as
    non-converged samples."""
    grid = sample_grid(width, levels)
    jobs = default_jobs() if jobs is None else jobs
    work = [(p, cfg) for p in grid]
    samples = pmap(_evaluate, work, jobs)
    n_bad = sum(not s.converged for s in samples)
    if n_bad:
        log.info("%d of %d samples did not converge", n_bad, len(samples))
    return Dataset(tuple(samples), width)


def filter_outliers(ds: Dataset) -> Dataset:
    """Drop non-converged, non-finite and off-scale samples.

    Off-scale means outside ``median +/- 5 * IQR`` of the converged finite
    drags.
    """
    if len(ds) == 0:
        raise EmptyDatasetError("cannot filter an empty dataset")
    usable = [s for s in ds if s.converged and math.isfinite(s.drag)]
    if not usable:
        raise EmptyDatasetError("every sample was dropped")
    drags = np.array([s.drag for s in usable])
    med = float(np.median(drags))
    q1, q3 = np.percentile(drags, [25, 75])
    spread = OUTLIER_FENCE * float(q3 - q1)
    kept = tuple(s for s in usable if med - spread <= s.drag <= med + spread)
    if not kept:
        raise EmptyDatasetError("every sample was dropped")
    return Dataset(kept, ds.width)


def to_csv(ds: Dataset) -> str:
    lines = [CSV_HEADER]
    for s in ds:
        vals = s.params.theta + (s.params.width, s.drag)
        lines.append(",".join(f"{v:.17g}" for v in vals) + ("," + str(s.converged).lower()))
    return "\n".join(lines) + "\n"


def _parse_bool(text: str, lineno: int) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ParseError(f"converged must be 'true' or 'false', got {text!r}", lineno)


def from_csv(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EmptyDatasetError("empty dataset file")
    if lines[0].strip() != CSV_HEADER:
        raise ParseError(f"expected header {CSV_HEADER!r}", 1)
    samples = []
    width = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.strip().split(",")
        if len(parts) != 7:
            raise ParseError(f"expected 7 columns, got {len(parts)}", lineno)
        try:
            nums = [float(v) for v in parts[:6]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        try:
            params = ShapeParams(tuple(nums[:4]), nums[4])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if width is None:
            width = params.width
        elif params.width != width:
            raise ParseError(f"width {params.width} differs from {width}", lineno)
        samples.append(DragSample(params, nums[5], _parse_bool(parts[6], lineno)))
    if not samples:
        raise EmptyDatasetError("dataset file has a header but no rows")
    try:
        return Dataset(tuple(samples), width)
    except ValueError as exc:
        raise ParseError(str(exc), len(lines)) from None


def save(ds: Dataset, path: str | os.PathLike) -> None:
    Path(path).write_text(to_csv(ds), encoding="utf-8", newline="\n")


def load(path: str | os.PathLike) -> Dataset:
    return from_csv(Path(path).read_text(encoding="utf-8"))
