"""Self-tuning outer loop: step-size search, restart handling, surrogate
minimization and the simulate-and-confirm drag minimization loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from ._parallel import pmap
from .dataset import Dataset, DragSample
from .errors import DivergenceError, NoViableRunError, ScheduleExhaustedError
from .flow_sim import FlowConfig, evaluate_shape
from .geometry import ShapeParams, sampling_box
from .surrogate import (
    HIDDEN_LAYERS,
    MlpModel,
    TrainConfig,
    TrainTrace,
    mlp_forward,
    mlp_init,
    mlp_input_gradient,
    train,
)

__all__ = [
    "StepSizeReport",
    "Verdict",
    "LoopSettings",
    "RoundRecord",
    "OptimizationResult",
    "SurrogateFit",
    "step_size_schedule",
    "loss_score",
    "step_size_search",
    "detect_degenerate",
    "select_best_run",
    "fit_surrogate",
    "surrogate_argmin",
    "minimize_drag",
]

log = logging.getLogger(__name__)

SCHEDULE_BASE = 1e-6
SCHEDULE_RATIO = 3
FLAT_TRACE_TOL = 1e-15
ZERO_GRAD_TOL = 1e-12
LOCAL_MIN_FACTOR = 0.5
TIE_TOL = 1e-12


def step_size_schedule() -> list[float]:
    """Geometric candidates ``1e-6 * 3**p`` for ``p = 1, 2, ...`` while below 1."""
    out = []
    power = 1
    while True:
        step = SCHEDULE_BASE * SCHEDULE_RATIO ** power
        if step >= 1.0:
            return out
        out.append(step)
        power += 1


def loss_score(trace: TrainTrace | Sequence[float]) -> int:
    """Number of strict rises in the checkpoint losses, with 0 prepended."""
    losses = trace.losses if isinstance(trace, TrainTrace) else list(trace)
    if not losses:
        raise ValueError("loss_score needs at least one checkpoint")
    seq = [0.0] + [float(v) for v in losses]
    return sum(1 for a, b in zip(seq, seq[1:]) if b > a)


@dataclass(frozen=True)
class StepSizeReport:
    candidates: tuple[tuple[float, float, TrainTrace], ...]
    chosen: float

    def scores(self) -> list[float]:
        return [s for _, s, _ in self.candidates]


def _pick_last_min(scores: Sequence[float]) -> int:
    best, idx = math.inf, -1
    for i, s in enumerate(scores):
        if s <= best and math.isfinite(s):
            best, idx = s, i
    return idx


def _train_one(args):
    seed, ds, cfg, hidden_layers = args
    model = mlp_init(seed, cfg.init_scale, hidden_layers=hidden_layers)
    try:
        return train(model, ds, cfg)
    except DivergenceError as exc:
        return None, exc.trace


def step_size_search(ds: Dataset, seed: int, epochs: int, *,
                     checkpoint_interval: int = 1000, test_fraction: float = 0.2,
                     hidden_layers: int = HIDDEN_LAYERS, jobs: int = 1) -> StepSizeReport:
    """Train once per candidate step size from the same initialization and
    pick the lowest loss score, preferring the later candidate on ties.

    Raises
    ------
    ScheduleExhaustedError
        Every candidate diverged.
    """
    steps = step_size_schedule()
    work = [(seed, ds, TrainConfig(step_size=s, epochs=epochs,
                                   checkpoint_interval=min(checkpoint_interval, epochs),
                                   test_fraction=test_fraction, seed=seed), hidden_layers)
            for s in steps]
    results = pmap(_train_one, work, jobs)
    candidates = []
    for step, (model, trace) in zip(steps, results):
        score = math.inf if model is None else float(loss_score(trace))
        candidates.append((step, score, trace))
    idx = _pick_last_min([s for _, s, _ in candidates])
    if idx < 0:
        raise ScheduleExhaustedError("every step size in the schedule diverged")
    return StepSizeReport(tuple(candidates), steps[idx])


class Verdict(str, Enum):
    OK = "ok"
    ZERO_DERIVATIVE = "zero_derivative"
    LOCAL_MINIMUM = "local_minimum"


def _is_degenerate(trace: TrainTrace) -> bool:
    losses = trace.losses
    flat = bool(losses) and max(losses) - min(losses) < FLAT_TRACE_TOL
    return not trace.grad_norm_at_init >= ZERO_GRAD_TOL or flat


def detect_degenerate(trace: TrainTrace, restarts: Sequence[TrainTrace]) -> Verdict:
    """Classify a finished run against independently initialized restarts."""
    if _is_degenerate(trace):
        return Verdict.ZERO_DERIVATIVE
    for r in restarts:
        if r.final_train_mse < LOCAL_MIN_FACTOR * trace.final_train_mse:
            return Verdict.LOCAL_MINIMUM
    return Verdict.OK


def select_best_run(runs: Sequence[tuple[MlpModel | None, TrainTrace]]
                    ) -> tuple[MlpModel, TrainTrace]:
    """Lowest test MSE; near-ties go to the smallest train/test gap, then the
    lowest index. Runs with no model or non-finite MSE count as diverged."""
    viable = [(i, m, t) for i, (m, t) in enumerate(runs)
              if m is not None and math.isfinite(t.final_test_mse)
              and math.isfinite(t.final_train_mse)]
    if not viable:
        raise NoViableRunError("every training run diverged")
    best_test = min(t.final_test_mse for _, _, t in viable)
    tied = [v for v in viable if v[2].final_test_mse - best_test <= TIE_TOL]
    i, m, t = min(tied, key=lambda v: (abs(v[2].final_test_mse - v[2].final_train_mse), v[0]))
    return m, t


@dataclass(frozen=True)
class SurrogateFit:
    model: MlpModel
    trace: TrainTrace
    verdict: Verdict
    runs: tuple[tuple[MlpModel | None, TrainTrace], ...]


def fit_surrogate(ds: Dataset, step_size: float, seed: int, epochs: int, *,
                  restarts: int = 4, test_fraction: float = 0.0,
                  checkpoint_interval: int = 1000, hidden_layers: int = HIDDEN_LAYERS,
                  jobs: int = 1) -> SurrogateFit:
    """Train the primary run (``seed``) plus ``restarts`` reinitializations
    (``seed + 1 ...``) and keep the best non-degenerate one."""
    cfgs = [TrainConfig(step_size=step_size, epochs=epochs,
                        checkpoint_interval=min(checkpoint_interval, epochs),
                        test_fraction=test_fraction, seed=seed + r)
            for r in range(restarts + 1)]
    runs = pmap(_train_one, [(c.seed, ds, c, hidden_layers) for c in cfgs], jobs)
    primary = runs[0][1]
    others = [t for m, t in runs[1:] if m is not None]
    if runs[0][0] is None:
        verdict = Verdict.ZERO_DERIVATIVE
    else:
        verdict = detect_degenerate(primary, others)
    if verdict is not Verdict.OK:
        log.info("primary run verdict %s, choosing among restarts", verdict.value)
    usable = [(m, t) if m is not None and not _is_degenerate(t) else (None, t)
              for m, t in runs]
    model, trace = select_best_run(usable)
    return SurrogateFit(model, trace, verdict, tuple(runs))


def surrogate_argmin(m: MlpModel, width: float, bounds=None, seed: int = 0, *,
                     dataset: Dataset | None = None, starts: int = 64,
                     iterations: int = 2000, step: float | None = None
                     ) -> tuple[ShapeParams, float]:
    """Multi-start projected descent on the model prediction over theta.

    Every start moves ``step`` (default ``1e-3 * width``) per iteration along
    the negative normalized gradient and is clamped to ``bounds`` (default
    the sampling box). Two starts are fixed: the box centre and the best
    dataset point (a random point when no dataset is given).
    """
    lo, hi = sampling_box(width) if bounds is None else bounds
    lo_v = np.broadcast_to(np.asarray(lo, dtype=float), (4,))
    hi_v = np.broadcast_to(np.asarray(hi, dtype=float), (4,))
    step = 1e-3 * width if step is None else step
    rng = np.random.default_rng(seed)
    n_random = starts - 2
    pts = [rng.uniform(lo_v, hi_v, size=(max(n_random, 0), 4)), ((lo_v + hi_v) / 2)[None]]
    if dataset is not None and any(s.converged and math.isfinite(s.drag) for s in dataset):
        pts.append(np.array(dataset.best().params.theta)[None])
    else:
        pts.append(rng.uniform(lo_v, hi_v, size=(1, 4)))
    theta = np.clip(np.concatenate(pts)[:starts], lo_v, hi_v)
    X = np.column_stack([theta, np.full(len(theta), width)])
    for _ in range(iterations):
        g = mlp_input_gradient(m, X)[:, :4]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        move = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        X[:, :4] = np.clip(X[:, :4] - step * move, lo_v, hi_v)
    pred = mlp_forward(m, X)
    k = int(np.argmin(pred))
    return ShapeParams(tuple(X[k, :4].tolist()), width), float(pred[k])


@dataclass(frozen=True)
class LoopSettings:
    """Training and search budgets used inside ``minimize_drag``."""

    epochs: int = 5000
    search_epochs: int = 5000
    checkpoint_interval: int = 500
    restarts: int = 4
    hidden_layers: int = HIDDEN_LAYERS
    starts: int = 64
    iterations: int = 2000
    confirm_tol: float = 0.02
    jobs: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.search_epochs < 1 or self.iterations < 1:
            raise ValueError("epochs and iterations must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    proposed: tuple[float, ...]
    predicted_drag: float
    simulated_drag: float
    dataset_min: float
    decision: str

    def to_json(self) -> str:
        return json.dumps({
            "round": self.round, "proposed": list(self.proposed),
            "predicted_drag": _num(self.predicted_drag), "simulated_drag": _num(self.simulated_drag),
            "dataset_min": _num(self.dataset_min), "decision": self.decision})


def _num(v: float):
    return v if math.isfinite(v) else str(v)


@dataclass(frozen=True)
class OptimizationResult:
    best_params: ShapeParams
    best_drag: float
    rounds: int
    history: tuple[RoundRecord, ...]
    verified: bool
    dataset: Dataset = field(repr=False)
    model: MlpModel = field(repr=False)
    step_size: float = math.nan

    def rounds_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.history)


Evaluator = Callable[[ShapeParams], DragSample]


def _usable(ds: Dataset) -> Dataset:
    return Dataset(tuple(s for s in ds if s.converged and math.isfinite(s.drag)), ds.width)


def minimize_drag(ds: Dataset, cfg: FlowConfig | None = None, seed: int = 0,
                  max_rounds: int = 25, *, evaluator: Evaluator | None = None,
                  settings: LoopSettings = LoopSettings(),
                  on_round: Callable[[RoundRecord], None] | None = None
                  ) -> OptimizationResult:
    """Propose, simulate and confirm until a verified drag minimum is found.

    A proposal is accepted when its simulated drag is strictly below the
    dataset minimum and a surrogate retrained with the new sample proposes
    the same shape again (within ``confirm_tol * width`` per coordinate).
    ``evaluator`` replaces the flow solver, e.g. for analytic test functions.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    if evaluator is None:
        if cfg is None:
            raise ValueError("either cfg or evaluator is required")
        evaluator = lambda p: evaluate_shape(p, cfg)  # noqa: E731
    width = ds.width
    data = ds
    if len(_usable(data)) == 0:
        raise ValueError("dataset has no converged sample")
    s = settings
    search = step_size_search(_usable(data), seed, s.search_epochs,
                              checkpoint_interval=min(s.checkpoint_interval, s.search_epochs),
                              test_fraction=0.2, hidden_layers=s.hidden_layers, jobs=s.jobs)
    step = search.chosen
    log.info("step size %.6g chosen", step)

    fit_seed = seed

    def fit(d: Dataset) -> SurrogateFit:
        return fit_surrogate(_usable(d), step, fit_seed, s.epochs, restarts=s.restarts,
                             test_fraction=0.0, checkpoint_interval=s.checkpoint_interval,
                             hidden_layers=s.hidden_layers, jobs=s.jobs)

    def propose(model: MlpModel, d: Dataset, rnd: int):
        return surrogate_argmin(model, width, seed=seed + rnd, dataset=d,
                                starts=s.starts, iterations=s.iterations)

    history: list[RoundRecord] = []
    current = fit(data)
    verified = False
    rnd = 0
    for rnd in range(1, max_rounds + 1):
        theta, predicted = propose(current.model, data, rnd)
        prev_min = data.min_drag()
        if data.contains(theta):
            history.append(RoundRecord(rnd, theta.theta, predicted, math.nan, prev_min,
                                       "duplicate"))
            if on_round:
                on_round(history[-1])
            fit_seed += 1
            current = fit(data)
            continue
        sample = evaluator(theta)
        drag = sample.drag if sample.converged and math.isfinite(sample.drag) else math.inf
        if not math.isfinite(drag):
            sample = DragSample(theta, math.inf, False)
        data = data.appended(sample)
        current = fit(data)
        decision = "rejected"
        if drag < prev_min:
            theta2, _ = propose(current.model, data, rnd)
            delta = np.abs(np.array(theta2.theta) - np.array(theta.theta))
            if np.all(delta <= s.confirm_tol * width):
                decision = "accepted"
                verified = True
            else:
                decision = "unconfirmed"
        history.append(RoundRecord(rnd, theta.theta, predicted, drag, prev_min, decision))
        log.info("round %d: predicted %.5g simulated %.5g (min %.5g) %s",
                 rnd, predicted, drag, prev_min, decision)
        if on_round:
            on_round(history[-1])
        if verified:
            break
    best = data.best()
    return OptimizationResult(best.params, best.drag, rnd, tuple(history), verified,
                              data, current.model, step)
