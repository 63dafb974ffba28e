"""Black-box search over generation schedules and training distributions.

Generation schedules are optimized by forward finite-difference gradient
descent over the concatenated [r, tau1, tau2, s] vector, with projection
onto the feasible set before every evaluation.  The Beta training
distribution is optimized by a cached greedy coordinate line search.  The
alternating loop interleaves the two, retraining the model once per
alternation; a concurrent variant (joint search, retraining per candidate)
exists as the efficiency baseline.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .strategy import (
    GenerationSchedule,
    TrainingStrategy,
    project_vector,
    schedule_from_vector,
    schedule_to_vector,
)

GROUPS = ("r", "tau1", "tau2", "s")


@dataclass(frozen=True)
class GenOptConfig:
    """Finite-difference descent parameters.

    The per-coordinate step is epsilon * max(|xi_i|, 0.1): coordinates mix
    ratios with temperatures and guidance scales, so a purely absolute step
    would be badly scaled for some group.
    """

    epsilon: float = 0.05
    eta: float = 0.1
    max_iters: int = 30
    eta_decay: float = 0.5
    patience: int = 5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.max_iters < 1 or self.patience < 1:
            raise ValueError("max_iters and patience must be >= 1")
        if not 0 < self.eta_decay <= 1:
            raise ValueError("eta_decay must lie in (0, 1]")


@dataclass(frozen=True)
class LineSearchConfig:
    grid: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    refine_rounds: int = 1
    candidate_train_frac: float = 0.25

    def __post_init__(self):
        if not self.grid or any(v <= 0 for v in self.grid):
            raise ValueError("grid must be nonempty with positive values")
        if self.refine_rounds < 0:
            raise ValueError("refine_rounds must be >= 0")
        if not 0 < self.candidate_train_frac <= 1:
            raise ValueError("candidate_train_frac must lie in (0, 1]")


@dataclass(frozen=True)
class AutoNatConfig:
    conv_threshold: float = 0.01
    max_alternations: int = 3

    def __post_init__(self):
        if not self.conv_threshold > 0:
            raise ValueError("conv_threshold must be positive")
        if self.max_alternations < 1:
            raise ValueError("max_alternations must be >= 1")


@dataclass
class TraceRecord:
    iteration: int
    xi: np.ndarray
    F: float
    accepted: bool


@dataclass
class OptTrace:
    T: int
    records: list[TraceRecord] = field(default_factory=list)

    def best_F_path(self) -> list[float]:
        return [rec.F for rec in self.records if rec.accepted]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "r_norm", "tau1_norm", "tau2_norm", "s_norm", "F", "accepted"])
            for rec in self.records:
                blocks = rec.xi.reshape(4, self.T)
                norms = [repr(float(np.linalg.norm(b))) for b in blocks]
                writer.writerow([rec.iteration, *norms, repr(float(rec.F)), int(rec.accepted)])


def group_mask(T: int, groups) -> np.ndarray:
    """Boolean mask over the 4T coordinates covering the named groups."""
    mask = np.zeros(4 * T, dtype=bool)
    for g in groups:
        if g not in GROUPS:
            raise ValueError(f"unknown hyperparameter group {g!r}; expected one of {GROUPS}")
        i = GROUPS.index(g)
        mask[i * T : (i + 1) * T] = True
    return mask


def finite_diff_grad(
    f,
    xi: np.ndarray,
    cfg: GenOptConfig,
    project=None,
    freeze_mask: np.ndarray | None = None,
    f0: float | None = None,
    threads: int = 1,
) -> tuple[np.ndarray, float]:
    """Forward-difference gradient estimate of f at xi.

    Every evaluated point is projected first; a coordinate whose perturbation
    is undone by projection gets gradient zero without an evaluation.  The
    per-coordinate evaluations are independent, so they may run on a thread
    pool; results are assembled by coordinate index and do not depend on
    scheduling.
    """
    xi = np.asarray(xi, dtype=float)
    base = project(xi) if project is not None else xi
    if f0 is None:
        f0 = f(base)
    grad = np.zeros_like(xi)
    tasks = []  # (coordinate, step, point)
    for i in range(xi.shape[0]):
        if freeze_mask is not None and freeze_mask[i]:
            continue
        h = cfg.epsilon * max(abs(xi[i]), 0.1)
        pert = xi.copy()
        pert[i] += h
        point = project(pert) if project is not None else pert
        if project is not None and np.array_equal(point, base):
            continue
        tasks.append((i, h, point))
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(lambda task: f(task[2]), tasks))
    else:
        values = [f(point) for _, _, point in tasks]
    for (i, h, _), val in zip(tasks, values):
        grad[i] = (val - f0) / h
    return grad, f0


@dataclass
class _Best:
    xi: np.ndarray
    F: float
    order: tuple

    def offer(self, xi: np.ndarray, F: float, order: tuple) -> bool:
        if (F, order) < (self.F, self.order):
            self.xi = xi.copy()
            self.F = F
            self.order = order
            return True
        return False


def optimize_generation(
    F_eval,
    initial: GenerationSchedule,
    cfg: GenOptConfig,
    N: int,
    freeze_groups=(),
    threads: int = 1,
) -> tuple[GenerationSchedule, OptTrace]:
    """Projected finite-difference descent; returns the best schedule ever evaluated.

    F_eval maps a GenerationSchedule to a scalar (lower is better).  Frozen
    groups are excluded from the gradient and never move.  The learning rate
    halves after `patience` consecutive iterations without improving the
    best-so-far value.
    """
    T = initial.T
    freeze = group_mask(T, freeze_groups)

    def proj(vec):
        return project_vector(vec, T, N)

    def f_vec(vec):
        return F_eval(schedule_from_vector(vec, T))

    xi = proj(schedule_to_vector(initial))
    trace = OptTrace(T=T)
    F_cur = f_vec(xi)
    best = _Best(xi=xi.copy(), F=F_cur, order=(0,))
    trace.records.append(TraceRecord(iteration=0, xi=xi.copy(), F=F_cur, accepted=True))

    eta = cfg.eta
    stale = 0
    for it in range(1, cfg.max_iters + 1):
        # Track perturbed points too: they are honestly evaluated schedules.
        evals: list[tuple[np.ndarray, float]] = []

        def f_tracked(vec):
            val = f_vec(vec)
            evals.append((vec, val))
            return val

        grad, _ = finite_diff_grad(
            f_tracked, xi, cfg, project=proj, freeze_mask=freeze, f0=F_cur, threads=threads
        )
        grad[freeze] = 0.0
        for rank, (vec, val) in enumerate(evals):
            best.offer(vec, val, (it, 1, rank))
        xi = proj(xi - eta * grad)
        F_cur = f_vec(xi)
        improved = best.offer(xi, F_cur, (it, 0))
        trace.records.append(TraceRecord(iteration=it, xi=xi.copy(), F=best.F, accepted=improved))
        if improved:
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                eta *= cfg.eta_decay
                stale = 0
    return schedule_from_vector(best.xi, T), trace


@dataclass
class LineSearchResult:
    strategy: TrainingStrategy
    F: float
    evaluations: dict
    sweeps: int


def line_search_training(
    train_and_eval,
    cfg: LineSearchConfig,
    start: TrainingStrategy,
) -> LineSearchResult:
    """Greedy coordinate line search over Beta(alpha, beta).

    Scans alpha over the grid at fixed beta, fixes the best alpha, scans
    beta, and repeats until a full sweep brings no improvement.  Each
    refinement round inserts geometric midpoints around the incumbent and
    sweeps again.  (alpha, beta) -> F values are cached so no candidate is
    ever retrained twice.
    """
    cache: dict[tuple[float, float], float] = {}

    def F(a: float, b: float) -> float:
        key = (a, b)
        if key not in cache:
            cache[key] = train_and_eval(a, b)
        return cache[key]

    grids = [sorted(set(cfg.grid)), sorted(set(cfg.grid))]
    inc = [start.alpha, start.beta]
    F_inc = F(*inc)
    sweeps = 0

    def sweep_until_stable():
        nonlocal F_inc, sweeps
        while True:
            sweeps += 1
            improved = False
            for which in (0, 1):
                for v in grids[which]:
                    cand = list(inc)
                    cand[which] = v
                    val = F(*cand)
                    if val < F_inc:
                        F_inc = val
                        inc[which] = v
                        improved = True
            if not improved:
                return

    sweep_until_stable()
    for _ in range(cfg.refine_rounds):
        for which in (0, 1):
            g = grids[which]
            x = inc[which]
            below = [v for v in g if v < x]
            above = [v for v in g if v > x]
            extra = []
            if below:
                extra.append(math.sqrt(x * max(below)))
            if above:
                extra.append(math.sqrt(x * min(above)))
            grids[which] = sorted(set(g) | set(extra))
        sweep_until_stable()
    return LineSearchResult(
        strategy=TrainingStrategy(alpha=inc[0], beta=inc[1]),
        F=F_inc,
        evaluations=dict(cache),
        sweeps=sweeps,
    )


@dataclass
class AlternationRecord:
    index: int
    schedule: GenerationSchedule
    strategy: TrainingStrategy
    F_gen_phase: float
    F_after_retrain: float
    accepted_F: float  # best-so-far across all full-configuration evaluations


@dataclass
class AutoNatResult:
    schedule: GenerationSchedule
    strategy: TrainingStrategy
    model: object
    F: float
    history: list[AlternationRecord]
    gen_traces: list[OptTrace]
    alternations: int


def autonat(
    initial_schedule: GenerationSchedule,
    initial_strategy: TrainingStrategy,
    train_fn,
    make_F,
    gen_cfg: GenOptConfig,
    ls_cfg: LineSearchConfig,
    an_cfg: AutoNatConfig,
    N: int,
    threads: int = 1,
    store=None,
    phase_hook=None,
) -> AutoNatResult:
    """Alternating search over generation schedule and training distribution.

    train_fn(mask_dist, full: bool) trains a model (reduced candidate budget
    when full=False); make_F(model) returns the frozen schedule -> F closure
    for that model.  Each alternation optimizes the schedule against the
    current model, line-searches (alpha, beta) with the schedule fixed
    (training a candidate model per point), retrains at full budget, and
    evaluates.  Stops when the relative change of the alternation-end F
    drops to the threshold or the alternation cap is reached.  Returns the
    best full configuration ever evaluated.

    `store` (optional get/put mapping) checkpoints each phase, making an
    interrupted run resumable with identical results; `phase_hook(name)` is
    called before each phase is computed.
    """

    def run_phase(name: str, compute):
        if store is not None:
            cached = store.get(name)
            if cached is not None:
                return cached
        if phase_hook is not None:
            phase_hook(name)
        result = compute()
        if store is not None:
            store.put(name, result)
        return result

    schedule = initial_schedule
    strategy = initial_strategy
    model = run_phase("init_train", lambda: train_fn(strategy, True))

    best = None  # (F, order, schedule, strategy, model)

    def offer(F, order, sched, strat, mdl):
        nonlocal best
        if best is None or (F, order) < (best[0], best[1]):
            best = (F, order, sched, strat, mdl)

    history: list[AlternationRecord] = []
    gen_traces: list[OptTrace] = []
    F_prev = math.inf
    alternations = 0
    for a in range(1, an_cfg.max_alternations + 1):
        alternations = a

        def gen_phase(model=model, schedule=schedule):
            sched_new, trace = optimize_generation(
                make_F(model), schedule, gen_cfg, N, threads=threads
            )
            return sched_new, trace

        schedule, trace = run_phase(f"alt{a}_gen", gen_phase)
        gen_traces.append(trace)
        F_gen = trace.records[-1].F  # best-so-far under the current model
        offer(F_gen, (a, 0), schedule, strategy, model)

        def train_phase(schedule=schedule, strategy=strategy):
            def candidate(alpha, beta):
                cand_model = train_fn(TrainingStrategy(alpha, beta), False)
                return make_F(cand_model)(schedule)

            result = line_search_training(candidate, ls_cfg, strategy)
            return result.strategy

        strategy = run_phase(f"alt{a}_train", train_phase)

        def retrain_phase(strategy=strategy, schedule=schedule):
            mdl = train_fn(strategy, True)
            F_new = make_F(mdl)(schedule)
            return mdl, F_new

        model, F_new = run_phase(f"alt{a}_retrain", retrain_phase)
        offer(F_new, (a, 1), schedule, strategy, model)
        history.append(
            AlternationRecord(
                index=a,
                schedule=schedule,
                strategy=strategy,
                F_gen_phase=F_gen,
                F_after_retrain=F_new,
                accepted_F=best[0],
            )
        )
        if math.isfinite(F_prev):
            delta = abs(F_new - F_prev) / max(abs(F_prev), 1e-12)
            if delta <= an_cfg.conv_threshold:
                F_prev = F_new
                break
        F_prev = F_new
    _, _, sched_b, strat_b, model_b = best
    return AutoNatResult(
        schedule=sched_b,
        strategy=strat_b,
        model=model_b,
        F=best[0],
        history=history,
        gen_traces=gen_traces,
        alternations=alternations,
    )


@dataclass
class ConcurrentResult:
    schedule: GenerationSchedule
    strategy: TrainingStrategy
    model: object
    F: float
    train_steps_used: int


def concurrent_search(
    initial_schedule: GenerationSchedule,
    initial_strategy: TrainingStrategy,
    train_fn,
    make_F,
    gen_cfg: GenOptConfig,
    N: int,
    max_train_steps: int,
    candidate_steps: int,
    full_steps: int,
    max_iters: int,
    threads: int = 1,
) -> ConcurrentResult:
    """Joint finite-difference search over [schedule, alpha, beta].

    Every distinct (alpha, beta) candidate costs one (reduced-budget) model
    training, drawn from the same training-step budget the alternating
    algorithm used; schedule coordinates reuse the cached model.  A final
    full-budget retrain of the incumbent is reserved out of the budget.
    """
    T = initial_schedule.T
    steps_used = 0
    model_cache: dict[tuple[float, float], object] = {}

    def model_for(alpha: float, beta: float, full: bool):
        nonlocal steps_used
        key = (alpha, beta)
        if key not in model_cache:
            cost = full_steps if full else candidate_steps
            if steps_used + cost > max_train_steps - full_steps:
                return None  # keep enough budget for the final retrain
            steps_used += cost
            model_cache[key] = train_fn(TrainingStrategy(alpha, beta), full)
        return model_cache[key]

    def proj(vec):
        out = vec.copy()
        out[: 4 * T] = project_vector(out[: 4 * T], T, N)
        out[4 * T :] = np.clip(out[4 * T :], 0.05, 64.0)
        return out

    def f_joint(vec):
        alpha, beta = float(vec[4 * T]), float(vec[4 * T + 1])
        mdl = model_for(alpha, beta, False)
        if mdl is None:
            return math.inf  # out of training budget for this candidate
        return make_F(mdl)(schedule_from_vector(vec[: 4 * T], T))

    xi = np.concatenate(
        [
            project_vector(schedule_to_vector(initial_schedule), T, N),
            [initial_strategy.alpha, initial_strategy.beta],
        ]
    )
    F_cur = f_joint(xi)
    best = _Best(xi=xi.copy(), F=F_cur, order=(0,))
    eta = gen_cfg.eta
    stale = 0
    for it in range(1, max_iters + 1):
        grad, _ = finite_diff_grad(f_joint, xi, gen_cfg, project=proj, f0=F_cur, threads=threads)
        if not np.all(np.isfinite(grad)):
            grad[~np.isfinite(grad)] = 0.0
        xi = proj(xi - eta * grad)
        F_cur = f_joint(xi)
        if best.offer(xi, F_cur, (it,)):
            stale = 0
        else:
            stale += 1
            if stale >= gen_cfg.patience:
                eta *= gen_cfg.eta_decay
                stale = 0
    alpha, beta = float(best.xi[4 * T]), float(best.xi[4 * T + 1])
    strategy = TrainingStrategy(alpha, beta)
    final_model = train_fn(strategy, True)
    steps_used += full_steps
    schedule = schedule_from_vector(best.xi[: 4 * T], T)
    F_final = make_F(final_model)(schedule)
    return ConcurrentResult(
        schedule=schedule,
        strategy=strategy,
        model=final_model,
        F=F_final,
        train_steps_used=steps_used,
    )


@dataclass
class AblationResult:
    group: str
    F_frozen: float
    delta: float
    schedule: GenerationSchedule


def ablate_hyperparameter_group(
    F_eval,
    heuristic_init: GenerationSchedule,
    base_F: float,
    group: str,
    cfg: GenOptConfig,
    N: int,
    threads: int = 1,
) -> AblationResult:
    """Re-run the schedule search with one group pinned at its heuristic values."""
    if group not in GROUPS:
        raise ValueError(f"unknown hyperparameter group {group!r}; expected one of {GROUPS}")
    sched, trace = optimize_generation(
        F_eval, heuristic_init, cfg, N, freeze_groups=(group,), threads=threads
    )
    F_frozen = trace.records[-1].F
    return AblationResult(group=group, F_frozen=F_frozen, delta=F_frozen - base_F, schedule=sched)
