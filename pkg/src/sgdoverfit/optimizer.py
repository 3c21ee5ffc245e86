"""Projected SGD with one-pass, multi-pass and with-replacement schedules.

Iterates are indexed from 1: ``w_1 = 0`` and step ``t`` maps ``w_t`` to
``w_{t+1} = Proj(w_t - eta * g_t)``.  The suffix average over a window of
length ``tau`` ending at ``T`` is the mean of ``w_{T-tau+1}, ..., w_T``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, OutOfRange, ScheduleExhausted
from .rng import stream


class ScheduleKind(str, enum.Enum):
    ONE_PASS = "OnePass"
    EXPLICIT = "MultiPassExplicit"
    SINGLE_SHUFFLE = "MultiPassSingleShuffle"
    MULTI_SHUFFLE = "MultiPassMultiShuffle"
    WITH_REPLACEMENT = "WithReplacement"


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind
    n: int
    K: int
    order: np.ndarray  # (T,) zero-based sample index used at each step
    seed: int = 0

    @property
    def T(self) -> int:
        return int(self.order.shape[0])

    def index(self, t: int) -> int:
        """Zero-based sample index at (one-based) step ``t``."""
        if not 1 <= t <= self.T:
            raise ScheduleExhausted(f"step {t} outside 1..{self.T}")
        return int(self.order[t - 1])

    def epoch(self, k: int) -> np.ndarray:
        """Order of the ``k``-th pass (one-based) for permutation schedules."""
        return self.order[(k - 1) * self.n:k * self.n]

    def prefix(self, steps: int) -> list[np.ndarray]:
        """Per-step sample-index sets for the first ``steps`` steps."""
        return [self.order[i:i + 1] for i in range(min(steps, self.T))]


def make_schedule(kind: ScheduleKind | str, n: int, K: int = 1, seed: int = 0,
                  T: int | None = None,
                  permutations: Sequence[Sequence[int]] | None = None) -> Schedule:
    """Build a sample-index schedule.

    Multipass step ``t`` uses pass ``ceil(t/n)`` at position ``(t-1) mod n``.
    ``T`` sets the with-replacement length (default ``n*K``).
    """
    kind = ScheduleKind(kind)
    if n < 1 or K < 1:
        raise ValueError("n and K must be positive")
    if kind is ScheduleKind.ONE_PASS:
        return Schedule(kind, n, 1, np.arange(n), seed)
    if kind is ScheduleKind.EXPLICIT:
        if permutations is None or len(permutations) != K:
            raise ValueError("explicit schedules need K permutations")
        perms = [np.asarray(p, dtype=np.int64) for p in permutations]
        for p in perms:
            if sorted(p.tolist()) != list(range(n)):
                raise ValueError("each permutation must be a bijection on 0..n-1")
        return Schedule(kind, n, K, np.concatenate(perms), seed)
    rng = stream(seed, "schedule", kind.value, n, K)
    if kind is ScheduleKind.SINGLE_SHUFFLE:
        return Schedule(kind, n, K, np.tile(rng.permutation(n), K), seed)
    if kind is ScheduleKind.MULTI_SHUFFLE:
        return Schedule(kind, n, K, np.concatenate([rng.permutation(n) for _ in range(K)]), seed)
    steps = n * K if T is None else int(T)
    return Schedule(kind, n, K, rng.integers(0, n, size=steps), seed)


def project_ball(w: np.ndarray, radius: float = 1.0) -> np.ndarray:
    if radius <= 0:
        raise ValueError("radius must be positive")
    norm = float(np.linalg.norm(w))
    if norm <= radius:
        return w
    return w * (radius / norm)


def suffix_average(trajectory, tau: int) -> np.ndarray:
    """Mean of the last ``tau`` iterates.

    ``trajectory`` is a (T, D) array of ``w_1..w_T`` or a :class:`RunResult`
    carrying that window.
    """
    if isinstance(trajectory, RunResult):
        if tau not in trajectory.suffix_averages:
            raise OutOfRange(f"tau={tau} was not requested for this run")
        return trajectory.suffix_averages[tau]
    traj = np.asarray(trajectory, dtype=np.float64)
    T = traj.shape[0]
    if not 1 <= tau <= T:
        raise OutOfRange(f"tau={tau} outside 1..{T}")
    return traj[T - tau:].sum(axis=0) / tau


@dataclass
class RunResult:
    suffix_averages: dict[int, np.ndarray]
    projection_count: int
    max_norm: float
    final: np.ndarray  # w_{T+1}
    step_norms: np.ndarray  # ||w_{t+1}|| for t = 1..T
    steps_to_idle: int
    T: int
    event_flags: dict = field(default_factory=dict)
    window_averages: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    trace: list[str] | None = None
    trajectory: np.ndarray | None = None  # w_1..w_{T+1} when recorded


class _Windows:
    """Running sums over inclusive step windows, fed by constant segments."""

    def __init__(self, windows: Sequence[tuple[int, int]], dim: int):
        self.windows = list(windows)
        self.sums = [np.zeros(dim) for _ in self.windows]

    def add(self, a: int, b: int, w: np.ndarray) -> None:
        # w_t = w for t in [a, b]
        for (lo, hi), acc in zip(self.windows, self.sums):
            k = min(b, hi) - max(a, lo) + 1
            if k == 1:
                acc += w
            elif k > 1:
                acc += k * w

    def means(self) -> dict[tuple[int, int], np.ndarray]:
        return {(lo, hi): s / (hi - lo + 1) for (lo, hi), s in zip(self.windows, self.sums)}


GradientSource = Callable[[np.ndarray, np.ndarray], np.ndarray]


def run_sgd(params, packing, dataset, schedule: Schedule, source: GradientSource, eta: float,
            tau_list: Sequence[int], record_trace: bool = False, radius: float = 1.0,
            callback: Callable | None = None, steps: int | None = None,
            checkpoints: Sequence[int] = (), fast_forward: bool = True) -> RunResult:
    """Run projected SGD from zero.

    ``source(w, S_t)`` returns the update direction, with ``S_t`` a (1, m)
    boolean array holding the scheduled sample.  ``callback(t, w_t,
    sample_idx, g_t)`` is invoked after every query.  Suffix averages are
    returned for each ``tau`` at the final step and, in ``window_averages``,
    for each ``(end, tau)`` with ``end`` in ``checkpoints``.
    """
    T = schedule.T if steps is None else int(steps)
    if T > schedule.T:
        raise ScheduleExhausted(f"{T} steps requested but the schedule has {schedule.T}")
    if dataset.n != schedule.n:
        raise DimensionMismatch(f"schedule is over {schedule.n} samples, dataset has {dataset.n}")
    if packing is not None and dataset.m != packing.m:
        raise DimensionMismatch("dataset and packing sizes differ")
    taus = sorted(set(int(t) for t in tau_list))
    for tau in taus:
        if not 1 <= tau <= T:
            raise OutOfRange(f"tau={tau} outside 1..{T}")
    windows = [(T - tau + 1, T) for tau in taus]
    for end in checkpoints:
        if not 1 <= end <= T:
            raise OutOfRange(f"checkpoint {end} outside 1..{T}")
        windows += [(end - tau + 1, end) for tau in taus if tau <= end]
    windows = sorted(set(windows))

    D = params.ambient_dim
    acc = _Windows(windows, D)
    w = np.zeros(D)
    seg_start = 1
    step_norms = np.zeros(T)
    projections = 0
    steps_to_idle = 0
    trace = [] if record_trace else None
    traj = [w.copy()] if record_trace else None
    samples = dataset.samples
    order = schedule.order
    can_skip = fast_forward and callback is None and not record_trace and hasattr(source, "zero_run_length")

    t = 1
    while t <= T:
        if can_skip:
            k = source.zero_run_length(w, lambda u0, t=t: samples[order[t - 1:T], u0])
            if k > 0:
                k = min(k, T - t + 1)
                source.skip(k)
                step_norms[t - 1:t - 1 + k] = np.linalg.norm(w)
                t += k
                continue
        i = int(order[t - 1])
        g = source(w, samples[i:i + 1])
        if g.shape != (D,):
            raise DimensionMismatch(f"gradient has shape {g.shape}, expected ({D},)")
        if callback is not None:
            callback(t, w, i, g)
        nxt = w - eta * g
        proj = project_ball(nxt, radius)
        if proj is not nxt:
            projections += 1
        if not np.array_equal(proj, w):
            acc.add(seg_start, t, w)  # w_{seg_start..t} all equal w
            seg_start = t + 1
            w = proj
            steps_to_idle = t
        step_norms[t - 1] = np.linalg.norm(w)
        if record_trace:
            traj.append(w.copy())
            if hasattr(source, "trace_line"):
                trace.append(source.trace_line(t, w))
            else:
                trace.append(f"{t} - - {float(np.linalg.norm(w))!r} 0.0")
        t += 1
    if seg_start <= T:
        acc.add(seg_start, T, w)

    means = acc.means()
    suffix = {tau: means[(T - tau + 1, T)] for tau in taus}
    window_avgs = {(hi, hi - lo + 1): v for (lo, hi), v in means.items()}
    flags = {}
    state = getattr(source, "state", None)
    if state is not None:
        flags = {"phase": state.phase.value, "u0": state.u0, "guard_hits": state.guard_hits,
                 "fallback": state.phase.value == "Fallback"}
    return RunResult(
        suffix_averages=suffix,
        projection_count=projections,
        max_norm=float(max(step_norms.max(initial=0.0), 0.0)),
        final=w,
        step_norms=step_norms,
        steps_to_idle=steps_to_idle,
        T=T,
        event_flags=flags,
        window_averages=window_avgs,
        trace=trace,
        trajectory=np.array(traj) if record_trace else None,
    )
