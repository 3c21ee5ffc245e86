"""Sample-dependent first-order oracles that steer SGD toward a bad vector.

Each oracle first watches the incoming samples while returning zero.  It then
fixes a vector ``u0`` of the packing (one absent from everything observed for
the multipass variants, one common to every observed sample for one-pass) and
emits block directions that walk the iterate toward ``u0``.  If ``u0`` later
shows up in a sample, or no suitable ``u0`` exists, the oracle falls back to
the generic subgradient for good.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .construction import (BlockScheme, ConstructionParams, Variant, eval_f_batch,
                           make_block_scheme, score_input, subgradient_generic)
from .errors import DimensionMismatch, StateCorruption
from .instance import find_common, find_uncovered
from .packing import PackingSet

log = logging.getLogger(__name__)

# relative tolerance for the equality tests on block values / shifted sums
GUARD_RTOL = 1e-12


class Phase(str, enum.Enum):
    OBSERVING = "Observing"
    STEERING = "Steering"
    IDLE = "Idle"
    FALLBACK = "Fallback"


@dataclass
class OracleState:
    """Oracle memory.

    The observed history is kept as a sufficient statistic: the number of
    sample-sets seen plus the union (multipass) or intersection (one-pass)
    mask of the samples observed while watching.  Later samples only matter
    through whether they contain ``u0``, which is checked on arrival.
    """

    variant: Variant
    horizon: int
    phase: Phase = Phase.OBSERVING
    u0: int | None = None
    blocks: BlockScheme | None = None
    step_count: int = 0
    observed: np.ndarray | None = None
    guard_hits: int = 0
    last_branch: str = "-"

    def check(self) -> None:
        watching = self.step_count <= self.horizon
        if watching != (self.phase is Phase.OBSERVING):
            raise StateCorruption(
                f"phase {self.phase.value} inconsistent with {self.step_count} observed sets "
                f"(horizon {self.horizon})")
        if self.phase in (Phase.STEERING, Phase.IDLE) and self.u0 is None:
            raise StateCorruption("steering without a bad vector")


def new_state(params: ConstructionParams) -> OracleState:
    return OracleState(params.variant, params.horizon)


def _as_sets(S_t, m: int) -> np.ndarray:
    arr = np.asarray(S_t, dtype=bool)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[-1] != m:
        raise DimensionMismatch(f"sample has {arr.shape[-1]} bits, packing has {m}")
    return arr


def _close(a: float, b: float, scale: float) -> bool:
    return abs(a - b) <= GUARD_RTOL * scale


def _select(idx: np.ndarray, ok: np.ndarray, exact: np.ndarray, size: int, state: OracleState) -> np.ndarray:
    # first `size` indices satisfying ok, counting tolerance-only hits
    hits = idx[ok]
    state.guard_hits += int(np.count_nonzero(ok & ~exact))
    return hits[:size]


def _fallback(state, params, packing, w, sets) -> np.ndarray:
    state.last_branch = "generic"
    gs = [subgradient_generic(params, state.blocks, w, V, packing) for V in sets]
    return gs[0] if len(gs) == 1 else np.mean(gs, axis=0)


def _start_steering(state: OracleState, params: ConstructionParams, packing: PackingSet) -> None:
    if state.variant is Variant.ONE_PASS:
        u0 = find_common(state.observed)
    else:
        u0 = find_uncovered(state.observed, packing)
    if u0 is None:
        state.phase = Phase.FALLBACK
        return
    state.u0 = u0
    state.blocks = make_block_scheme(params, packing, u0)
    state.phase = Phase.STEERING


def _large_k_step(state: OracleState, params: ConstructionParams, w: np.ndarray) -> np.ndarray:
    blocks = state.blocks.blocks
    g = np.zeros(params.ambient_dim)
    vals = np.array([w[b].sum() for b in blocks]) / math.sqrt(params.B)
    unit = params.eta * params.alpha  # block value of one quantum
    for j in range(len(vals) - 1):
        a, b = vals[j], vals[j + 1]
        if a > 0 and _close(a, b, unit) and not _close(a, 0.0, unit):
            if a != b:
                state.guard_hits += 1
            g[blocks[j + 1]] = params.unit_block
            g[blocks[j]] = -params.unit_block
            state.last_branch = f"a{j + 1}"
            return g
    for j, a in enumerate(vals):
        if _close(a, 0.0, unit):
            if a != 0:
                state.guard_hits += 1
            g[blocks[j]] = -params.unit_block
            state.last_branch = f"b{j + 1}"
            return g
    state.last_branch = "c"
    return g


def _small_k_step(state: OracleState, params: ConstructionParams, w: np.ndarray) -> np.ndarray:
    d = params.d
    x = score_input(params, w)
    zeros, ones_abs = state.blocks.groups
    ones = ones_abs - d
    unit = params.quantum
    xz = x[zeros]
    J0 = xz > GUARD_RTOL * unit
    Z = _select(zeros, J0, xz > 0, params.B, state)
    xo = x[ones]
    J1 = xo < unit * (1 - GUARD_RTOL)
    if Z.size == int(J0.sum()):
        O = _select(ones, J1, xo < unit, params.B, state)
    else:
        O = ones[:0]
    g = np.zeros(params.ambient_dim)
    if Z.size == 0 and O.size == 0:
        state.last_branch = "c"
        return g
    g[Z] = params.unit_lower
    g[d + O] = -params.unit_raise
    state.last_branch = f"z{Z.size}o{O.size}"
    return g


def _one_pass_step(state: OracleState, params: ConstructionParams, w: np.ndarray) -> np.ndarray:
    d = params.d
    x = score_input(params, w)
    neg, pos_abs = state.blocks.groups
    pos = pos_abs - d
    unit = params.quantum
    xn, xp = x[neg], x[pos]
    N = _select(neg, np.abs(xn) <= GUARD_RTOL * unit, xn == 0, params.B, state)
    P = _select(pos, np.abs(xp) <= GUARD_RTOL * unit, xp == 0, params.B, state)
    g = np.zeros(params.ambient_dim)
    if N.size == 0 and P.size == 0:
        state.last_branch = "c"
        return g
    g[N] = params.unit_block
    g[d + P] = -params.unit_block
    state.last_branch = f"n{N.size}p{P.size}"
    return g


_STEERERS = {
    Variant.LARGE_K: _large_k_step,
    Variant.SMALL_K: _small_k_step,
    Variant.ONE_PASS: _one_pass_step,
}


def oracle_step(state: OracleState, params: ConstructionParams, packing: PackingSet,
                w: np.ndarray, S_t) -> np.ndarray:
    """Advance the oracle by one query and return its output at ``w``."""
    if state.variant is not params.variant:
        raise StateCorruption("state and params disagree on the variant")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (params.ambient_dim,):
        raise DimensionMismatch(f"expected {params.ambient_dim} coordinates, got {w.shape}")
    state.check()
    sets = _as_sets(S_t, packing.m)
    state.step_count += 1

    if state.step_count <= state.horizon:
        joined = sets.any(axis=0) if state.variant is not Variant.ONE_PASS else sets.all(axis=0)
        if state.observed is None:
            state.observed = joined
        elif state.variant is Variant.ONE_PASS:
            state.observed = state.observed & joined
        else:
            state.observed = state.observed | joined
        state.last_branch = "observe"
        return np.zeros(params.ambient_dim)

    if state.phase is Phase.OBSERVING:
        if state.observed is None:  # zero-length horizon
            state.observed = np.zeros(packing.m, dtype=bool) if state.variant is not Variant.ONE_PASS \
                else np.ones(packing.m, dtype=bool)
        _start_steering(state, params, packing)

    if state.phase is not Phase.FALLBACK and sets[:, state.u0].any():
        log.debug("bad vector observed at step %d; switching to fallback", state.step_count)
        state.phase = Phase.FALLBACK

    if state.phase is Phase.FALLBACK:
        return _fallback(state, params, packing, w, sets)

    g = _STEERERS[state.variant](state, params, w)
    state.phase = Phase.IDLE if state.last_branch == "c" else Phase.STEERING
    return g


class AdversarialOracle:
    """Callable wrapper owning an :class:`OracleState` for one run."""

    def __init__(self, params: ConstructionParams, packing: PackingSet):
        if packing.d_prime != params.base_dim:
            raise DimensionMismatch("packing dimension does not match the construction")
        self.params = params
        self.packing = packing
        self.state = new_state(params)
        self._idle_w: np.ndarray | None = None

    @property
    def blocks(self) -> BlockScheme | None:
        return self.state.blocks

    def __call__(self, w: np.ndarray, S_t) -> np.ndarray:
        st = self.state
        if st.phase is Phase.IDLE and self._idle_w is not None and np.array_equal(w, self._idle_w):
            sets = _as_sets(S_t, self.packing.m)
            if not sets[:, st.u0].any():
                st.step_count += 1
                st.last_branch = "c"
                return np.zeros(self.params.ambient_dim)
        g = oracle_step(st, self.params, self.packing, w, S_t)
        self._idle_w = np.array(w, dtype=np.float64) if st.phase is Phase.IDLE else None
        return g

    def zero_run_length(self, w: np.ndarray, contains_u0) -> int:
        """Leading upcoming steps certain to return zero at the (fixed) iterate ``w``.

        ``contains_u0(u0)`` returns, per upcoming step, whether that step's
        samples include the bad vector.  It is only invoked when the oracle is
        idle at its cached iterate.
        """
        st = self.state
        if st.phase is Phase.FALLBACK and not w.any():
            # the generic subgradient vanishes at the origin for every sample
            return 10**18
        if st.phase is not Phase.IDLE or self._idle_w is None or not np.array_equal(w, self._idle_w):
            return 0
        flags = np.asarray(contains_u0(st.u0), dtype=bool)
        hit = np.flatnonzero(flags)
        return int(hit[0]) if hit.size else int(flags.size)

    def skip(self, k: int) -> None:
        self.state.step_count += k

    def trace_line(self, t: int, w: np.ndarray) -> str:
        st = self.state
        dot = 0.0
        if st.u0 is not None:
            dot = float(score_input(self.params, w) @ self.packing.matrix[st.u0])
        return f"{t} {st.phase.value} {st.last_branch} {float(np.linalg.norm(w))!r} {dot!r}"


class GenericOracle:
    """Gradient source returning the generic subgradient (no sample dependence)."""

    def __init__(self, params: ConstructionParams, packing: PackingSet,
                 blocks: BlockScheme | None = None):
        self.params = params
        self.packing = packing
        self.blocks = blocks

    def __call__(self, w, S_t):
        sets = _as_sets(S_t, self.packing.m)
        gs = [subgradient_generic(self.params, self.blocks, w, V, self.packing) for V in sets]
        return gs[0] if len(gs) == 1 else np.mean(gs, axis=0)


# ---------------------------------------------------------------------------
# validity checking


def _ball(rng: np.random.Generator, dim: int, radius: float, count: int) -> np.ndarray:
    x = rng.standard_normal((count, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * (radius * rng.random((count, 1)) ** (1.0 / dim))


def probe_points(params: ConstructionParams, blocks: BlockScheme | None, w: np.ndarray,
                 g: np.ndarray, probes: int, rng: np.random.Generator,
                 max_blocks: int = 16) -> np.ndarray:
    """Random points in the radius-2 ball plus a deterministic set around ``w``."""
    D = params.ambient_dim
    pts = [np.zeros(D), w.copy()]
    dirs = []
    if blocks is not None:
        for b in blocks.blocks[:max_blocks]:
            e = np.zeros(D)
            e[b] = 1.0 / math.sqrt(len(b))
            dirs.append(e)
    gn = np.linalg.norm(g)
    if gn > 0:
        dirs.append(g / gn)
    for e in dirs:
        for step in (1e-3, params.quantum or 1e-3, 0.5):
            pts.append(w + step * e)
            pts.append(w - step * e)
    det = np.stack(pts)
    return np.vstack([det, _ball(rng, D, 2.0, probes)])


def subgradient_slack(params, blocks, packing, w, V, g, points) -> np.ndarray:
    """``f(w') - f(w) - g.(w' - w)`` at each probe point (non-negative for a subgradient)."""
    w = np.asarray(w, dtype=np.float64)
    fw = eval_f_batch(params, blocks, w[None, :], V, packing)[0]
    fp = eval_f_batch(params, blocks, points, V, packing)
    return fp - fw - (points - w) @ g


def validate_subgradient(params: ConstructionParams, blocks: BlockScheme | None,
                         packing: PackingSet, w: np.ndarray, V, g: np.ndarray,
                         probes: int, tol: float, rng: np.random.Generator) -> bool:
    if probes < 1:
        raise ValueError("probes must be at least 1")
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    pts = probe_points(params, blocks, w, g, probes, rng)
    return bool(np.all(subgradient_slack(params, blocks, packing, w, V, g, pts) >= -tol))


@dataclass
class ValidityRecorder:
    """Run callback checking every emitted gradient against each sample of its step.

    Distinct (iterate, sample) pairs are checked once.
    """

    params: ConstructionParams
    packing: PackingSet
    samples: np.ndarray
    probes: int
    tol: float
    rng: np.random.Generator
    blocks_of: object = None  # callable returning the current block scheme
    checked: int = 0
    failures: list = field(default_factory=list)
    _seen: set = field(default_factory=set)

    def __call__(self, t, w, sample_idx, g) -> None:
        blocks = self.blocks_of() if callable(self.blocks_of) else self.blocks_of
        for i in np.atleast_1d(sample_idx):
            key = (w.tobytes(), int(i), g.tobytes())
            if key in self._seen:
                continue
            self._seen.add(key)
            self.checked += 1
            if not validate_subgradient(self.params, blocks, self.packing, w,
                                        self.samples[int(i)], g, self.probes, self.tol, self.rng):
                self.failures.append((t, int(i)))
