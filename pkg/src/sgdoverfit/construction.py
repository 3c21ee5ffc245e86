"""Hard loss families and their parameters.

Three variants share the shape ``f(w, V) = scale * max_{v in V} max(c, s_v(w)) + R(w)``
where ``s_v`` is a linear score of ``w`` against packing vector ``v``, ``c`` a
fixed threshold and ``R`` a piecewise-linear regulariser that the adversarial
oracle uses to steer the iterates:

``MultipassLargeK``
    ``w`` in R^{d'}, ``s_v = w . v``, scale ``1/sqrt(d')``,
    ``R = alpha * max{0, max_{|I|=B} -w(I), max_{I<J} w(J) - w(I)}``.
``MultipassSmallK``
    ``w = (w1, w2)`` in R^{2d}, ``s_v = (w1 + w2 + shift*1) . v``, scale ``1/sqrt(d)``,
    ``R = alpha * (5/7 max_{|I|<=B}{0, w1(I)} + 2/7 max_{|I|<=B}{0, -w2(I)})``.
``OnePass``
    ``w = (w1, w2)`` in R^{2d}, ``s_v = (w1 + w2) . v``, scale 1,
    ``R = max_{|I|<=B}{0, w1(I)} + max_{|I|<=B}{0, -w2(I)}``.

Block averages use ``w(I) = sum_{i in I} w(i) / sqrt(|I|)``.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import DimensionMismatch, InvalidRegime
from .packing import PackingKind, PackingSet


class Variant(str, enum.Enum):
    LARGE_K = "MultipassLargeK"
    SMALL_K = "MultipassSmallK"
    ONE_PASS = "OnePass"


# relative slack under which a score counts as tied with the threshold
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ConstructionParams:
    variant: Variant
    n: int
    K: int
    T: int
    tau_epoch: int
    d: int
    d_prime: int
    B: int
    eta: float
    alpha: float
    delta: float
    threshold: float
    ambient_dim: int
    T_design: int

    @property
    def base_dim(self) -> int:
        """Dimension of the packing vectors."""
        return self.d_prime if self.variant is Variant.LARGE_K else self.d

    @property
    def scale(self) -> float:
        if self.variant is Variant.LARGE_K:
            return 1.0 / math.sqrt(self.d_prime)
        if self.variant is Variant.SMALL_K:
            return 1.0 / math.sqrt(self.d)
        return 1.0

    @property
    def packing_kind(self) -> PackingKind:
        if self.variant is Variant.ONE_PASS:
            return PackingKind.SIGNED_EIGHTH
        return PackingKind.BINARY_716

    @property
    def horizon(self) -> int:
        """Number of leading steps the oracle spends observing."""
        return self.tau_epoch

    # coordinate magnitudes of the oracle's steering directions
    @property
    def unit_lower(self) -> float:
        """SmallK: value on lowered first-copy coordinates of the oracle output."""
        return self.alpha * 5.0 / (7.0 * math.sqrt(self.B))

    @property
    def unit_raise(self) -> float:
        """SmallK: magnitude on raised second-copy coordinates of the oracle output."""
        return self.alpha * 2.0 / (7.0 * math.sqrt(self.B))

    @property
    def unit_block(self) -> float:
        """LargeK / OnePass: per-coordinate magnitude of a full block direction."""
        return self.alpha / math.sqrt(self.B)

    @property
    def shift(self) -> float:
        """SmallK constant added to every coordinate of w1 + w2 inside the scores."""
        if self.variant is not Variant.SMALL_K:
            return 0.0
        return self.eta * self.unit_lower

    @property
    def quantum(self) -> float:
        """Per-coordinate displacement of one steering step."""
        if self.variant is Variant.SMALL_K:
            return self.eta * self.alpha / math.sqrt(self.B)
        return self.eta * self.unit_block

    # -- key=value text ---------------------------------------------------
    def dumps(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Variant):
                s = v.value
            elif isinstance(v, float):
                s = float.hex(v)
            else:
                s = str(v)
            out.append(f"{f.name}={s}")
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ConstructionParams":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        kw = {}
        for f in fields(cls):
            if f.name not in kv:
                raise ValueError(f"missing key {f.name!r}")
            raw = kv.pop(f.name)
            if f.name == "variant":
                kw[f.name] = Variant(raw)
            elif f.type in ("float", float):
                kw[f.name] = float.fromhex(raw)
            else:
                kw[f.name] = int(raw)
        if kv:
            raise ValueError(f"unknown keys {sorted(kv)}")
        return cls(**kw)


_OVERRIDE_KEYS = {"d", "d_prime", "tau_epoch", "T", "B", "delta"}


def _pow2_ceil(x: int) -> int:
    return 1 << max(0, (int(x) - 1).bit_length())


def large_k_block_size(d_prime: int, T: int) -> int:
    """Smallest power of two B with d' <= B (T/34)^(1/3), in exact integers."""
    B = 1
    while 34 * d_prime**3 > B**3 * T:
        B *= 2
    return B


def onepass_block_size(n: int) -> int:
    """Integer block size ``ceil(8 log2 n)``."""
    return max(1, math.ceil(8 * math.log2(n))) if n > 1 else 1


def _alpha(eta: float, denom_sq: float) -> float:
    # min{1, 1/(eta sqrt(denom_sq))}
    if eta <= 0:
        return 1.0
    return min(1.0, 1.0 / (eta * math.sqrt(denom_sq)))


def derive_params(
    variant: Variant | str,
    n: int,
    K: int,
    eta: float,
    scaled_overrides: dict | None = None,
) -> ConstructionParams:
    """Derive every constant of one hard instance.

    ``scaled_overrides`` (any mapping, possibly empty) switches to scaled mode:
    the regime preconditions on ``n``, ``K`` and ``tau_epoch`` are lifted and
    the keys ``d``, ``d_prime``, ``tau_epoch``, ``T``, ``B`` and ``delta`` may be
    pinned.  Relations among the remaining derived constants are unchanged.
    """
    variant = Variant(variant)
    ov = dict(scaled_overrides or {})
    unknown = set(ov) - _OVERRIDE_KEYS
    if unknown:
        raise InvalidRegime(f"unknown override keys {sorted(unknown)}")
    scaled = scaled_overrides is not None
    if eta < 0:
        raise InvalidRegime("eta must be non-negative")
    if n < 1 or K < 1:
        raise InvalidRegime("n and K must be positive")

    if variant is Variant.ONE_PASS:
        if not scaled and n < 17:
            raise InvalidRegime("OnePass needs n >= 17")
        B = int(ov.get("B", onepass_block_size(n)))
        # d = n*B/8 makes the target score alpha*eta*sqrt(d/B) equal alpha*eta*sqrt(n)/(2 sqrt 2)
        d = int(ov.get("d", max(1, (n * B) // 8)))
        tau = int(ov.get("tau_epoch", math.ceil(n / 16)))
        T = int(ov.get("T", n))
        alpha = _alpha(eta, n)
        delta = float(ov.get("delta", 1.0 / (4 * n * n)))
        threshold = 9 * alpha / (16 * 2 * math.sqrt(2)) * eta * math.sqrt(n)
        return ConstructionParams(variant, n, 1, T, tau, d, d, B, eta, alpha, delta,
                                  threshold, 2 * d, T)

    tau = int(ov.get("tau_epoch", n))
    T = int(ov.get("T", tau * K))
    d = int(ov.get("d", 256 * n))
    delta = float(ov.get("delta", 0.5))
    if not scaled:
        if tau < 24:
            raise InvalidRegime("multipass constructions need tau_epoch >= 24")
        if variant is Variant.LARGE_K and K < 34:
            raise InvalidRegime("MultipassLargeK needs K >= 34")
        if variant is Variant.SMALL_K and not 2 <= K <= 34:
            raise InvalidRegime("MultipassSmallK needs 2 <= K <= 34")

    if variant is Variant.SMALL_K:
        if d % 16:
            raise InvalidRegime("MultipassSmallK needs d divisible by 16")
        B = int(ov.get("B", max(1, (3 * d) // tau)))
        alpha = _alpha(eta, T)
        threshold = (5 * alpha / (16 * math.sqrt(B))) * eta * d
        return ConstructionParams(variant, n, K, T, tau, d, d, B, eta, alpha, delta,
                                  threshold, 2 * d, T)

    d_prime = int(ov.get("d_prime", _pow2_ceil(d)))
    if d_prime & (d_prime - 1) or d_prime % 16:
        raise InvalidRegime("d_prime must be a power of two and at least 16")
    T_design = min(T, d_prime**3)
    if "B" in ov:
        B = int(ov["B"])
    else:
        B = large_k_block_size(d_prime, T_design)
        if B > d_prime:
            raise InvalidRegime(f"T={T} too small for d'={d_prime}: block size would exceed d'")
    alpha = _alpha(eta, 2 * T_design)
    threshold = 45 * eta * alpha * d_prime**2 / (2 * 16**2 * B**1.5)
    return ConstructionParams(variant, n, K, T, tau, d, d_prime, B, eta, alpha, delta,
                              threshold, d_prime, T_design)


@dataclass(frozen=True)
class BlockScheme:
    """Ordered partition of the bad vector's support used by steering.

    ``blocks`` are absolute coordinate indices into ``w``.  For LargeK they are
    the full size-B chunks of u0's one-coordinates (a trailing partial chunk
    is dropped).  For SmallK the chunks cover u0's zero-coordinates (first
    copy) followed by its one-coordinates (second copy); for OnePass the
    negative coordinates (first copy) followed by the positive ones (second
    copy).  ``groups`` keeps the two underlying coordinate sets.
    """

    u0_index: int
    block_size: int
    blocks: tuple[np.ndarray, ...]
    groups: tuple[np.ndarray, np.ndarray] = field(default=(np.empty(0, int), np.empty(0, int)))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def _chunks(idx: np.ndarray, size: int, full_only: bool) -> tuple[np.ndarray, ...]:
    stop = (len(idx) // size) * size if full_only else len(idx)
    return tuple(idx[i:i + size] for i in range(0, stop, size))


def make_block_scheme(params: ConstructionParams, packing: PackingSet, u0_index: int) -> BlockScheme:
    u0 = packing.vectors[u0_index]
    B = params.B
    d = params.base_dim
    if params.variant is Variant.LARGE_K:
        ones = np.flatnonzero(u0 == 1)
        blocks = _chunks(ones, B, full_only=True)
        return BlockScheme(u0_index, B, blocks, (ones, np.empty(0, np.int64)))
    if params.variant is Variant.SMALL_K:
        zeros = np.flatnonzero(u0 == 0)
        ones = np.flatnonzero(u0 == 1) + d
        return BlockScheme(u0_index, B, _chunks(zeros, B, False) + _chunks(ones, B, False), (zeros, ones))
    neg = np.flatnonzero(u0 < 0)
    pos = np.flatnonzero(u0 > 0) + d
    return BlockScheme(u0_index, B, _chunks(neg, B, False) + _chunks(pos, B, False), (neg, pos))


# ---------------------------------------------------------------------------
# scores and the max-over-V term


def _check_dim(params: ConstructionParams, w: np.ndarray) -> None:
    if w.shape[-1] != params.ambient_dim:
        raise DimensionMismatch(f"expected {params.ambient_dim} coordinates, got {w.shape[-1]}")


def score_input(params: ConstructionParams, w: np.ndarray) -> np.ndarray:
    """The vector dotted against each packing vector (batch-friendly)."""
    if params.variant is Variant.LARGE_K:
        return w
    d = params.d
    x = w[..., :d] + w[..., d:]
    if params.variant is Variant.SMALL_K:
        x = x + params.shift
    return x


def scores(params: ConstructionParams, packing: PackingSet, w: np.ndarray) -> np.ndarray:
    _check_dim(params, w)
    if packing.d_prime != params.base_dim:
        raise DimensionMismatch(f"packing dimension {packing.d_prime} != {params.base_dim}")
    return score_input(params, w) @ packing.matrix.T


def _above(s, c) -> bool:
    return s > c + TIE_RTOL * max(abs(c), 1e-300)


# ---------------------------------------------------------------------------
# regularisers


def top_block(x: np.ndarray, size: int) -> tuple[float, np.ndarray]:
    """``max_{1<=|I|<=size} x(I)`` with its maximising index set (ties: lowest indices)."""
    size = min(size, x.shape[0])
    order = np.argsort(-x, kind="stable")[:size]
    vals = np.cumsum(x[order]) / np.sqrt(np.arange(1, size + 1))
    k = int(np.argmax(vals))
    return float(vals[k]), order[:k + 1]


def hinge_top(x: np.ndarray, size: int) -> float:
    """``max{0, max_{|I|<=size} x(I)}``."""
    if x.shape[0] == 0:
        return 0.0
    return max(0.0, top_block(x, size)[0])


def _bottom_prefix_sums(x: np.ndarray, B: int) -> np.ndarray:
    """out[s] = sum of the B smallest entries of x[:s] (nan when s < B)."""
    out = np.full(x.shape[0] + 1, np.nan)
    heap: list[float] = []  # max-heap via negation
    total = 0.0
    for s, v in enumerate(x.tolist(), start=1):
        if len(heap) < B:
            heapq.heappush(heap, -v)
            total += v
        elif v < -heap[0]:
            total += v + heapq.heappushpop(heap, -v)
        if len(heap) == B:
            out[s] = total
    return out


def general_pair_max(w: np.ndarray, B: int) -> tuple[float, int]:
    """``max_{I<J, |I|=|J|=B} w(J) - w(I)`` over all ordered index-set pairs.

    Every admissible pair is separated by a split point s (I inside [0, s),
    J inside [s, d)), so the maximum is over s of (top-B sum of the suffix)
    minus (bottom-B sum of the prefix).  Returns (value, best split) or
    (-inf, -1) when d < 2B.
    """
    d = w.shape[0]
    if d < 2 * B:
        return -math.inf, -1
    bot = _bottom_prefix_sums(w, B)
    top = -_bottom_prefix_sums(-w[::-1], B)[::-1]  # top[s] = top-B sum of w[s:]
    gaps = top - bot
    gaps[np.isnan(gaps)] = -np.inf
    s = int(np.argmax(gaps))
    return float(gaps[s]) / math.sqrt(B), s


def _block_values(w: np.ndarray, blocks) -> np.ndarray:
    return np.array([w[b].sum() / math.sqrt(len(b)) for b in blocks])


def large_k_h(w: np.ndarray, B: int, blocks: BlockScheme | None) -> float:
    """The LargeK regulariser h (without alpha).

    With a block scheme the pair term ranges over ordered pairs of scheme
    blocks; without one it ranges over all ordered B-subsets.
    """
    best = 0.0
    if w.shape[0] >= B:
        low = np.partition(w, B - 1)[:B] if B < w.shape[0] else w
        best = max(best, -float(low.sum()) / math.sqrt(B))
    if blocks is None:
        best = max(best, general_pair_max(w, B)[0])
    elif blocks.n_blocks >= 2:
        vals = _block_values(w, blocks.blocks)
        prefix_min = np.minimum.accumulate(vals)[:-1]
        best = max(best, float(np.max(vals[1:] - prefix_min)))
    return best


def regulariser(params: ConstructionParams, blocks: BlockScheme | None, w: np.ndarray) -> float:
    if params.variant is Variant.LARGE_K:
        return params.alpha * large_k_h(w, params.B, blocks)
    d = params.d
    up = hinge_top(w[:d], params.B)
    down = hinge_top(-w[d:], params.B)
    if params.variant is Variant.SMALL_K:
        return params.alpha * (5.0 / 7.0 * up + 2.0 / 7.0 * down)
    return up + down


# ---------------------------------------------------------------------------
# f and its subgradients


def _as_mask(V, m: int) -> np.ndarray:
    V = np.asarray(V)
    if V.dtype != bool:
        mask = np.zeros(m, dtype=bool)
        mask[V.astype(np.int64)] = True
        return mask
    if V.shape[-1] != m:
        raise DimensionMismatch(f"sample has {V.shape[-1]} bits, packing has {m}")
    return V


def g_value(params: ConstructionParams, s: np.ndarray, V: np.ndarray) -> float:
    """scale * max(c, max_{v in V} s_v) from precomputed scores."""
    top = params.threshold
    if V.any():
        top = max(top, float(s[V].max()))
    return params.scale * top


def eval_f(params: ConstructionParams, blocks: BlockScheme | None, w: np.ndarray,
           V, packing: PackingSet) -> float:
    """f(w, V).  ``V`` is a boolean mask over the packing (or an index list)."""
    w = np.asarray(w, dtype=np.float64)
    s = scores(params, packing, w)
    V = _as_mask(V, packing.m)
    return g_value(params, s, V) + regulariser(params, blocks, w)


def eval_f_batch(params: ConstructionParams, blocks: BlockScheme | None, W: np.ndarray,
                 V, packing: PackingSet) -> np.ndarray:
    """f at each row of ``W`` for one sample ``V``."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    V = _as_mask(V, packing.m)
    S = scores(params, packing, W)
    if V.any():
        top = np.maximum(S[:, V].max(axis=1), params.threshold)
    else:
        top = np.full(W.shape[0], params.threshold)
    reg = np.array([regulariser(params, blocks, row) for row in W])
    return params.scale * top + reg


def _block_dir(idx, size, dim, sign=1.0) -> np.ndarray:
    g = np.zeros(dim)
    g[idx] = sign / math.sqrt(size)
    return g


def regulariser_subgradient(params: ConstructionParams, blocks: BlockScheme | None,
                            w: np.ndarray) -> np.ndarray:
    """One subgradient of the regulariser: the first maximising piece of each max."""
    D = params.ambient_dim
    g = np.zeros(D)
    B = params.B
    if params.variant is Variant.LARGE_K:
        best, piece = 0.0, None
        if D >= B:
            order = np.argsort(w, kind="stable")[:B]
            val = -float(w[order].sum()) / math.sqrt(B)
            if val > best:
                best, piece = val, ("single", order)
        if blocks is None:
            val, s = general_pair_max(w, B)
            if val > best:
                lo = np.argsort(w[:s], kind="stable")[:B]
                hi = s + np.argsort(-w[s:], kind="stable")[:B]
                best, piece = val, ("pair", lo, hi)
        elif blocks.n_blocks >= 2:
            vals = _block_values(w, blocks.blocks)
            for k in range(1, len(vals)):
                j = int(np.argmin(vals[:k]))
                val = float(vals[k] - vals[j])
                if val > best:
                    best, piece = val, ("pair", blocks.blocks[j], blocks.blocks[k])
        if piece is not None:
            if piece[0] == "single":
                g = _block_dir(piece[1], B, D, -1.0)
            else:
                g = _block_dir(piece[2], B, D) - _block_dir(piece[1], B, D)
        return params.alpha * g

    d = params.d
    val, idx = top_block(w[:d], B)
    if val > 0:
        g[idx] = 1.0 / math.sqrt(len(idx))
    val2, idx2 = top_block(-w[d:], B)
    if val2 > 0:
        g[d + idx2] = -1.0 / math.sqrt(len(idx2))
    if params.variant is Variant.SMALL_K:
        g[:d] *= 5.0 / 7.0
        g[d:] *= 2.0 / 7.0
        g *= params.alpha
    return g


def g_subgradient(params: ConstructionParams, packing: PackingSet, w: np.ndarray, V) -> np.ndarray:
    """Subgradient of the max-over-V term: first maximising vector, zero at the threshold."""
    V = _as_mask(V, packing.m)
    out = np.zeros(params.ambient_dim)
    if not V.any():
        return out
    s = scores(params, packing, w)
    cand = np.flatnonzero(V)
    j = cand[int(np.argmax(s[cand]))]
    if not _above(s[j], params.threshold):
        return out
    v = packing.matrix[j]
    if params.variant is Variant.LARGE_K:
        out[:] = v
    else:
        out[:params.d] = v
        out[params.d:] = v
    return params.scale * out


def subgradient_generic(params: ConstructionParams, blocks: BlockScheme | None,
                        w: np.ndarray, V, packing: PackingSet) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    _check_dim(params, w)
    if not w.any():
        # scores sit at or below c and every regulariser piece is 0 at the origin
        return np.zeros(params.ambient_dim)
    return g_subgradient(params, packing, w, V) + regulariser_subgradient(params, blocks, w)


def lipschitz_bound(params: ConstructionParams) -> float:
    return 3.0


def lipschitz_probe(params: ConstructionParams, blocks: BlockScheme | None,
                    packing: PackingSet, trials: int, rng: np.random.Generator,
                    sample=None, points=None) -> float:
    """Largest observed ``|f(w)-f(w')| / ||w-w'||`` over random pairs in the unit ball.

    Half of the pairs are far apart, half are local perturbations.  ``sample``
    fixes V (otherwise V is drawn with inclusion probability ``params.delta``)
    and ``points`` optionally replaces the unit-ball sampler (a callable
    taking ``rng`` and returning a point).
    """
    D = params.ambient_dim

    def ball():
        if points is not None:
            return points(rng)
        x = rng.standard_normal(D)
        return x / np.linalg.norm(x) * rng.random() ** (1.0 / D)

    worst = 0.0
    for i in range(trials):
        V = sample if sample is not None else rng.random(packing.m) < params.delta
        a = ball()
        if i % 2:
            b = a + 1e-3 * rng.standard_normal(D) / math.sqrt(D)
        else:
            b = ball()
        dist = np.linalg.norm(a - b)
        if dist == 0:
            continue
        fa, fb = eval_f_batch(params, blocks, np.stack([a, b]), V, packing)
        worst = max(worst, abs(fa - fb) / dist)
    return worst


def with_eta(params: ConstructionParams, eta: float) -> ConstructionParams:
    """Re-derive alpha and threshold for a new step size, keeping sizes."""
    if params.variant is Variant.ONE_PASS:
        alpha = _alpha(eta, params.n)
        c = 9 * alpha / (16 * 2 * math.sqrt(2)) * eta * math.sqrt(params.n)
    elif params.variant is Variant.SMALL_K:
        alpha = _alpha(eta, params.T)
        c = (5 * alpha / (16 * math.sqrt(params.B))) * eta * params.d
    else:
        alpha = _alpha(eta, 2 * params.T_design)
        c = 45 * eta * alpha * params.d_prime**2 / (2 * 16**2 * params.B**1.5)
    return replace(params, eta=eta, alpha=alpha, threshold=c)
