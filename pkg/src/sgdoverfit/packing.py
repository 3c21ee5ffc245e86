"""Near-orthogonal packing families.

Two kinds are supported:

* ``BINARY_716``: vectors in {0,1}^d with exactly 7d/16 ones and pairwise
  dot products at most 5d/16.
* ``SIGNED_EIGHTH``: vectors in {+-1/sqrt(d)}^d whose pairwise inner product
  is at most 1/8 in absolute value, i.e. any two vectors agree on between
  7d/16 and 9d/16 coordinates.

Families are built by rejection sampling and certified with exact integer
arithmetic.  Coordinates are stored as small integers (0/1 or -1/+1); the real
vectors are exposed through :attr:`PackingSet.matrix`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import AttemptsExhausted
from .rng import stream


class PackingKind(str, enum.Enum):
    BINARY_716 = "Binary716"
    SIGNED_EIGHTH = "SignedEighth"


@dataclass(eq=False)
class PackingSet:
    kind: PackingKind
    d_prime: int
    vectors: np.ndarray  # (m, d_prime) int8: 0/1 or -1/+1
    seed: int

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @cached_property
    def matrix(self) -> np.ndarray:
        """Real-valued vectors as an (m, d) float64 array."""
        if self.kind is PackingKind.BINARY_716:
            return self.vectors.astype(np.float64)
        return self.vectors.astype(np.float64) / np.sqrt(self.d_prime)

    def __eq__(self, other):
        if not isinstance(other, PackingSet):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.d_prime == other.d_prime
            and self.seed == other.seed
            and np.array_equal(self.vectors, other.vectors)
        )

    # -- text format ------------------------------------------------------
    def dumps(self) -> str:
        lines = [f"{self.kind.value} {self.d_prime} {self.m} {self.seed}"]
        if self.kind is PackingKind.BINARY_716:
            table = {0: "0", 1: "1"}
        else:
            table = {-1: "-", 1: "+"}
        for row in self.vectors:
            lines.append("".join(table[int(x)] for x in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PackingSet":
        head, *rows = text.strip("\n").split("\n")
        kind_s, d_s, m_s, seed_s = head.split()
        kind = PackingKind(kind_s)
        d, m = int(d_s), int(m_s)
        table = {"0": 0, "1": 1} if kind is PackingKind.BINARY_716 else {"-": -1, "+": 1}
        if len(rows) != m:
            raise ValueError(f"expected {m} vector lines, found {len(rows)}")
        vecs = np.empty((m, d), dtype=np.int8)
        for i, row in enumerate(rows):
            if len(row) != d:
                raise ValueError(f"line {i + 2}: expected {d} characters")
            vecs[i] = [table[c] for c in row]
        return cls(kind, d, vecs, int(seed_s))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "PackingSet":
        return cls.loads(Path(path).read_text())


def bounds(kind: PackingKind, d: int) -> tuple[int, int]:
    """Inclusive integer range allowed for the pairwise statistic.

    Binary716: the dot product (lower bound 0).  SignedEighth: the number of
    agreeing coordinates.
    """
    if kind is PackingKind.BINARY_716:
        return 0, 5 * d // 16
    # |d<u,v>| = |2*agree - d| <= d/8  <=>  7d/16 <= agree <= 9d/16
    lo = -(-7 * d // 16)
    hi = 9 * d // 16
    return lo, hi


def _pair_stat(kind, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact pairwise statistic between row blocks (float32 BLAS is exact here)."""
    prod = a.astype(np.float32) @ b.astype(np.float32).T
    prod = np.rint(prod).astype(np.int64)
    if kind is PackingKind.BINARY_716:
        return prod
    d = a.shape[1]
    return (prod + d) // 2  # agreements from the +-1 dot product


def _candidates(kind, d, count, rng) -> np.ndarray:
    if kind is PackingKind.BINARY_716:
        weight = 7 * d // 16
        keys = rng.random((count, d))
        ones = np.argpartition(keys, weight - 1, axis=1)[:, :weight]
        out = np.zeros((count, d), dtype=np.int8)
        np.put_along_axis(out, ones, 1, axis=1)
        return out
    return np.where(rng.random((count, d)) < 0.5, -1, 1).astype(np.int8)


def lexicographic_order(vectors: np.ndarray) -> np.ndarray:
    """Row order comparing coordinates left to right (index 0 most significant)."""
    # -1 < 0 < +1 survives the shift to unsigned bytes
    keys = [bytes((row.astype(np.int16) + 1).astype(np.uint8)) for row in vectors]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def generate_packing(
    kind: PackingKind | str,
    d_prime: int,
    m: int,
    seed: int,
    max_attempts: int = 1000,
    restarts: int = 3,
    batch: int = 128,
) -> PackingSet:
    """Rejection-sample a certified family of ``m`` vectors.

    A candidate is kept only if its statistic against every accepted vector
    is within bounds.  After ``max_attempts`` consecutive rejections the whole
    family is discarded and rebuilt; after ``restarts`` rebuilds
    :class:`AttemptsExhausted` is raised.
    """
    kind = PackingKind(kind)
    if m < 1 or max_attempts < 1:
        raise ValueError("m and max_attempts must be positive")
    if kind is PackingKind.BINARY_716 and d_prime % 16:
        raise ValueError("Binary716 needs d_prime divisible by 16")
    lo, hi = bounds(kind, d_prime)

    for restart in range(restarts + 1):
        rng = stream(seed, "packing", kind.value, d_prime, m, restart)
        accepted = np.empty((m, d_prime), dtype=np.int8)
        count = 0
        misses = 0
        while count < m:
            cand = _candidates(kind, d_prime, batch, rng)
            if count:
                st = _pair_stat(kind, cand, accepted[:count])
                ok = np.all((st >= lo) & (st <= hi), axis=1)
            else:
                ok = np.ones(batch, dtype=bool)
            inner = _pair_stat(kind, cand, cand)
            kept: list[int] = []
            for i in range(batch):
                if ok[i] and all(lo <= inner[i, j] <= hi for j in kept):
                    kept.append(i)
                    misses = 0
                    if count + len(kept) == m:
                        break
                else:
                    misses += 1
                    if misses >= max_attempts:
                        break
            if kept:
                accepted[count:count + len(kept)] = cand[kept]
                count += len(kept)
            if misses >= max_attempts:
                break
        if count == m:
            order = lexicographic_order(accepted)
            return PackingSet(kind, d_prime, accepted[order], seed)
    raise AttemptsExhausted(
        f"no {kind.value} family of size {m} in dimension {d_prime} "
        f"after {restarts + 1} builds of {max_attempts} rejections"
    )


@dataclass
class VerificationReport:
    kind: PackingKind
    d_prime: int
    passed: bool
    pair_stats: np.ndarray  # (m, m) dot products or agreement counts
    norms_ok: bool
    distinct: bool
    bound: tuple[int, int]
    violations: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def max_offdiag(self) -> int:
        m = self.pair_stats.shape[0]
        if m < 2:
            return 0
        return int(self.pair_stats[~np.eye(m, dtype=bool)].max())

    @property
    def min_offdiag(self) -> int:
        m = self.pair_stats.shape[0]
        if m < 2:
            return 0
        return int(self.pair_stats[~np.eye(m, dtype=bool)].min())


def verify_packing(ps: PackingSet) -> VerificationReport:
    """Exhaustively check every pair of ``ps`` against its kind's bounds."""
    v = ps.vectors.astype(np.int64)
    d = ps.d_prime
    lo, hi = bounds(ps.kind, d)
    # float64 products of small integers are exact below 2**53
    gram = np.rint(ps.vectors.astype(np.float64) @ ps.vectors.astype(np.float64).T).astype(np.int64)
    if ps.kind is PackingKind.BINARY_716:
        stats = gram
        norms_ok = bool(np.all(np.isin(v, (0, 1)))) and bool(
            np.all(v.sum(axis=1) == 7 * d // 16)) and d % 16 == 0
    else:
        stats = (gram + d) // 2
        norms_ok = bool(np.all(np.isin(v, (-1, 1))))
    m = v.shape[0]
    violations = []
    iu, ju = np.triu_indices(m, k=1)
    bad = (stats[iu, ju] < lo) | (stats[iu, ju] > hi)
    for i, j in zip(iu[bad], ju[bad]):
        violations.append((int(i), int(j), int(stats[i, j])))
    distinct = len({row.tobytes() for row in ps.vectors}) == m
    passed = norms_ok and distinct and not violations
    return VerificationReport(ps.kind, d, passed, stats, norms_ok, distinct, (lo, hi), violations)
