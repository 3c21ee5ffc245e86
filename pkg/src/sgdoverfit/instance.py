"""Samples, datasets, good events and population/empirical losses.

A sample ``V`` is a subset of the packing, stored as a boolean mask of length
``m``.  Each vector is included independently with probability ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .construction import (BlockScheme, ConstructionParams, g_value, regulariser,
                           score_input, scores)
from .errors import DimensionMismatch
from .packing import PackingSet
from .rng import stream


def sample_v(packing: PackingSet, delta: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    return rng.random(packing.m) < delta


@dataclass(eq=False)
class Dataset:
    samples: np.ndarray  # (n, m) bool
    delta: float
    seed: int
    packing: PackingSet | None = None

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def m(self) -> int:
        return self.samples.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.delta == other.delta and self.seed == other.seed
                and np.array_equal(self.samples, other.samples))

    def dumps(self) -> str:
        lines = [f"{self.n} {self.m} {float(self.delta)!r} {self.seed}"]
        for row in self.samples:
            lines.append((row.astype(np.uint8) + ord("0")).tobytes().decode())
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, packing: PackingSet | None = None) -> "Dataset":
        head, *rows = text.rstrip("\n").split("\n")
        n_s, m_s, delta_s, seed_s = head.split()
        n, m = int(n_s), int(m_s)
        if len(rows) != n:
            raise ValueError(f"expected {n} sample lines, found {len(rows)}")
        samples = np.zeros((n, m), dtype=bool)
        for i, row in enumerate(rows):
            if len(row) != m or set(row) - {"0", "1"}:
                raise ValueError(f"line {i + 2}: expected {m} binary digits")
            samples[i] = np.frombuffer(row.encode(), dtype=np.uint8) == ord("1")
        if packing is not None and packing.m != m:
            raise DimensionMismatch("packing size does not match the dataset")
        return cls(samples, float(delta_s), int(seed_s), packing)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path, packing: PackingSet | None = None) -> "Dataset":
        return cls.loads(Path(path).read_text(), packing)


def make_dataset(packing: PackingSet, delta: float, n: int, seed: int) -> Dataset:
    """n i.i.d. samples; reproducible from (packing size, delta, n, seed)."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    rng = stream(seed, "dataset", n, packing.m)
    return Dataset(rng.random((n, packing.m)) < delta, float(delta), seed, packing)


def _stack(prefix, m: int | None = None) -> np.ndarray:
    arr = np.asarray(prefix, dtype=bool)
    if arr.ndim == 1:
        arr = arr.reshape(0, m if m is not None else 0) if arr.size == 0 else arr[None, :]
    return arr


def find_uncovered(prefix: Sequence[np.ndarray] | np.ndarray, packing: PackingSet) -> int | None:
    """Least index not included in any sample of the prefix."""
    arr = _stack(prefix, packing.m)
    if arr.shape[0] == 0:
        return 0 if packing.m else None
    free = np.flatnonzero(~arr.any(axis=0))
    return int(free[0]) if free.size else None


def find_common(prefix: Sequence[np.ndarray] | np.ndarray) -> int | None:
    """Least index included in every sample of the (non-empty) prefix."""
    arr = _stack(prefix)
    if arr.shape[0] == 0:
        raise ValueError("prefix must be non-empty")
    common = np.flatnonzero(arr.all(axis=0))
    return int(common[0]) if common.size else None


def _prefix_indices(schedule_prefix, tau_epoch: int) -> list[int]:
    steps = list(schedule_prefix)
    if len(steps) < tau_epoch:
        raise ValueError("schedule prefix shorter than tau_epoch")
    out: list[int] = []
    for s in steps[:tau_epoch]:
        out.extend(np.atleast_1d(np.asarray(s, dtype=np.int64)).tolist())
    return out


def good_event_multipass(dataset: Dataset, schedule_prefix, tau_epoch: int,
                         packing: PackingSet) -> bool:
    """The first tau_epoch steps see all of S and leave some vector uncovered.

    ``schedule_prefix`` holds, per step, the sample indices used at that step.
    """
    seen = set(_prefix_indices(schedule_prefix, tau_epoch))
    if seen != set(range(dataset.n)):
        return False
    return find_uncovered(dataset.samples[sorted(seen)], packing) is not None


def onepass_horizon(n: int) -> int:
    return math.ceil(n / 16)


def good_event_onepass(dataset: Dataset, n: int) -> bool:
    """The least common vector of the first ceil(n/16) samples exists and appears nowhere later."""
    if dataset.n != n:
        raise DimensionMismatch(f"dataset has {dataset.n} samples, expected {n}")
    k = onepass_horizon(n)
    u0 = find_common(dataset.samples[:k])
    if u0 is None:
        return False
    return not bool(dataset.samples[k:, u0].any())


# ---------------------------------------------------------------------------
# losses


def population_loss(w: np.ndarray, params: ConstructionParams, packing: PackingSet,
                    blocks: BlockScheme | None = None) -> float:
    """Exact ``E_V f(w, V)`` under independent inclusion.

    The max over V equals the largest included score above the threshold, so
    with the k above-threshold scores sorted descending the j-th one is the
    maximum with probability delta (1-delta)^(j-1), and the threshold wins
    with probability (1-delta)^k.
    """
    w = np.asarray(w, dtype=np.float64)
    s = scores(params, packing, w)
    c = params.threshold
    top = np.sort(s[s > c])[::-1]
    q = 1.0 - params.delta
    weights = params.delta * np.power(q, np.arange(top.size, dtype=np.float64))
    g = float(np.dot(top, weights)) + c * q**top.size
    return params.scale * g + regulariser(params, blocks, w)


def population_loss_mc(w: np.ndarray, params: ConstructionParams, packing: PackingSet,
                       samples: int, rng: np.random.Generator,
                       blocks: BlockScheme | None = None, chunk: int = 4096) -> tuple[float, float]:
    """Monte Carlo estimate of F(w) with its standard error.

    Vectors scoring at or below the threshold never change ``max(c, .)``, so
    only the inclusion bits of the others are simulated.
    """
    w = np.asarray(w, dtype=np.float64)
    s = scores(params, packing, w)
    c = params.threshold
    live = s[s > c]
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        b = min(chunk, samples - done)
        if live.size:
            inc = rng.random((b, live.size)) < params.delta
            vals = np.maximum(np.where(inc, live, -np.inf).max(axis=1), c)
        else:
            vals = np.full(b, c)
        total += float(vals.sum())
        total_sq += float(np.square(vals).sum())
        done += b
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    reg = regulariser(params, blocks, w)
    return params.scale * mean + reg, params.scale * math.sqrt(var / samples)


def empirical_loss(w: np.ndarray, dataset: Dataset, params: ConstructionParams,
                   blocks: BlockScheme | None = None, packing: PackingSet | None = None) -> float:
    """Mean of f(w, V_i) over the dataset."""
    packing = packing if packing is not None else dataset.packing
    if packing is None:
        raise ValueError("a packing is required")
    w = np.asarray(w, dtype=np.float64)
    s = scores(params, packing, w)
    if dataset.m != packing.m:
        raise DimensionMismatch("dataset and packing sizes differ")
    gs = [g_value(params, s, V) for V in dataset.samples]
    return float(np.mean(gs)) + regulariser(params, blocks, w)


__all__ = [
    "Dataset", "make_dataset", "sample_v", "find_uncovered", "find_common",
    "good_event_multipass", "good_event_onepass", "onepass_horizon",
    "population_loss", "population_loss_mc", "empirical_loss", "score_input",
]
