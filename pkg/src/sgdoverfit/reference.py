"""Slow exhaustive evaluators for cross-checking on tiny instances."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .construction import BlockScheme, ConstructionParams, Variant


def _subset_value(x, I) -> float:
    return sum(x[i] for i in I) / math.sqrt(len(I))


def hinge_enum(x: np.ndarray, size: int) -> float:
    best = 0.0
    for k in range(1, min(size, len(x)) + 1):
        for I in itertools.combinations(range(len(x)), k):
            best = max(best, _subset_value(x, I))
    return best


def large_k_h_enum(w: np.ndarray, B: int, blocks: BlockScheme | None) -> float:
    d = len(w)
    best = 0.0
    subsets = list(itertools.combinations(range(d), B))
    for I in subsets:
        best = max(best, -_subset_value(w, I))
    if blocks is None:
        for I in subsets:
            for J in subsets:
                if max(I) < min(J):
                    best = max(best, _subset_value(w, J) - _subset_value(w, I))
    else:
        bl = [tuple(int(i) for i in b) for b in blocks.blocks]
        for j in range(len(bl)):
            for k in range(j + 1, len(bl)):
                best = max(best, _subset_value(w, bl[k]) - _subset_value(w, bl[j]))
    return best


def eval_f_enum(params: ConstructionParams, blocks: BlockScheme | None, w: np.ndarray,
                V: np.ndarray, packing) -> float:
    w = [float(x) for x in w]
    vecs = packing.matrix
    if params.variant is Variant.LARGE_K:
        x = w
    else:
        d = params.d
        x = [w[i] + w[d + i] + params.shift for i in range(d)]
    top = params.threshold
    for j in np.flatnonzero(V):
        s = sum(xi * vi for xi, vi in zip(x, vecs[j]))
        top = max(top, s)
    g = params.scale * top
    if params.variant is Variant.LARGE_K:
        return g + params.alpha * large_k_h_enum(np.array(w), params.B, blocks)
    d = params.d
    up = hinge_enum(np.array(w[:d]), params.B)
    down = hinge_enum(-np.array(w[d:]), params.B)
    if params.variant is Variant.SMALL_K:
        return g + params.alpha * (5 / 7 * up + 2 / 7 * down)
    return g + up + down


def population_loss_enum(params, blocks, w, packing) -> float:
    """``sum_V P(V) f(w, V)`` over all 2^m subsets."""
    m = packing.m
    total = 0.0
    for bits in itertools.product((False, True), repeat=m):
        V = np.array(bits, dtype=bool)
        k = int(V.sum())
        prob = params.delta**k * (1 - params.delta) ** (m - k)
        if prob:
            total += prob * eval_f_enum(params, blocks, w, V, packing)
    return total


def coverage_probability_exact(m: int, n: int, delta: float) -> float:
    """P[every one of m vectors lies in at least one of n independent samples]."""
    return (1.0 - (1.0 - delta) ** n) ** m


def coupon_probability_exact(n: int, draws: int) -> float:
    """P[draws uniform picks from n items cover all of them], by a Markov chain."""
    p = np.zeros(n + 1)
    p[0] = 1.0
    for _ in range(draws):
        nxt = np.zeros_like(p)
        seen = np.arange(n + 1)
        nxt += p * seen / n
        nxt[1:] += p[:-1] * (n - seen[:-1]) / n
        p = nxt
    return float(p[n])


def coupon_probability_inclusion_exclusion(n: int, draws: int) -> float:
    """Same quantity via inclusion-exclusion (exact rationals)."""
    from fractions import Fraction

    total = Fraction(0)
    for j in range(n + 1):
        total += (-1) ** j * math.comb(n, j) * Fraction(n - j, n) ** draws
    return float(total)
