import math

import numpy as np
import pytest
from hypothesis import settings

from sgdoverfit import derive_params, generate_packing
from sgdoverfit.construction import Variant

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_params():
    """Instances small enough for exhaustive enumeration (d <= 16)."""
    return {
        Variant.LARGE_K: derive_params(Variant.LARGE_K, 4, 34, 0.5,
                                       {"d_prime": 16, "B": 2, "T": 34 * 8, "tau_epoch": 4}),
        Variant.SMALL_K: derive_params(Variant.SMALL_K, 4, 2, 0.5, {"d": 16, "B": 3, "tau_epoch": 16}),
        Variant.ONE_PASS: derive_params(Variant.ONE_PASS, 17, 1, 0.3, {"d": 16, "B": 3}),
    }


@pytest.fixture(scope="session")
def tiny_packings(tiny_params):
    return {v: generate_packing(p.packing_kind, p.base_dim, 6, 11) for v, p in tiny_params.items()}


@pytest.fixture(scope="session")
def desk():
    """Desk-scale (params, packing) per variant, shared across modules."""
    from sgdoverfit.harness import _packing, desk_instance

    out = {}
    for v in Variant:
        p, m = desk_instance(v)
        out[v] = (p, _packing(p.packing_kind, p.base_dim, m, 0))
    return out


def random_ball(rng, dim, radius=1.0):
    x = rng.standard_normal(dim)
    return x / np.linalg.norm(x) * radius * rng.random() ** (1.0 / dim)


def close(a, b, rel=1e-12):
    return math.isclose(a, b, rel_tol=rel, abs_tol=rel)
