"""Counter-based random draws.

Every draw is a pure function of ``(seed, stream, *keys)`` so results do not
depend on iteration order, batching, or platform. The mixer is splitmix64.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream identifiers; keep these stable, changing one changes every dataset
FLIP = 1
PERTURB = 2
RIVAL = 3
LABEL = 4
FEATURE = 5
FEATURE_AUX = 6
AUG_NOISE = 7
AUG_NOISE_AUX = 8
AUG_MASK = 9


def _mix(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def hash64(seed, stream, *keys):
    """Hash integer keys (broadcastable arrays) into uint64 words."""
    with np.errstate(over="ignore"):
        h = _mix(np.asarray(seed, dtype=np.uint64) * _GOLDEN + np.uint64(stream))
        for k in keys:
            k = np.asarray(k, dtype=np.int64).astype(np.uint64)
            h = _mix(h ^ (k + _GOLDEN))
    return h


def uniform(seed, stream, *keys):
    """Uniform draws in [0, 1) with 53 bits of resolution."""
    h = hash64(seed, stream, *keys)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def normal(seed, stream, aux_stream, *keys):
    """Standard normal draws via Box-Muller on two independent streams."""
    u1 = uniform(seed, stream, *keys)
    u2 = uniform(seed, aux_stream, *keys)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
