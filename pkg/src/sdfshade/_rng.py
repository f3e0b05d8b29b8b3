"""Counter-based deterministic uniforms (splitmix64 finalizer).

Both render paths and the Monte Carlo shading draw their randomness from this
hash so results are reproducible and independent of chunking, tiling, and
thread count. The grid kernels reimplement the identical arithmetic in numba.
"""

import numpy as np

_U64 = np.uint64
H1 = _U64(0x9E3779B97F4A7C15)
H2 = _U64(0xD1B54A32D192ED03)
H3 = _U64(0x94D049BB133111EB)
M1 = _U64(0xBF58476D1CE4E5B9)
M2 = _U64(0x94D049BB133111EB)


def hash01(seed, stream_ids, counter_ids):
    """Uniforms in [0, 1) from (seed, stream, counter) integer triples."""
    with np.errstate(over="ignore"):
        z = (_U64(seed) * H1) \
            ^ (np.asarray(stream_ids, dtype=np.uint64) * H2) \
            ^ (np.asarray(counter_ids, dtype=np.uint64) * H3)
        z = z ^ (z >> _U64(30))
        z = z * M1
        z = z ^ (z >> _U64(27))
        z = z * M2
        z = z ^ (z >> _U64(31))
    return (z >> _U64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
