"""Counter-based deterministic randomness.

Every stochastic draw in the simulator and the local map is a pure function of
integer keys (seed, stream tag, frame, entity id). This keeps replays
bit-identical regardless of iteration order, process, or platform; no stateful
or OS-seeded generator is ever consulted.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# Stream tags so different purposes never share a counter sequence.
STREAM_SURVIVAL = 0x01
STREAM_INTENSITY = 0x02
STREAM_RANGE = 0x03
STREAM_ODOMETRY = 0x04
STREAM_CLUTTER = 0x05
STREAM_POINT_XY = 0x06


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        x = (x + _GOLDEN).astype(np.uint64)
        x ^= x >> np.uint64(30)
        x *= _MIX1
        x ^= x >> np.uint64(27)
        x *= _MIX2
        x ^= x >> np.uint64(31)
    return x


def hash_u64(seed: int, stream: int, frame: int, ids) -> np.ndarray:
    """Hash (seed, stream, frame, id) tuples to uint64, vectorized over ids."""
    ids = np.asarray(ids, dtype=np.uint64)
    key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix(np.uint64(stream)))
    key = _mix(key ^ _mix(np.uint64(frame & 0xFFFFFFFFFFFFFFFF)))
    return _mix(ids ^ key)


def uniforms(seed: int, stream: int, frame: int, ids) -> np.ndarray:
    """Uniform [0, 1) floats keyed by (seed, stream, frame, id)."""
    h = hash_u64(seed, stream, frame, ids)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def normals(seed: int, stream: int, frame: int, ids) -> np.ndarray:
    """Standard normal draws via Box-Muller on two keyed uniform streams."""
    ids = np.asarray(ids, dtype=np.uint64)
    u1 = uniforms(seed, stream, frame, ids * np.uint64(2))
    u2 = uniforms(seed, stream, frame, ids * np.uint64(2) + np.uint64(1))
    # Guard log(0); u1 in [0,1) so flip to (0,1].
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    return r * np.cos(2.0 * np.pi * u2)
