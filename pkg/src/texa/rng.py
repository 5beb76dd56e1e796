"""Counter-based random streams for reproducible simulation.

Every stochastic value the engine consumes (update-mask bits, noise grids,
damage noise) is a pure function of a 32-bit seed and integer counters, so a
tile computing a sub-rectangle, a process restart, or a re-implementation in
another language all reproduce the exact same draws.  The hash is murmur3-32
over exactly four 32-bit words; see docs/FORMATS.md for the normative
description used by external consumers.

Streams are separated by a leading tag word:

    MASK    update-gate bits,   words (MASK,  seed, step, y*W + x)
    NOISE   uniform state init, words (NOISE, seed, draw, (y*W + x)*C + c)

`draw` distinguishes independent noise fields under one seed (initial grid,
pool reseeds, damage events, expansion fill).
"""

from __future__ import annotations

import numpy as np

MASK = np.uint32(0x6B73616D)
NOISE = np.uint32(0x65696F6E)

_C1 = np.uint32(0xCC9E2D51)
_C2 = np.uint32(0x1B873593)
_U32 = np.uint32


def _rotl(x, r):
    return (x << _U32(r)) | (x >> _U32(32 - r))


def _mix(h, k):
    k = k * _C1
    k = _rotl(k, 15)
    k = k * _C2
    h = h ^ k
    h = _rotl(h, 13)
    return h * _U32(5) + _U32(0xE6546B64)


def hash_words(a, b, c, d):
    """murmur3-32 of four u32 words (zero seed, length 16). Broadcasts."""
    a, b, c, d = (np.asarray(w).astype(np.uint32) for w in (a, b, c, d))
    with np.errstate(over="ignore"):  # u32 wrap-around is the hash
        h = np.zeros(np.broadcast(a, b, c, d).shape, dtype=np.uint32)
        for k in (a, b, c, d):
            h = _mix(h, k)
        h = h ^ _U32(16)
        h = h ^ (h >> _U32(16))
        h = h * _U32(0x85EBCA6B)
        h = h ^ (h >> _U32(13))
        h = h * _U32(0xC2B2AE35)
        h = h ^ (h >> _U32(16))
    return h


def mask_bits(seed, step, height, width, rate=0.5, origin=(0, 0), grid_width=None):
    """Bernoulli(rate) gate bits for one update step, shape (height, width).

    Cell (y, x) draws from counter (seed, step, gy*GW + gx) where (gy, gx)
    are grid-global coordinates: `origin` offsets the rectangle and
    `grid_width` is the full grid's width, so a tile evaluating a
    sub-rectangle reproduces the monolithic stream bit for bit.
    """
    if grid_width is None:
        grid_width = origin[1] + width
    ys = np.arange(origin[0], origin[0] + height, dtype=np.uint32)
    xs = np.arange(origin[1], origin[1] + width, dtype=np.uint32)
    idx = ys[:, None] * _U32(grid_width) + xs[None, :]
    h = hash_words(MASK, _U32(seed), _U32(step), idx)
    threshold = _U32(min(int(rate * (1 << 24)), 1 << 24))
    return ((h >> _U32(8)) < threshold).astype(np.float32)


def uniform_field(seed, draw, shape):
    """Uniform [0, 1) f32 field with 24-bit resolution, counter-indexed."""
    n = int(np.prod(shape, dtype=np.int64))
    idx = np.arange(n, dtype=np.uint32)
    h = hash_words(NOISE, _U32(seed), _U32(draw), idx)
    vals = (h >> _U32(8)).astype(np.float32) * np.float32(2.0**-24)
    return vals.reshape(shape)


def noise_state(seed, height, width, channels, draw=0):
    """Fresh uniform-noise grid values; linear index runs (y, x, c) row-major."""
    return uniform_field(seed, draw, (height, width, channels))
