"""Dense f32 tensors with reverse-mode differentiation on an explicit tape.

Layout convention is channels-last throughout: images and grids are
(H, W, C), optionally with leading batch axes, so per-pixel matmuls and
channel concatenation hit contiguous inner loops.

A `Tape` is a linear record of executed ops.  Ops record themselves on the
innermost active tape; with no tape active they are plain numpy computations
(the inference fast path).  `backward` replays the record in exact reverse
execution order, accumulating gradients additively for shared operands.
One training step owns one tape (single writer); tensors themselves are
immutable after creation and can be shared freely.

`checkpoint` wraps a callable as a single tape entry that recomputes its
interior on the backward pass -- memory for long rollouts stays proportional
to the state, not to the step count.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand extents disagree; the message names the offending extent."""


class DivergenceError(RuntimeError):
    """Non-finite values appeared; carries the step index when known."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Entry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered op record; context manager activates it for recording."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def watch(self, tensor: Tensor):
        tensor.requires_grad = True
        if id(tensor) not in self._leaf_ids:
            self._leaf_ids.add(id(tensor))
            self.leaves.append(tensor)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                if id(t) not in self._leaf_ids:
                    self._leaf_ids.add(id(t))
                    self.leaves.append(t)
        assert id(output) not in self._produced, "op output recorded twice"
        self._produced.add(id(output))
        output.requires_grad = True
        self.entries.append(_Entry(tuple(inputs), output, backward_fn))


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _NoTape:
    def __enter__(self):
        self._saved = _TAPE_STACK[:]
        _TAPE_STACK.clear()
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.extend(self._saved)
        return False


def no_tape():
    """Suspend recording (inference / oracle evaluation inside a tape)."""
    return _NoTape()


def _record(inputs, output, backward_fn):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, output, backward_fn)
    return output


def _run_backward(tape: Tape, loss: Tensor, seed_grad) -> dict[int, np.ndarray]:
    """Reverse replay; returns grads keyed by id() for every touched tensor."""
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed_grad, dtype=np.float32)}
    for entry in reversed(tape.entries):
        gout = grads.pop(id(entry.output), None)
        if gout is None:
            continue
        gins = entry.backward_fn(gout)
        for t, g in zip(entry.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g
    return grads


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into .grad for every leaf of the tape.

    Loss must be scalar; leaves never reached by the replay get zeros.
    """
    if loss.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
    grads = _run_backward(tape, loss, np.ones((), dtype=np.float32))
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=np.float32).reshape(leaf.data.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run `fn(*inputs)` as one tape entry, recomputing it on backward.

    `fn` must be a pure function of its tensor arguments (plus constants);
    every tensor it should be differentiated against must be passed in.
    """
    with no_tape():
        out_data = fn(*inputs).data
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out

    def bw(gout):
        locals_ = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
        with no_tape(), Tape() as sub:
            for t in locals_:
                if t.requires_grad:
                    sub.watch(t)
            replay = fn(*locals_)
            local_ids = {id(t) for t in locals_}
            for leaf in sub.leaves:
                if id(leaf) not in local_ids:
                    raise RuntimeError(
                        "checkpoint function closed over a differentiable "
                        "tensor; pass it as an explicit argument")
            grads = _run_backward(sub, replay, gout)
        return [grads.get(id(t)) for t in locals_]

    tape.record(inputs, out, bw)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(t, c: float):
    t = as_tensor(t)
    c32 = np.float32(c)
    out = Tensor(t.data * c32)
    return _record((t,), out, lambda g: (g * c32,))


def relu(t):
    t = as_tensor(t)
    out = Tensor(np.maximum(t.data, 0.0))
    # gradient is 0 at exactly 0 (fixed subgradient choice)
    return _record((t,), out, lambda g: (g * (t.data > 0),))


def clamp(t, lo: float, hi: float):
    """Clamp values to [lo, hi]; straight-through gradient inside the band."""
    t = as_tensor(t)
    out = Tensor(np.clip(t.data, np.float32(lo), np.float32(hi)))
    inside = (t.data >= lo) & (t.data <= hi)
    return _record((t,), out, lambda g: (g * inside,))


# -- reductions ----------------------------------------------------------


def tsum(t):
    t = as_tensor(t)
    out = Tensor(t.data.sum(dtype=np.float32))
    return _record((t,), out, lambda g: (np.broadcast_to(g, t.shape).copy(),))


def tmean(t):
    t = as_tensor(t)
    n = np.float32(1.0 / t.size)
    out = Tensor(t.data.mean(dtype=np.float32).astype(np.float32))
    return _record((t,), out, lambda g: (np.broadcast_to(g * n, t.shape).copy(),))


# -- shape / channel ops -------------------------------------------------


def concat_channels(parts: Sequence[Tensor]):
    parts = [as_tensor(p) for p in parts]
    base = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != base:
            raise ShapeMismatch(
                f"concat_channels: spatial extents {p.shape[:-1]} != {base}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def bw(g):
        return np.split(g, splits, axis=-1)

    return _record(tuple(parts), out, bw)


def slice_channels(t, lo: int, hi: int):
    t = as_tensor(t)
    if not (0 <= lo <= hi <= t.shape[-1]):
        raise ShapeMismatch(
            f"slice_channels: [{lo}:{hi}] out of range for {t.shape[-1]} channels")
    out = Tensor(t.data[..., lo:hi].copy())

    def bw(g):
        full = np.zeros(t.shape, dtype=np.float32)
        full[..., lo:hi] = g
        return (full,)

    return _record((t,), out, bw)


def subsample(t, sy: int, sx: int):
    """Spatial stride: keep every sy-th row / sx-th column."""
    t = as_tensor(t)
    out = Tensor(t.data[..., ::sy, ::sx, :].copy())

    def bw(g):
        full = np.zeros(t.shape, dtype=np.float32)
        full[..., ::sy, ::sx, :] = g
        return (full,)

    return _record((t,), out, bw)


# -- pooling -------------------------------------------------------------


def _pool_view(x):
    h, w, c = x.shape[-3], x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeMismatch(f"pool2: spatial extents ({h}, {w}) must be even")
    lead = x.shape[:-3]
    v = x.reshape(lead + (h // 2, 2, w // 2, 2, c))
    # window axis enumerates offsets (0,0),(0,1),(1,0),(1,1)
    v = np.moveaxis(v, (-4, -2), (-2, -1))
    return np.ascontiguousarray(v).reshape(lead + (h // 2, w // 2, c, 4)), (h, w, c)


def _pool_unview(g4, hwc, lead):
    h, w, c = hwc
    g = g4.reshape(lead + (h // 2, w // 2, c, 2, 2))
    g = np.moveaxis(g, (-2, -1), (-4, -2))  # -> (..., h//2, 2, w//2, 2, c)
    return np.ascontiguousarray(g).reshape(lead + (h, w, c))


def maxpool2(t):
    """2x2 max pooling, stride 2; ties route the gradient to the first
    window position in (0,0),(0,1),(1,0),(1,1) order."""
    t = as_tensor(t)
    v, hwc = _pool_view(t.data)
    idx = v.argmax(axis=-1)
    out = Tensor(np.take_along_axis(v, idx[..., None], axis=-1)[..., 0])
    lead = t.shape[:-3]

    def bw(g):
        g4 = np.zeros(v.shape, dtype=np.float32)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        return (_pool_unview(g4, hwc, lead),)

    return _record((t,), out, bw)


def avgpool2(t):
    """2x2 average pooling, stride 2."""
    t = as_tensor(t)
    v, hwc = _pool_view(t.data)
    out = Tensor(v.mean(axis=-1, dtype=np.float32))
    lead = t.shape[:-3]

    def bw(g):
        g4 = np.broadcast_to((g * np.float32(0.25))[..., None], g.shape + (4,))
        return (_pool_unview(np.ascontiguousarray(g4), hwc, lead),)

    return _record((t,), out, bw)


# -- stencils ------------------------------------------------------------

_PAD_MODES = {"torus": "wrap", "clamp": "edge", "zero": None}


def _pad2d(x, by, bx):
    """Pad 1 cell on each spatial side; boundary mode per axis."""
    if by == bx == "torus":
        return np.pad(x, [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)], mode="wrap")
    out = x
    for axis, mode in ((-3, by), (-2, bx)):
        width = [(0, 0)] * out.ndim
        width[axis] = (1, 1)
        if mode == "zero":
            out = np.pad(out, width, mode="constant")
        else:
            out = np.pad(out, width, mode=_PAD_MODES[mode])
    return out


def _fold_pad2d(gp, by, bx):
    """Adjoint of _pad2d: fold the pad ring back into the core."""
    for axis, mode in ((-2, bx), (-3, by)):
        first = [slice(None)] * gp.ndim
        last = [slice(None)] * gp.ndim
        core = [slice(None)] * gp.ndim
        first[axis] = slice(0, 1)
        last[axis] = slice(gp.shape[axis] - 1, gp.shape[axis])
        core[axis] = slice(1, gp.shape[axis] - 1)
        lo, hi, mid = gp[tuple(first)], gp[tuple(last)], gp[tuple(core)]
        if mode == "torus":
            edge0 = [slice(None)] * mid.ndim
            edge1 = [slice(None)] * mid.ndim
            edge0[axis] = slice(0, 1)
            edge1[axis] = slice(mid.shape[axis] - 1, mid.shape[axis])
            mid[tuple(edge1)] += lo
            mid[tuple(edge0)] += hi
        elif mode == "clamp":
            edge0 = [slice(None)] * mid.ndim
            edge1 = [slice(None)] * mid.ndim
            edge0[axis] = slice(0, 1)
            edge1[axis] = slice(mid.shape[axis] - 1, mid.shape[axis])
            mid[tuple(edge0)] += lo
            mid[tuple(edge1)] += hi
        gp = mid
    return gp


def _boundary_modes(boundary):
    if isinstance(boundary, tuple):
        by, bx = boundary
    else:
        by = bx = boundary
    for m in (by, bx):
        if m not in _PAD_MODES:
            raise ValueError(f"unknown boundary mode {m!r}")
    return by, bx


def conv2d_depthwise(t, kernels, boundary="torus"):
    """Correlate every channel with each 3x3 kernel.

    kernels: Tensor[3, 3, K] of fixed (non-learned) taps.  Output channel
    c*K + k is kernel k applied to input channel c.  `boundary` is torus,
    clamp, or zero, optionally per axis as a (y_mode, x_mode) tuple.
    """
    t = as_tensor(t)
    kernels = as_tensor(kernels)
    if kernels.requires_grad:
        raise NotImplementedError("stencil kernels are fixed, not learnable")
    if kernels.shape[:2] != (3, 3):
        raise ShapeMismatch(f"kernel window must be 3x3, got {kernels.shape[:2]}")
    if t.ndim < 3:
        raise ShapeMismatch(f"conv2d_depthwise expects (..., H, W, C), got {t.shape}")
    by, bx = _boundary_modes(boundary)
    k = kernels.data
    nk = k.shape[2]
    xp = _pad2d(t.data, by, bx)
    h, w, c = t.shape[-3], t.shape[-2], t.shape[-1]
    out = np.zeros(t.shape[:-3] + (h, w, c, nk), dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            taps = k[dy, dx]
            if not taps.any():
                continue
            win = xp[..., dy:dy + h, dx:dx + w, :]
            out += win[..., None] * taps
    out_t = Tensor(out.reshape(t.shape[:-3] + (h, w, c * nk)))

    def bw(g):
        g = g.reshape(t.shape[:-3] + (h, w, c, nk))
        gp = np.zeros(xp.shape, dtype=np.float32)
        for dy in range(3):
            for dx in range(3):
                taps = k[dy, dx]
                if not taps.any():
                    continue
                gp[..., dy:dy + h, dx:dx + w, :] += g @ taps
        return (_fold_pad2d(gp, by, bx), None)

    return _record((t, kernels), out_t, bw)


def extract_patches(t, kh: int, kw: int, boundary="zero"):
    """im2col: (..., H, W, C) -> (..., H, W, C*kh*kw), same padding.

    Output channel c*(kh*kw) + (dy*kw + dx) holds the neighbor at window
    offset (dy, dx).  Window extents must be odd.
    """
    t = as_tensor(t)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"window extents must be odd, got ({kh}, {kw})")
    by, bx = _boundary_modes(boundary)
    h, w, c = t.shape[-3], t.shape[-2], t.shape[-1]
    ry, rx = kh // 2, kw // 2
    width = [(0, 0)] * (t.ndim - 3) + [(ry, ry), (rx, rx), (0, 0)]
    if by == "zero" and bx == "zero":
        xp = np.pad(t.data, width, mode="constant")
    else:
        xp = t.data
        for axis, mode, r in ((-3, by, ry), (-2, bx, rx)):
            wd = [(0, 0)] * xp.ndim
            wd[axis] = (r, r)
            xp = np.pad(xp, wd, mode="constant" if mode == "zero" else _PAD_MODES[mode])
    pieces = np.empty(t.shape[:-3] + (h, w, c, kh * kw), dtype=np.float32)
    for dy in range(kh):
        for dx in range(kw):
            pieces[..., dy * kw + dx] = xp[..., dy:dy + h, dx:dx + w, :]
    out = Tensor(pieces.reshape(t.shape[:-3] + (h, w, c * kh * kw)))

    def bw(g):
        g = g.reshape(t.shape[:-3] + (h, w, c, kh * kw))
        gp = np.zeros(xp.shape, dtype=np.float32)
        for dy in range(kh):
            for dx in range(kw):
                gp[..., dy:dy + h, dx:dx + w, :] += g[..., dy * kw + dx]
        for axis, mode, r in ((-2, bx, rx), (-3, by, ry)):
            if r == 0:
                continue
            core = [slice(None)] * gp.ndim
            core[axis] = slice(r, gp.shape[axis] - r)
            if mode == "torus":
                head = [slice(None)] * gp.ndim
                tail = [slice(None)] * gp.ndim
                head[axis] = slice(0, r)
                tail[axis] = slice(gp.shape[axis] - r, gp.shape[axis])
                lo, hi = gp[tuple(head)].copy(), gp[tuple(tail)].copy()
                gp = gp[tuple(core)]
                dst_tail = [slice(None)] * gp.ndim
                dst_head = [slice(None)] * gp.ndim
                dst_tail[axis] = slice(gp.shape[axis] - r, gp.shape[axis])
                dst_head[axis] = slice(0, r)
                gp[tuple(dst_tail)] += lo
                gp[tuple(dst_head)] += hi
            elif mode == "clamp":
                head = [slice(None)] * gp.ndim
                tail = [slice(None)] * gp.ndim
                head[axis] = slice(0, r)
                tail[axis] = slice(gp.shape[axis] - r, gp.shape[axis])
                lo = gp[tuple(head)].sum(axis=axis, keepdims=True)
                hi = gp[tuple(tail)].sum(axis=axis, keepdims=True)
                gp = gp[tuple(core)].copy()
                dst_head = [slice(None)] * gp.ndim
                dst_tail = [slice(None)] * gp.ndim
                dst_head[axis] = slice(0, 1)
                dst_tail[axis] = slice(gp.shape[axis] - 1, gp.shape[axis])
                gp[tuple(dst_head)] += lo
                gp[tuple(dst_tail)] += hi
            else:
                gp = gp[tuple(core)]
        return (gp,)

    return _record((t,), out, bw)


# -- per-pixel affine ----------------------------------------------------


def matmul_pointwise(t, weight, bias=None):
    """Per-pixel affine map: (..., A) x (A, B) + (B,) -> (..., B)."""
    t, weight = as_tensor(t), as_tensor(weight)
    a_in, (a_w, b_w) = t.shape[-1], weight.shape
    if a_in != a_w:
        raise ShapeMismatch(
            f"matmul_pointwise: input channels {a_in} != weight rows {a_w}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (b_w,):
            raise ShapeMismatch(
                f"matmul_pointwise: bias extent {bias.shape} != ({b_w},)")
    x2 = t.data.reshape(-1, a_in)
    y2 = x2 @ weight.data
    if bias is not None:
        y2 = y2 + bias.data
    out = Tensor(y2.reshape(t.shape[:-1] + (b_w,)))

    def bw(g):
        g2 = g.reshape(-1, b_w)
        gx = (g2 @ weight.data.T).reshape(t.shape)
        gw = x2.T @ g2
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    ins = (t, weight) if bias is None else (t, weight, bias)
    return _record(ins, out, bw)


# -- gram ----------------------------------------------------------------


def gram(t):
    """Channel inner-product matrix of (..., H, W, C), normalized by H*W.

    G[i, j] = sum_xy F[x, y, i] * F[x, y, j] / (H * W).  The upper triangle
    is computed once and mirrored, so symmetry is bit-exact.
    """
    t = as_tensor(t)
    if t.ndim < 3:
        raise ShapeMismatch(f"gram expects (..., H, W, C), got {t.shape}")
    h, w, c = t.shape[-3], t.shape[-2], t.shape[-1]
    if h * w == 0:
        raise ShapeMismatch("gram: empty spatial extent")
    inv = np.float32(1.0 / (h * w))
    f2 = t.data.reshape(t.shape[:-3] + (h * w, c))
    g_full = np.swapaxes(f2, -1, -2) @ f2 * inv
    upper = np.triu(g_full)
    sym = upper + np.swapaxes(np.triu(g_full, 1), -1, -2)
    out = Tensor(sym)

    def bw(g):
        gsym = g + np.swapaxes(g, -1, -2)
        gf = (f2 @ gsym) * inv
        return (gf.reshape(t.shape),)

    return _record((t,), out, bw)
