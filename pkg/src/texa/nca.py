"""The cellular automaton: perception, learned update, stochastic stepping.

A cell state has 12 channels (the first 3 are the RGB readout).  Perception
concatenates the state with its responses to fixed gradient and Laplacian
stencils; the learned rule is a two-layer per-cell MLP producing a residual
that is applied through a Bernoulli update gate and clamped to the state
band.  All functions accept either a bare Tensor (optionally with leading
batch axes) or a StateGrid wrapper and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T

CHANNELS = 12
HIDDEN = 96
PERCEPTION = 4 * CHANNELS
PARAM_COUNT = PERCEPTION * HIDDEN + HIDDEN + HIDDEN * CHANNELS + CHANNELS  # 5868
STATE_BAND = 3.0

KX = np.array([[-1.0, 0.0, 1.0],
               [-2.0, 0.0, 2.0],
               [-1.0, 0.0, 1.0]], dtype=np.float32)
KY = np.array([[-1.0, -2.0, -1.0],
               [0.0, 0.0, 0.0],
               [1.0, 2.0, 1.0]], dtype=np.float32)
KLAP = np.array([[1.0, 2.0, 1.0],
                 [2.0, -12.0, 2.0],
                 [1.0, 2.0, 1.0]], dtype=np.float32)
KID = np.zeros((3, 3), dtype=np.float32)
KID[1, 1] = 1.0


@dataclass
class StateGrid:
    """A rectangular field of cell states plus its boundary topology."""

    values: T.Tensor
    topology: str = "torus"  # torus | open

    def __post_init__(self):
        self.values = T.as_tensor(self.values)
        if self.values.ndim != 3 or self.values.shape[-1] != CHANNELS:
            raise T.ShapeMismatch(
                f"state must be (H, W, {CHANNELS}), got {self.values.shape}")
        if self.topology not in ("torus", "open"):
            raise ValueError(f"unknown topology {self.topology!r}")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    @property
    def boundary(self):
        return "torus" if self.topology == "torus" else "clamp"

    @property
    def rgb(self):
        return self.values.data[..., :3]


def noise_grid(seed, height, width, draw=0, topology="torus"):
    """Uniform [0,1) noise across all channels; the pool's empty state."""
    return StateGrid(T.Tensor(rng.noise_state(seed, height, width, CHANNELS, draw)),
                     topology=topology)


@dataclass
class KernelSet:
    """Perception stencils ordered (identity, gx, gy, lap).

    Square geometry uses one tap set; hex geometry is an even-row-offset
    raster, so cells on odd rows read column-shifted taps (kernels_odd).
    """

    kernels: T.Tensor
    geometry: str = "square"
    kernels_odd: T.Tensor | None = None

    def __post_init__(self):
        self.kernels = T.as_tensor(self.kernels)
        if self.kernels.shape != (3, 3, 4):
            raise T.ShapeMismatch(f"kernel set must be (3,3,4), got {self.kernels.shape}")

    def derivative_kernels(self, parity=0):
        src = self.kernels if (parity == 0 or self.kernels_odd is None) else self.kernels_odd
        return T.Tensor(src.data[..., 1:])


def square_kernels() -> KernelSet:
    return KernelSet(T.Tensor(np.stack([KID, KX, KY, KLAP], axis=-1)), "square")


# Hex neighbors live on an even-row-offset raster: even rows sit half a cell
# to the right, so the six taps move between the two row parities.  Gradient
# taps are the unit neighbor offsets projected on x/y; the Laplacian is
# (sum of neighbors - 6*center).  Both carry the 8/3 calibration factor that
# matches the square kernels' response: a column ramp drives Sobel-x to 8
# while the raw hex sum is 3, and the bowl x^2+y^2 drives the 9-point
# Laplacian to 16 while the raw hex sum is 6.
_HEX_SCALE = 8.0 / 3.0
_ROOT3_2 = np.sqrt(3.0) / 2.0


def _hex_taps(parity):
    # raster offsets (dy, dx) and geometric unit offsets (ux, uy), y down
    if parity == 0:  # even rows (shifted right)
        neigh = [(0, 1, 1.0, 0.0), (0, -1, -1.0, 0.0),
                 (-1, 1, 0.5, -_ROOT3_2), (-1, 0, -0.5, -_ROOT3_2),
                 (1, 1, 0.5, _ROOT3_2), (1, 0, -0.5, _ROOT3_2)]
    else:
        neigh = [(0, 1, 1.0, 0.0), (0, -1, -1.0, 0.0),
                 (-1, 0, 0.5, -_ROOT3_2), (-1, -1, -0.5, -_ROOT3_2),
                 (1, 0, 0.5, _ROOT3_2), (1, -1, -0.5, _ROOT3_2)]
    gx = np.zeros((3, 3), dtype=np.float32)
    gy = np.zeros((3, 3), dtype=np.float32)
    lap = np.zeros((3, 3), dtype=np.float32)
    for dy, dx, ux, uy in neigh:
        gx[dy + 1, dx + 1] += ux * _HEX_SCALE
        gy[dy + 1, dx + 1] += uy * _HEX_SCALE
        lap[dy + 1, dx + 1] += _HEX_SCALE
    lap[1, 1] -= 6.0 * _HEX_SCALE
    return np.stack([KID, gx, gy, lap], axis=-1).astype(np.float32)


def hex_kernels() -> KernelSet:
    return KernelSet(T.Tensor(_hex_taps(0)), "hex", T.Tensor(_hex_taps(1)))


@dataclass
class NcaParams:
    """The 5868 learned scalars: W0 (48x96), b0 (96), W1 (96x12), b1 (12)."""

    W0: T.Tensor
    b0: T.Tensor
    W1: T.Tensor
    b1: T.Tensor

    def __post_init__(self):
        shapes = {"W0": (PERCEPTION, HIDDEN), "b0": (HIDDEN,),
                  "W1": (HIDDEN, CHANNELS), "b1": (CHANNELS,)}
        for name, want in shapes.items():
            t = T.as_tensor(getattr(self, name))
            setattr(self, name, t)
            if t.shape != want:
                raise T.ShapeMismatch(f"{name} must be {want}, got {t.shape}")
        assert self.count == PARAM_COUNT

    @property
    def count(self):
        return sum(t.size for t in self.tensors)

    @property
    def tensors(self):
        return [self.W0, self.b0, self.W1, self.b1]

    @property
    def names(self):
        return ["W0", "b0", "W1", "b1"]

    def watch(self, tape: T.Tape):
        for t in self.tensors:
            tape.watch(t)

    def copy(self):
        return NcaParams(*(T.Tensor(t.data.copy()) for t in self.tensors))


def init_params(seed=0) -> NcaParams:
    """Zero-residual start: W1/b1 zero so the untrained CA is the identity
    map; W0 He-uniform over fan-in, b0 zero."""
    rs = np.random.RandomState(seed)
    limit = np.sqrt(6.0 / PERCEPTION)
    w0 = rs.uniform(-limit, limit, size=(PERCEPTION, HIDDEN)).astype(np.float32)
    return NcaParams(
        T.Tensor(w0),
        T.Tensor(np.zeros(HIDDEN, dtype=np.float32)),
        T.Tensor(np.zeros((HIDDEN, CHANNELS), dtype=np.float32)),
        T.Tensor(np.zeros(CHANNELS, dtype=np.float32)),
    )


@dataclass
class UpdateMask:
    """Per-cell Bernoulli update gate for one step."""

    mask: T.Tensor
    rate: float = 0.5


def update_mask(seed, step, height, width, rate=0.5, origin=(0, 0), grid_width=None):
    bits = rng.mask_bits(seed, step, height, width, rate, origin, grid_width)
    return UpdateMask(T.Tensor(bits), rate)


@dataclass
class RotationField:
    """Per-cell perception rotation angle in radians; 0 means no rotation."""

    alpha: T.Tensor

    def __post_init__(self):
        self.alpha = T.as_tensor(self.alpha)
        if not np.all(np.isfinite(self.alpha.data)):
            raise ValueError("rotation angles must be finite")


def _state_tensor(state):
    if isinstance(state, StateGrid):
        return state.values
    return T.as_tensor(state)


def _mask_tensor(mask):
    m = mask.mask if isinstance(mask, UpdateMask) else T.as_tensor(mask)
    if m.ndim >= 2 and m.shape[-1] != 1:
        m = T.Tensor(m.data[..., None])
    return m


def _conv_blocks(values, kern3, boundary):
    """One depthwise conv per stencil so channels come out block-ordered."""
    blocks = []
    for k in range(kern3.shape[-1]):
        one = T.Tensor(kern3.data[..., k:k + 1])
        blocks.append(T.conv2d_depthwise(values, one, boundary=boundary))
    return blocks


def perceive(state, kernels: KernelSet | None = None, rotation=None,
             boundary=None, row_origin=0):
    """Perception vector: concat(state, gx, gy, lap), 48 channels.

    With a rotation field, the gradient pair is rotated per cell:
    (gx', gy') = (c*gx + s*gy, -s*gx + c*gy), c = cos(alpha), s = sin(alpha).
    """
    values = _state_tensor(state)
    if boundary is None:
        boundary = state.boundary if isinstance(state, StateGrid) else "torus"
    kernels = kernels or square_kernels()
    h, w = values.shape[-3], values.shape[-2]

    gx, gy, lap = _conv_blocks(values, kernels.derivative_kernels(0), boundary)
    if kernels.kernels_odd is not None:
        gx1, gy1, lap1 = _conv_blocks(values, kernels.derivative_kernels(1), boundary)
        rows = (np.arange(h) + row_origin) % 2 == 0
        even = T.Tensor(rows.astype(np.float32)[:, None, None])
        odd = T.Tensor((~rows).astype(np.float32)[:, None, None])
        gx = T.add(T.mul(gx, even), T.mul(gx1, odd))
        gy = T.add(T.mul(gy, even), T.mul(gy1, odd))
        lap = T.add(T.mul(lap, even), T.mul(lap1, odd))

    if rotation is not None:
        alpha = rotation.alpha.data if isinstance(rotation, RotationField) \
            else np.asarray(rotation, dtype=np.float32)
        if alpha.shape != (h, w):
            raise T.ShapeMismatch(
                f"rotation field shape {alpha.shape} != grid ({h}, {w})")
        c = T.Tensor(np.cos(alpha, dtype=np.float32)[..., None])
        s = T.Tensor(np.sin(alpha, dtype=np.float32)[..., None])
        gx, gy = (T.add(T.mul(gx, c), T.mul(gy, s)),
                  T.sub(T.mul(gy, c), T.mul(gx, s)))

    return T.concat_channels([values, gx, gy, lap])


def update_rule(p, params: NcaParams, hidden_hook=None):
    """Per-cell residual: relu(p W0 + b0) W1 + b1.

    `hidden_hook` (Tensor -> Tensor) intercepts the post-relu hidden layer;
    the trainer uses it for quantization-aware rounding.
    """
    hidden = T.relu(T.matmul_pointwise(p, params.W0, params.b0))
    if hidden_hook is not None:
        hidden = hidden_hook(hidden)
    return T.matmul_pointwise(hidden, params.W1, params.b1)


def step(state, params: NcaParams, kernels: KernelSet | None = None,
         mask=None, rotation=None, boundary=None, band=STATE_BAND,
         step_index=None, row_origin=0, hidden_hook=None, state_hook=None):
    """One CA step: s' = clamp(s + f(p) * mask, -band, band).

    Raises DivergenceError (carrying step_index) if the residual goes
    non-finite.  `state_hook` runs on the clamped output (QAT grid snap).
    Returns the same kind (StateGrid or Tensor) it was given.
    """
    values = _state_tensor(state)
    if boundary is None:
        boundary = state.boundary if isinstance(state, StateGrid) else "torus"
    p = perceive(values, kernels, rotation=rotation, boundary=boundary,
                 row_origin=row_origin)
    delta = update_rule(p, params, hidden_hook=hidden_hook)
    if not np.all(np.isfinite(delta.data)):
        raise T.DivergenceError(
            f"non-finite update at step {step_index}", step=step_index)
    if mask is not None:
        delta = T.mul(delta, _mask_tensor(mask))
    out = T.clamp(T.add(values, delta), -band, band)
    if state_hook is not None:
        out = state_hook(out)
    if isinstance(state, StateGrid):
        return StateGrid(out, topology=state.topology)
    return out


def rollout(state, params: NcaParams, kernels: KernelSet | None = None,
            steps=1, seed=0, rate=0.5, rotation=None, boundary=None,
            band=STATE_BAND, use_checkpoints=True, first_step=0,
            hidden_hook=None, state_hook=None):
    """Iterate `steps` CA steps with fresh gate bits per step.

    `seed` is an int for a single grid, or one seed per sample for a batched
    (B, H, W, C) state so batch entries draw independent gates.  Each step is
    a recompute-on-backward tape entry, keeping BPTT memory flat in `steps`.
    Returns (final state, tape) where tape is the active record (None when
    nothing requires gradients).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    values = _state_tensor(state)
    if boundary is None:
        boundary = state.boundary if isinstance(state, StateGrid) else "torus"
    kernels = kernels or square_kernels()
    h, w = values.shape[-3], values.shape[-2]
    batched = values.ndim == 4
    seeds = list(seed) if np.ndim(seed) > 0 else [seed]
    if batched and len(seeds) != values.shape[0]:
        raise T.ShapeMismatch(
            f"need one seed per batch sample ({values.shape[0]}), got {len(seeds)}")

    def masked_step(t):
        bits = np.stack([rng.mask_bits(s, t, h, w, rate) for s in seeds])
        mask = T.Tensor(bits[..., None] if batched else bits[0][..., None])

        def body(v, w0, b0, w1, b1):
            return step(v, NcaParams(w0, b0, w1, b1), kernels, mask,
                        rotation=rotation, boundary=boundary, band=band,
                        step_index=t, hidden_hook=hidden_hook,
                        state_hook=state_hook)
        return body

    tape = T.active_tape()
    for t in range(first_step, first_step + steps):
        body = masked_step(t)
        if use_checkpoints:
            values = T.checkpoint(body, values, *params.tensors)
        else:
            values = body(values, *params.tensors)

    if isinstance(state, StateGrid):
        return StateGrid(values, topology=state.topology), tape
    return values, tape
