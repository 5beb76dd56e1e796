"""Post-training execution: long runs, damage, expansion, texture printing,
tiled evaluation with halo exchange, and fully-integer int8 inference.

Everything here routes grid updates through nca.step, so inference runs are
bitwise comparable with training rollouts given the same seed and geometry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model_io, nca, rng
from . import tensor as T


class GeometryError(ValueError):
    """Model geometry incompatible with the requested run options."""


# ---------------------------------------------------------------------------
# float runner


@dataclass
class FreezeMask:
    """Per-cell update ban; frozen cells keep their state bitwise."""

    mask: np.ndarray    # (H, W) bool, True = frozen

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise T.ShapeMismatch(f"freeze mask must be (H, W), got {self.mask.shape}")


def _boundary_for(topology):
    if isinstance(topology, tuple):
        return topology
    return {"torus": "torus", "open": "clamp"}[topology]


def _freeze_gate(freeze, h, w):
    if freeze is None:
        return None
    m = freeze.mask if isinstance(freeze, FreezeMask) else np.asarray(freeze, dtype=bool)
    if m.shape != (h, w):
        raise T.ShapeMismatch(f"freeze mask {m.shape} does not match grid ({h}, {w})")
    return (~m).astype(np.float32)


def run(params: nca.NcaParams, height: int, width: int, steps: int, *,
        seed: int = 0, rate: float = 0.5, band: float = nca.STATE_BAND,
        geometry: str = "square", topology="torus", rotation=None,
        freeze=None, initial=None, events=(), snapshot_every=None,
        on_snapshot=None, origin=(0, 0), grid_width=None, first_step=0):
    """Run the CA `steps` updates from noise (or `initial`) and return the
    final (H, W, 12) state array.

    - `events`: iterable of (step, fn) pairs; fn(state array) -> state array
      is applied before the update at that wall step (damage, expansion, ...).
    - `on_snapshot(step, state)` fires after every `snapshot_every`-th step.
    - `origin`/`grid_width` key the gate stream by global coordinates so a
      sub-grid can reproduce the exact update pattern of a larger run.
    - `topology`: "torus", "open", or a per-axis (y, x) boundary tuple.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    kernels = nca.square_kernels() if geometry == "square" else nca.hex_kernels()
    if initial is None:
        state = rng.noise_state(seed, height, width, nca.CHANNELS)
    else:
        state = np.asarray(initial, dtype=np.float32).copy()
        if state.shape != (height, width, nca.CHANNELS):
            raise T.ShapeMismatch(
                f"initial state {state.shape} does not match "
                f"({height}, {width}, {nca.CHANNELS})")
    boundary = _boundary_for(topology)
    if rotation is not None:
        rotation = rotation.alpha.data if isinstance(rotation, nca.RotationField) \
            else np.asarray(rotation, dtype=np.float32)
    pending = sorted(events, key=lambda e: e[0])
    gate = _freeze_gate(freeze, height, width)

    with T.no_tape():
        for t in range(first_step, first_step + steps):
            while pending and pending[0][0] == t:
                state = np.asarray(pending.pop(0)[1](state), dtype=np.float32)
                if state.shape[:2] != (height, width):
                    if gate is not None:
                        raise ValueError(
                            "freeze mask is sized to the original grid and "
                            "cannot combine with a resizing event")
                    height, width = state.shape[:2]
            bits = rng.mask_bits(seed, t, height, width, rate,
                                 origin=origin, grid_width=grid_width)
            if gate is not None:
                bits = bits * gate
            rot = rotation
            if rot is not None and rot.shape != (height, width):
                raise T.ShapeMismatch(
                    f"rotation field {rot.shape} does not match grid "
                    f"({height}, {width})")
            out = nca.step(T.Tensor(state), params, kernels,
                           mask=T.Tensor(bits[..., None]),
                           rotation=rot,
                           boundary=boundary, band=band, step_index=t)
            state = out.data
            done = t - first_step + 1
            if snapshot_every and on_snapshot and done % snapshot_every == 0:
                on_snapshot(t, state)
    return state


# ---------------------------------------------------------------------------
# damage / expansion


@dataclass
class DamageSpec:
    """Region overwrite: disc(cx, cy, r) or rect(x, y, w, h), fill noise|zero."""

    kind: str                 # "disc" | "rect"
    args: tuple
    fill: str = "noise"

    def __post_init__(self):
        if self.kind not in ("disc", "rect"):
            raise ValueError(f"unknown damage kind {self.kind!r}")
        if self.fill not in ("noise", "zero"):
            raise ValueError(f"unknown damage fill {self.fill!r}")
        n = 3 if self.kind == "disc" else 4
        if len(self.args) != n:
            raise ValueError(f"{self.kind} damage takes {n} arguments")

    def region(self, height, width) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width]
        if self.kind == "disc":
            cx, cy, r = self.args
            if r < 0:
                raise ValueError("disc radius must be >= 0")
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= r ** 2
        x, y, w, h = self.args
        return (xs >= x) & (xs < x + w) & (ys >= y) & (ys < y + h)


def damage(state, spec: DamageSpec, seed: int = 0, draw: int = 0) -> np.ndarray:
    """Overwrite the cells inside the spec region; everything else is
    bitwise untouched.  Empty intersection warns and returns a plain copy."""
    values = state.values.data if isinstance(state, nca.StateGrid) else np.asarray(state)
    out = values.copy()
    h, w = out.shape[:2]
    region = spec.region(h, w)
    if not region.any():
        warnings.warn("damage region does not intersect the grid; no-op",
                      stacklevel=2)
        return out
    if spec.fill == "zero":
        out[region] = 0.0
    else:
        fresh = rng.noise_state(seed, h, w, out.shape[-1], draw=draw)
        out[region] = fresh[region]
    return out


def expand(state, new_height: int, new_width: int, anchor: str = "center",
           seed: int = 0, draw: int = 0) -> np.ndarray:
    """Grow the grid; old cells are copied at the anchor, new cells are
    noise-seeded.  Same size returns a bitwise copy; shrinking is an error."""
    values = state.values.data if isinstance(state, nca.StateGrid) else np.asarray(state)
    h, w, c = values.shape
    if new_height < h or new_width < w:
        raise ValueError(
            f"expand cannot shrink: ({h}, {w}) -> ({new_height}, {new_width})")
    if (new_height, new_width) == (h, w):
        return values.copy()
    if anchor not in ("center", "topleft"):
        raise ValueError(f"unknown anchor {anchor!r}")
    out = rng.noise_state(seed, new_height, new_width, c, draw=draw)
    oy = (new_height - h) // 2 if anchor == "center" else 0
    ox = (new_width - w) // 2 if anchor == "center" else 0
    out[oy:oy + h, ox:ox + w] = values
    return out


# ---------------------------------------------------------------------------
# texture printing


def print_rows(params: nca.NcaParams, width: int, rows: int, band: int = 64, *,
               band_steps: int = 256, seed: int = 0, rate: float = 0.5,
               state_band: float = nca.STATE_BAND, on_band=None) -> np.ndarray:
    """Synthesize a `rows` x `width` texture strip with memory proportional
    to the band, not the strip.

    Band b grows on fresh noise below the already-frozen strip; the last
    frozen row rides along as a pinned boundary (update-masked out, read by
    the band's top row).  The y boundary is clamp, x stays a torus, y gate
    bits are keyed by global row so the strip is independent of how it is
    banded.  Each band runs a fixed `band_steps` budget, then freezes.
    """
    if band < 1:
        raise ValueError("band height must be >= 1")
    if rows < 1 or width < 1:
        raise ValueError("strip extents must be positive")
    out = np.empty((rows, width, nca.CHANNELS), dtype=np.float32)
    for b, start in enumerate(range(0, rows, band)):
        bh = min(band, rows - start)
        fresh = rng.noise_state(seed, bh, width, nca.CHANNELS, draw=b)
        if start == 0:
            work, halo, origin = fresh, 0, (0, 0)
        else:
            work = np.concatenate([out[start - 1:start], fresh], axis=0)
            halo, origin = 1, (start - 1, 0)
        freeze = np.zeros((halo + bh, width), dtype=bool)
        freeze[:halo] = True
        work = run(params, halo + bh, width, band_steps, seed=seed, rate=rate,
                   band=state_band, topology=("clamp", "torus"),
                   freeze=FreezeMask(freeze), initial=work,
                   origin=origin, grid_width=width)
        out[start:start + bh] = work[halo:]
        if on_band is not None:
            on_band(start, out[start:start + bh])
    return out


# ---------------------------------------------------------------------------
# tiled execution with halo exchange


@dataclass
class TilePlan:
    """Disjoint tile rectangles covering the grid, one rate multiplier per
    tile.  Halo width is fixed at one cell (the perception radius)."""

    height: int
    width: int
    tiles: list            # [(y, x, h, w), ...]
    rates: list = field(default_factory=list)

    def __post_init__(self):
        if not self.tiles:
            raise ValueError("plan needs at least one tile")
        if not self.rates:
            self.rates = [1.0] * len(self.tiles)
        if len(self.rates) != len(self.tiles):
            raise ValueError("need one rate per tile")
        if any(r <= 0 for r in self.rates):
            raise ValueError("rate multipliers must be positive")
        cover = np.zeros((self.height, self.width), dtype=np.int32)
        for (y, x, h, w) in self.tiles:
            if h < 1 or w < 1 or y < 0 or x < 0 or y + h > self.height \
                    or x + w > self.width:
                raise ValueError(f"tile ({y}, {x}, {h}, {w}) out of bounds")
            cover[y:y + h, x:x + w] += 1
        if cover.max() > 1:
            raise ValueError("tiles overlap")
        if cover.min() < 1:
            raise ValueError("tiles do not cover the grid")

    @classmethod
    def split(cls, height, width, ny, nx, rates=None) -> "TilePlan":
        """Regular ny x nx split (last row/column absorbs the remainder)."""
        hs = [height // ny] * ny
        hs[-1] += height - sum(hs)
        ws = [width // nx] * nx
        ws[-1] += width - sum(ws)
        tiles = []
        yy = 0
        for h in hs:
            xx = 0
            for w in ws:
                tiles.append((yy, xx, h, w))
                xx += w
            yy += h
        return cls(height, width, tiles, list(rates) if rates else [])


def substeps_at(rate: float, wall_step: int) -> int:
    """Floor schedule: a rate-r tile has taken floor(r*t) substeps by wall
    step t, so step t contributes floor(r*(t+1)) - floor(r*t) of them."""
    return int(np.floor(rate * (wall_step + 1))) - int(np.floor(rate * wall_step))


def run_tiled(params: nca.NcaParams, plan: TilePlan, steps: int, *,
              seed: int = 0, rate: float = 0.5, band: float = nca.STATE_BAND,
              initial=None, snapshot_every=None, on_snapshot=None) -> np.ndarray:
    """Advance every tile through `steps` wall steps with halo exchange.

    At wall step t a tile with rate r performs floor(r*(t+1)) - floor(r*t)
    substeps, so it has taken floor(r*t) total steps by wall step t.  Each
    substep consumes gate bits keyed by the tile's own substep counter and
    its global cell coordinates; a rate-1 tile therefore reproduces the
    monolithic stream exactly, and a plan of rate-1 tiles is bitwise equal
    to run() on the full grid.  Halos refresh only at wall-step boundaries
    (the rendezvous points); substeps within a wall step see a stale halo.
    Snapshot callbacks observe the assembled grid at those boundaries only.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    h, w = plan.height, plan.width
    if initial is None:
        state = rng.noise_state(seed, h, w, nca.CHANNELS)
    else:
        state = np.asarray(initial, dtype=np.float32).copy()
        if state.shape != (h, w, nca.CHANNELS):
            raise T.ShapeMismatch(
                f"initial state {state.shape} does not match plan "
                f"({h}, {w}, {nca.CHANNELS})")
    kernels = nca.square_kernels()
    counters = [0] * len(plan.tiles)

    with T.no_tape():
        for t in range(steps):
            nxt = state.copy()
            for i, (ty, tx, th, tw) in enumerate(plan.tiles):
                substeps = substeps_at(plan.rates[i], t)
                if substeps == 0:
                    continue
                # local tile + 1-cell halo gathered with torus wrap
                ys = (np.arange(ty - 1, ty + th + 1)) % h
                xs = (np.arange(tx - 1, tx + tw + 1)) % w
                local = state[np.ix_(ys, xs)].copy()
                for _ in range(substeps):
                    bits = rng.mask_bits(seed, counters[i], th, tw, rate,
                                         origin=(ty, tx), grid_width=w)
                    counters[i] += 1
                    gate = np.zeros((th + 2, tw + 2, 1), dtype=np.float32)
                    gate[1:-1, 1:-1, 0] = bits
                    out = nca.step(T.Tensor(local), params, kernels,
                                   mask=T.Tensor(gate), boundary="torus",
                                   band=band, step_index=counters[i] - 1)
                    local = out.data   # halo ring is gate-zeroed: bitwise stale
                nxt[ty:ty + th, tx:tx + tw] = local[1:-1, 1:-1]
            state = nxt
            if snapshot_every and on_snapshot and (t + 1) % snapshot_every == 0:
                on_snapshot(t, state)
    return state


# ---------------------------------------------------------------------------
# int8 inference


def _requant_constants(m: float) -> tuple[int, int]:
    """Express multiplier m as M0 * 2^-(31+shift) with M0 in [2^30, 2^31)."""
    if not np.isfinite(m) or m <= 0:
        raise ValueError(f"degenerate requantization multiplier {m}")
    shift = 0
    while m * 2.0 ** (31 + shift) < 2 ** 30:
        shift += 1
    while m * 2.0 ** (31 + shift) >= 2 ** 31:
        shift -= 1
    m0 = int(round(m * 2.0 ** (31 + shift)))
    if m0 == 2 ** 31:      # rounding landed on the open bound
        m0, shift = 2 ** 30, shift - 1
    return m0, shift


def _requant(acc: np.ndarray, m0: int, shift: int) -> np.ndarray:
    """Fixed-point multiply with round-half-up: (acc*M0 + 2^(30+shift)) >>
    (31+shift), in int64 so the product never overflows."""
    prod = acc.astype(np.int64) * np.int64(m0)
    return ((prod + (np.int64(1) << (30 + shift))) >> (31 + shift)).astype(np.int32)


def _quantize_symmetric(w: np.ndarray) -> tuple[np.ndarray, float]:
    m = float(np.abs(w).max())
    scale = m / 127.0 if m > 0 else 1.0
    q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return q, scale


@dataclass
class QuantizedModel:
    """Integer CA: int8 weights/state, int32 accumulators and biases.

    State channels live on the symmetric grid q * state_scale with
    q in [-127, 127]; the hidden layer is asymmetric uint8 in [0, hidden_max].
    The two requantizations are fixed-point multiplies whose constants are
    part of the model, so any implementation of this arithmetic (including
    non-Python ones) reproduces states bit-for-bit.
    """

    w0: np.ndarray          # (48, 96) int8
    b0: np.ndarray          # (96,) int32
    w1: np.ndarray          # (96, 12) int8
    b1: np.ndarray          # (12,) int32
    state_scale: float
    w0_scale: float
    w1_scale: float
    hidden_max: float
    requant1: tuple         # (M0, shift): acc0 -> uint8 hidden
    requant2: tuple         # (M0, shift): acc1 -> state-grid delta
    band: float = nca.STATE_BAND
    geometry: str = "square"

    @property
    def hidden_scale(self) -> float:
        return self.hidden_max / 255.0

    def quantize_state(self, values: np.ndarray) -> np.ndarray:
        q = np.rint(np.clip(values, -self.band, self.band) / self.state_scale)
        return np.clip(q, -127, 127).astype(np.int8)

    def dequantize_state(self, q: np.ndarray) -> np.ndarray:
        return q.astype(np.float32) * np.float32(self.state_scale)

    def step_q(self, sq: np.ndarray, gate: np.ndarray) -> np.ndarray:
        """One fully-integer update; sq int8 (H, W, 12), gate 0/1 (H, W).

        The two accumulations run as f64 GEMMs purely for speed: every
        product is below 2^19 and every 48/96-term sum below 2^25, so the
        doubles hold the exact int32 values bit for bit (see the int32
        reference route in the tests).  State storage stays int8 and no
        scale touches the loop.
        """
        s = sq.astype(np.int32)
        p = _int_perception(s)
        h, w = sq.shape[:2]
        acc0 = p.reshape(-1, nca.PERCEPTION).astype(np.float64) \
            @ self.w0.astype(np.float64)
        acc0 = acc0.astype(np.int64) + self.b0
        np.maximum(acc0, 0, out=acc0)
        hidden = np.clip(_requant(acc0, *self.requant1), 0, 255)
        acc1 = hidden.astype(np.float64) @ self.w1.astype(np.float64)
        acc1 = acc1.astype(np.int64) + self.b1
        delta = _requant(acc1, *self.requant2).reshape(h, w, nca.CHANNELS)
        delta *= gate.astype(np.int32)[..., None]
        out = np.clip(s + delta, -127, 127)
        return out.astype(np.int8)


def _int_perception(s: np.ndarray) -> np.ndarray:
    """(H, W, 12) int32 -> (H, W, 48) int32: [s | Kx*s | Ky*s | Klap*s] with
    the integer kernel taps, torus boundary, block channel order."""
    pad = np.pad(s, ((1, 1), (1, 1), (0, 0)), mode="wrap")
    h, w, c = s.shape
    taps = {}
    for dy in range(3):
        for dx in range(3):
            taps[(dy, dx)] = pad[dy:dy + h, dx:dx + w]
    out = np.empty((h, w, 4 * c), dtype=np.int32)
    out[..., :c] = s
    for block, kern in ((1, nca.KX), (2, nca.KY), (3, nca.KLAP)):
        acc = np.zeros((h, w, c), dtype=np.int32)
        for dy in range(3):
            for dx in range(3):
                k = int(kern[dy, dx])
                if k:
                    acc += k * taps[(dy, dx)]
        out[..., block * c:(block + 1) * c] = acc
    return out


def calibrate_hidden_max(params: nca.NcaParams, *, size: int = 32,
                         steps: int = 48, seed: int = 0,
                         band: float = nca.STATE_BAND) -> float:
    """Observed peak of the post-relu hidden layer over a short noise run."""
    peak = 0.0

    def watch(hid):
        nonlocal peak
        peak = max(peak, float(hid.data.max(initial=0.0)))
        return hid

    state = rng.noise_state(seed, size, size, nca.CHANNELS)
    kernels = nca.square_kernels()
    with T.no_tape():
        for t in range(steps):
            bits = rng.mask_bits(seed, t, size, size)
            state = nca.step(T.Tensor(state), params, kernels,
                             mask=T.Tensor(bits[..., None]), band=band,
                             step_index=t, hidden_hook=watch).data
    return peak


def quantize_model(params: nca.NcaParams, *, hidden_max: float | None = None,
                   band: float = nca.STATE_BAND, calib_size: int = 32,
                   calib_steps: int = 48, calib_seed: int = 0,
                   geometry: str = "square") -> QuantizedModel:
    """Post-training int8 conversion.

    `hidden_max` normally comes from QAT provenance; when absent, a short
    calibration run measures the peak hidden activation.  Weight scales are
    symmetric per-tensor max-abs; biases fold into the int32 accumulators
    of their stage.
    """
    if geometry != "square":
        raise GeometryError("int8 inference supports square geometry only")
    if hidden_max is None:
        hidden_max = calibrate_hidden_max(params, size=calib_size,
                                          steps=calib_steps, seed=calib_seed,
                                          band=band)
    hidden_max = max(float(hidden_max), 1e-3)
    w0q, sw0 = _quantize_symmetric(params.W0.data)
    w1q, sw1 = _quantize_symmetric(params.W1.data)
    ss = band / 127.0
    sh = hidden_max / 255.0
    b0q = np.rint(params.b0.data / (ss * sw0)).astype(np.int64)
    b1q = np.rint(params.b1.data / (sh * sw1)).astype(np.int64)
    if np.abs(b0q).max(initial=0) >= 2 ** 31 or np.abs(b1q).max(initial=0) >= 2 ** 31:
        raise ValueError("bias does not fit the int32 accumulator")
    return QuantizedModel(
        w0=w0q, b0=b0q.astype(np.int32), w1=w1q, b1=b1q.astype(np.int32),
        state_scale=ss, w0_scale=sw0, w1_scale=sw1, hidden_max=hidden_max,
        requant1=_requant_constants(ss * sw0 / sh),
        requant2=_requant_constants(sh * sw1 / ss),
        band=band, geometry=geometry)


def run_quantized(qm: QuantizedModel, height: int, width: int, steps: int, *,
                  seed: int = 0, rate: float = 0.5, initial=None,
                  snapshot_every=None, on_snapshot=None,
                  origin=(0, 0), grid_width=None) -> np.ndarray:
    """Integer-only run; returns the final int8 state grid.

    The state stays int8 end to end; float scales are applied only in
    readout helpers (dequantize_state / rgb_from_state).  `initial` may be
    an f32 state (quantized once at entry) or an int8 grid.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if initial is None:
        sq = qm.quantize_state(rng.noise_state(seed, height, width, nca.CHANNELS))
    elif np.asarray(initial).dtype == np.int8:
        sq = np.asarray(initial).copy()
    else:
        sq = qm.quantize_state(np.asarray(initial, dtype=np.float32))
    if sq.shape != (height, width, nca.CHANNELS):
        raise T.ShapeMismatch(
            f"initial state {sq.shape} does not match "
            f"({height}, {width}, {nca.CHANNELS})")
    for t in range(steps):
        bits = rng.mask_bits(seed, t, height, width, rate,
                             origin=origin, grid_width=grid_width)
        sq = qm.step_q(sq, bits)
        if snapshot_every and on_snapshot and (t + 1) % snapshot_every == 0:
            on_snapshot(t, sq)
    return sq


# ---------------------------------------------------------------------------
# model file glue


def quantization_header(qm: QuantizedModel) -> dict:
    """Header block carrying every constant an external int8 implementation
    needs to reproduce states bitwise."""
    return {
        "scheme": "int8-v1",
        "state_scale": qm.state_scale,
        "w0_scale": qm.w0_scale,
        "w1_scale": qm.w1_scale,
        "hidden_max": qm.hidden_max,
        "hidden_zero_point": -128,
        "requant": [
            {"m0": qm.requant1[0], "shift": qm.requant1[1]},
            {"m0": qm.requant2[0], "shift": qm.requant2[1]},
        ],
        "band": qm.band,
    }


def save_quantized(path, params: nca.NcaParams, qm: QuantizedModel,
                   provenance=None) -> None:
    model_io.save_model(
        path, params, geometry=qm.geometry, state_band=qm.band,
        quantization=quantization_header(qm),
        quant_blobs=(qm.w0, qm.b0, qm.w1, qm.b1),
        provenance=provenance)


def load_quantized(path) -> QuantizedModel:
    header, blobs = model_io.load_model(path)
    q = header.get("quantization")
    if q is None:
        raise ValueError("model file is not quantized")
    if q.get("scheme") != "int8-v1":
        raise ValueError(f"unknown quantization scheme {q.get('scheme')!r}")
    return QuantizedModel(
        w0=blobs["W0"], b0=blobs["b0"], w1=blobs["W1"], b1=blobs["b1"],
        state_scale=q["state_scale"], w0_scale=q["w0_scale"],
        w1_scale=q["w1_scale"], hidden_max=q["hidden_max"],
        requant1=(q["requant"][0]["m0"], q["requant"][0]["shift"]),
        requant2=(q["requant"][1]["m0"], q["requant"][1]["shift"]),
        band=q.get("band", header.get("state_band", nca.STATE_BAND)),
        geometry=header.get("geometry", "square"))


# ---------------------------------------------------------------------------
# snapshot export


def rgb_from_state(state: np.ndarray, state_scale: float | None = None) -> np.ndarray:
    """First three channels clamped to [0, 1]; int8 states pass their scale."""
    if state.dtype == np.int8:
        if state_scale is None:
            raise ValueError("int8 state needs a state_scale for readout")
        rgb = state[..., :3].astype(np.float32) * np.float32(state_scale)
    else:
        rgb = state[..., :3]
    return np.clip(rgb, 0.0, 1.0)


def write_png(path, state: np.ndarray, state_scale: float | None = None) -> None:
    from PIL import Image
    rgb = rgb_from_state(state, state_scale)
    Image.fromarray(np.rint(rgb * 255.0).astype(np.uint8), mode="RGB").save(path)
