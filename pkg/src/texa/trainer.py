"""Pool-based NCA training loop.

The texture objective follows the classic recipe: keep a pool of evolving
states, each step sample a few, refresh one with noise so the model never
forgets how to grow from scratch, roll the CA forward a random number of
steps, and score only the final RGB slice against the target statistics.
Gradients are conditioned by per-tensor L2 normalization, which makes the
update direction invariant to the overall loss scale.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model_io, nca, observer as obs, rng
from . import tensor as T

# Stream tag for deriving per-(train step, sample) gate seeds.  Any fixed
# word distinct from the mask/noise tags keeps the streams uncorrelated.
_STEP_SEED_TAG = 0x7472616E


class TrainingDiverged(RuntimeError):
    """Raised by fit() when more than half of all steps diverged."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Hyperparameters for fit()/train_step(); defaults match the reference
    recipe (128 grids, batch 4, pool 1024, 8000 steps, Adam 2e-3 with a x0.1
    drop after step 2000, rollouts of 32..64 steps)."""

    size: int = 128
    batch: int = 4
    steps: int = 8000
    rollout_lo: int = 32
    rollout_hi: int = 64
    lr: float = 2e-3
    lr_decay_factor: float = 0.1
    lr_decay_step: int = 2000
    pool_capacity: int = 1024
    seed: int = 0
    update_rate: float = 0.5
    band: float = nca.STATE_BAND
    loss: str = "texture"           # "texture" | "feature"
    feature_tap: str | None = None
    feature_channel: int = 0
    qat: bool = False

    def __post_init__(self):
        if not (1 <= self.rollout_lo <= self.rollout_hi):
            raise ValueError("rollout bounds need 1 <= lo <= hi, got "
                             f"{self.rollout_lo}..{self.rollout_hi}")
        if self.batch < 1 or self.pool_capacity < self.batch:
            raise ValueError("pool must hold at least one batch")
        if self.size < 3:
            raise ValueError("grid size must be at least 3")
        if self.loss not in ("texture", "feature"):
            raise ValueError(f"unknown loss head {self.loss!r}")
        if self.loss == "feature" and not self.feature_tap:
            raise ValueError("feature loss needs feature_tap")

    def lr_at(self, step: int) -> float:
        if step >= self.lr_decay_step:
            return self.lr * self.lr_decay_factor
        return self.lr


def rollout_length(gen: np.random.Generator, lo: int, hi: int) -> int:
    """Uniform draw from {lo, ..., hi} inclusive."""
    if not (1 <= lo <= hi):
        raise ValueError(f"need 1 <= lo <= hi, got {lo}..{hi}")
    return int(gen.integers(lo, hi + 1))


# ---------------------------------------------------------------------------
# state pool


class StatePool:
    """Fixed-capacity bag of evolving grid states.

    The pool always holds exactly `capacity` states of identical shape;
    sampling hands out copies and write_back() returns evolved states to
    their slots.  Fresh noise comes from the counter RNG so reseeding is
    reproducible: slot i starts from draw i, later reseeds use draws
    capacity, capacity+1, ... in order.
    """

    def __init__(self, capacity: int, height: int, width: int, seed: int = 0,
                 channels: int = nca.CHANNELS):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.seed = seed
        self.states = np.stack([
            rng.noise_state(seed, height, width, channels, draw=i)
            for i in range(capacity)])
        self._draws = capacity

    @property
    def capacity(self) -> int:
        return self.states.shape[0]

    def sample_indices(self, gen: np.random.Generator, batch: int) -> np.ndarray:
        if batch > self.capacity:
            raise ValueError("batch larger than pool")
        return gen.choice(self.capacity, size=batch, replace=False)

    def read(self, indices) -> np.ndarray:
        return self.states[np.asarray(indices)].copy()

    def write(self, indices, values) -> None:
        values = np.asarray(values, dtype=np.float32)
        if values.shape[1:] != self.states.shape[1:]:
            raise T.ShapeMismatch(
                f"pool entries are {self.states.shape[1:]}, got {values.shape[1:]}")
        self.states[np.asarray(indices)] = values

    def reseed(self, index: int) -> None:
        """Overwrite one slot with a fresh, never-before-seen noise draw."""
        _, h, w, c = self.states.shape
        self.states[index] = rng.noise_state(self.seed, h, w, c, draw=self._draws)
        self._draws += 1


# ---------------------------------------------------------------------------
# quantization-aware rounding


def fake_quantize(t, lo: float, hi: float, bits: int = 8, symmetric: bool = False):
    """Round values onto the `bits`-wide affine grid spanning [lo, hi].

    Forward snaps to the nearest representable level (zero is always a
    level); backward is straight-through for inputs inside [lo, hi] and
    zero outside, so out-of-range values stop contributing gradient.
    """
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise ValueError(f"invalid quantization range [{lo}, {hi}]")
    if symmetric:
        qmax = float(2 ** (bits - 1) - 1)
        scale = max(abs(lo), abs(hi)) / qmax
        qmin, zero = -qmax, 0.0
    else:
        qmin, qmax = float(-(2 ** (bits - 1))), float(2 ** (bits - 1) - 1)
        scale = (hi - lo) / (qmax - qmin)
        zero = float(np.clip(np.rint(qmin - lo / scale), qmin, qmax))
    t = T.as_tensor(t)
    x = t.data
    q = np.clip(np.rint(x / scale + zero), qmin, qmax)
    out = T.Tensor(((q - zero) * scale).astype(np.float32))
    gate = ((x >= lo) & (x <= hi)).astype(np.float32)
    return T._record((t,), out, lambda g: (g * gate,))


@dataclass
class QatState:
    """Running observation of the hidden-layer range during QAT."""

    hidden_max: float = 1.0

    def observe(self, h: np.ndarray) -> None:
        peak = float(h.max(initial=0.0))
        if np.isfinite(peak):
            self.hidden_max = max(self.hidden_max, peak)


def _qat_params(params: nca.NcaParams) -> nca.NcaParams:
    """Per-tensor symmetric weight snap; biases stay in f32 (the integer
    path carries them at 32 bits, so rounding them here would only hurt)."""
    def snap(w):
        m = float(np.abs(w.data).max())
        if m == 0.0:
            return w
        return fake_quantize(w, -m, m, symmetric=True)
    return nca.NcaParams(snap(params.W0), params.b0, snap(params.W1), params.b1)


def _qat_hooks(qat: QatState, band: float):
    # freeze the hidden range for the whole step: checkpointed steps replay
    # their forward during backward, and a range that moved in between would
    # break the bitwise-recompute invariant
    hmax = qat.hidden_max

    def hidden_hook(h):
        qat.observe(h.data)
        return fake_quantize(h, 0.0, hmax)

    def state_hook(s):
        return fake_quantize(s, -band, band, symmetric=True)
    return hidden_hook, state_hook


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment estimates with bias correction, one pair per
    parameter tensor, in parameter order W0, b0, W1, b1."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: nca.NcaParams) -> "AdamState":
        return cls(m=[np.zeros_like(t.data) for t in params.tensors],
                   v=[np.zeros_like(t.data) for t in params.tensors])


def adam_update(params: nca.NcaParams, grads, adam: AdamState, lr: float) -> None:
    """One in-place Adam step over the parameter tensors.

    Zero gradients leave the corresponding tensor untouched apart from
    moment decay.  Non-finite gradients are a caller bug at this layer and
    raise instead of silently corrupting the moments.
    """
    grads = list(grads)
    if len(grads) != len(params.tensors):
        raise T.ShapeMismatch(
            f"expected {len(params.tensors)} gradients, got {len(grads)}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_update")
    adam.step += 1
    t = adam.step
    bc1 = 1.0 - adam.beta1 ** t
    bc2 = 1.0 - adam.beta2 ** t
    for p, g, m, v in zip(params.tensors, grads, adam.m, adam.v):
        g = np.asarray(g, dtype=np.float32)
        m *= adam.beta1
        m += (1.0 - adam.beta1) * g
        v *= adam.beta2
        v += (1.0 - adam.beta2) * np.square(g)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + adam.eps)).astype(np.float32)


def normalize_gradient(g: np.ndarray) -> np.ndarray:
    """Scale a tensor to unit L2 norm (zero tensors pass through).

    Normalizing per tensor makes the conditioned gradient, and hence the
    whole optimizer trajectory, invariant to positive rescaling of the loss.
    """
    norm = float(np.linalg.norm(g.astype(np.float64)))
    if norm == 0.0:
        return g
    return (g / np.float32(norm)).astype(np.float32)


# ---------------------------------------------------------------------------
# one optimization step


def _loss_fn(config: TrainConfig, target):
    if config.loss == "feature":
        spec = target if isinstance(target, obs.FeatureTargetSpec) else \
            obs.FeatureTargetSpec(config.feature_tap, config.feature_channel)

        def fn(graph, rgb):
            return obs.feature_loss(graph, spec, rgb)
        return fn

    def fn(graph, rgb):
        return obs.texture_loss(graph, target, rgb)
    return fn


def step_seeds(run_seed: int, step: int, batch: int) -> list[int]:
    """Per-sample gate-stream seeds for one train step, derived through the
    counter hash so no two (step, sample) pairs share a stream."""
    return [int(rng.hash_words(_STEP_SEED_TAG, run_seed, step, b))
            for b in range(batch)]


def train_step(pool: StatePool, params: nca.NcaParams, adam: AdamState,
               config: TrainConfig, graph: obs.ObserverGraph, target,
               step: int, gen: np.random.Generator,
               qat: QatState | None = None) -> dict:
    """Sample, roll out, score, and update; returns a metrics record.

    Draw order is fixed (batch indices, then rollout length), so a given
    (seed, step) always sees the same pool slots and gate bits.  The first
    sampled slot is refreshed with noise before the rollout.  On divergence
    (non-finite residual or loss) every sampled slot is reseeded and the
    update is skipped, leaving params and Adam moments untouched.
    """
    indices = pool.sample_indices(gen, config.batch)
    steps_n = rollout_length(gen, config.rollout_lo, config.rollout_hi)
    pool.reseed(int(indices[0]))
    states = pool.read(indices)
    seeds = step_seeds(config.seed, step, config.batch)
    lr = config.lr_at(step)
    loss_fn = _loss_fn(config, target)

    hidden_hook = state_hook = None
    record = {"step": step, "lr": lr, "rollout_steps": steps_n, "diverged": False}
    try:
        with T.Tape() as tape:
            params.watch(tape)
            eff = params
            if config.qat:
                if qat is None:
                    raise ValueError("qat=True needs a QatState")
                eff = _qat_params(params)
                hidden_hook, state_hook = _qat_hooks(qat, config.band)
            final, _ = nca.rollout(
                T.Tensor(states), eff, steps=steps_n, seed=seeds,
                rate=config.update_rate, band=config.band,
                hidden_hook=hidden_hook, state_hook=state_hook)
            loss = loss_fn(graph, T.slice_channels(final, 0, 3))
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise T.DivergenceError("non-finite loss", step=step)
        T.backward(tape, loss)
        grads = [t.grad for t in params.tensors]
        if any(not np.all(np.isfinite(g)) for g in grads):
            raise T.DivergenceError("non-finite gradient", step=step)
    except T.DivergenceError as err:
        for i in indices:
            pool.reseed(int(i))
        record.update(diverged=True, loss=None, detail=str(err))
        return record

    adam_update(params, [normalize_gradient(g) for g in grads], adam, lr)
    pool.write(indices, final.data)
    record["loss"] = loss_value
    return record


# ---------------------------------------------------------------------------
# template handling


def load_template(template, size: int) -> np.ndarray:
    """Fetch an RGB template as float32 in [0, 1], bilinearly resized to
    (size, size).  Accepts a path or an (H, W, 3) array (uint8 or float)."""
    if isinstance(template, (str, Path)):
        from PIL import Image
        with Image.open(template) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    else:
        arr = np.asarray(template, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise T.ShapeMismatch(f"template must be (H, W, 3), got {arr.shape}")
        if arr.max(initial=0.0) > 1.0 + 1e-6:
            arr = arr / 255.0
    return _resize_bilinear(arr, size, size)


def _resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if img.shape[:2] == (height, width):
        return np.ascontiguousarray(img, dtype=np.float32)
    from PIL import Image
    chans = [np.asarray(
        Image.fromarray(img[..., c], mode="F").resize(
            (width, height), Image.BILINEAR), dtype=np.float32)
        for c in range(img.shape[-1])]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# full run


def fit(template, config: TrainConfig, graph: obs.ObserverGraph,
        out_path=None, metrics_path=None, log_every: int = 10,
        progress=None) -> tuple[nca.NcaParams, list[dict]]:
    """Train a model against a template; returns (params, metrics records).

    Writes the model (with provenance: config echo, seed, template/observer
    hashes) to `out_path` and one JSON object per step to `metrics_path`
    when given.  config.steps == 0 emits the freshly initialized model and
    an empty log.  Identical seeds and inputs give byte-identical models;
    wall-clock timings live only in the metrics log, never the model file.
    """
    tmpl = load_template(template, config.size)
    if config.loss == "texture":
        target = obs.make_texture_target(graph, tmpl)
    else:
        target = obs.FeatureTargetSpec(config.feature_tap, config.feature_channel)

    params = nca.init_params(config.seed)
    adam = AdamState.for_params(params)
    pool = StatePool(config.pool_capacity, config.size, config.size,
                     seed=config.seed)
    gen = np.random.default_rng(config.seed)
    qat = QatState() if config.qat else None

    records: list[dict] = []
    diverged = 0
    t0 = time.monotonic()
    for step in range(config.steps):
        rec = train_step(pool, params, adam, config, graph, target,
                         step, gen, qat=qat)
        rec["wall_ms"] = round((time.monotonic() - t0) * 1e3, 3)
        records.append(rec)
        diverged += rec["diverged"]
        if progress is not None and (step % log_every == 0
                                     or step == config.steps - 1):
            progress(rec)

    if config.steps > 0 and diverged * 2 > config.steps:
        raise TrainingDiverged(
            f"{diverged}/{config.steps} steps diverged; aborting")

    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    if out_path is not None:
        provenance = {
            "config": {
                "size": config.size, "batch": config.batch,
                "steps": config.steps,
                "rollout": [config.rollout_lo, config.rollout_hi],
                "lr": config.lr, "lr_decay_factor": config.lr_decay_factor,
                "lr_decay_step": config.lr_decay_step,
                "pool_capacity": config.pool_capacity,
                "update_rate": config.update_rate,
                "loss": config.loss, "qat": config.qat,
            },
            "seed": config.seed,
            "template_sha256": _sha256(tmpl.tobytes()),
            "observer_sha256": _sha256(obs.observer_bytes(graph)),
            "steps_diverged": diverged,
        }
        if config.loss == "feature":
            provenance["config"]["feature_tap"] = config.feature_tap
            provenance["config"]["feature_channel"] = config.feature_channel
        if qat is not None:
            provenance["qat_ranges"] = {
                "hidden_max": qat.hidden_max,
                "state_band": config.band,
            }
        model_io.save_model(out_path, params, state_band=config.band,
                            provenance=provenance)
    return params, records
