"""Fixed-weight feature extractor DAG and the two loss heads.

An ObserverGraph is an ordered list of layers (input, normalize, conv,
relu, maxpool2, avgpool2, concat) wired as a DAG; named taps mark the
feature maps the losses consume.  Graphs are immutable once built and are
interchangeable through the OBSV v1 container, so the engine never bakes
in a particular network: VGG-16 exports and tiny hand-built graphs run
through the same interpreter.

Loss heads: texture_loss matches per-tap Gram matrices against a target
(Gram normalized by H*W, the convention recorded in the manifest);
feature_loss drives one tapped channel's mean activation up.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

OBSERVER_MAGIC = b"OBSERVR1"

_OPS = ("input", "normalize", "conv", "relu", "maxpool2", "avgpool2", "concat")


class ObserverGraph:
    """DAG of fixed layers.  Nodes are appended in topological order (every
    input must already exist), which rules out cycles by construction."""

    def __init__(self):
        self.nodes = [{"name": "input", "op": "input", "inputs": []}]
        self._by_name = {"input": self.nodes[0]}
        self.weights: dict[str, np.ndarray] = {}
        self.taps: list[str] = []
        self.min_input = 1

    # -- construction ------------------------------------------------------

    def _add(self, name, op, inputs, **params):
        if name in self._by_name:
            raise ValueError(f"duplicate node name {name!r}")
        for src in inputs:
            if src not in self._by_name:
                raise ValueError(f"node {name!r} wired to unknown input {src!r}")
        node = {"name": name, "op": op, "inputs": list(inputs), **params}
        self.nodes.append(node)
        self._by_name[name] = node
        return self

    def add_normalize(self, name, src, mean, std):
        mean = np.asarray(mean, dtype=np.float32).reshape(-1)
        std = np.asarray(std, dtype=np.float32).reshape(-1)
        if np.any(std == 0):
            raise ValueError("normalize std must be nonzero")
        return self._add(name, "normalize", [src],
                         mean=mean.tolist(), std=std.tolist())

    def add_conv(self, name, src, weight, bias, stride=1):
        weight = np.ascontiguousarray(weight, dtype=np.float32)
        bias = np.ascontiguousarray(bias, dtype=np.float32)
        if weight.ndim != 4:
            raise T.ShapeMismatch(
                f"conv weight must be (kh, kw, cin, cout), got {weight.shape}")
        kh, kw, cin, cout = weight.shape
        if bias.shape != (cout,):
            raise T.ShapeMismatch(f"conv bias must be ({cout},), got {bias.shape}")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValueError(f"non-finite weights in conv {name!r}")
        self.weights[name + ".w"] = weight
        self.weights[name + ".b"] = bias
        return self._add(name, "conv", [src], kh=kh, kw=kw, cin=cin, cout=cout,
                         stride=int(stride), pad="same")

    def add_relu(self, name, src):
        return self._add(name, "relu", [src])

    def add_maxpool(self, name, src):
        return self._add(name, "maxpool2", [src])

    def add_avgpool(self, name, src):
        return self._add(name, "avgpool2", [src])

    def add_concat(self, name, srcs):
        return self._add(name, "concat", srcs)

    def set_taps(self, taps, min_input=None):
        for tap in taps:
            if tap not in self._by_name:
                raise ValueError(f"tap {tap!r} names no node")
        self.taps = list(taps)
        if min_input is not None:
            self.min_input = int(min_input)
        return self

    # -- queries -----------------------------------------------------------

    def node(self, name):
        return self._by_name[name]

    def channels_of(self, name):
        """Output channel count of a node (input assumed 3)."""
        node = self._by_name[name]
        op = node["op"]
        if op == "input":
            return 3
        if op == "conv":
            return node["cout"]
        if op == "concat":
            return sum(self.channels_of(s) for s in node["inputs"])
        return self.channels_of(node["inputs"][0])

    def needed_for(self, names):
        """Node evaluation set for the given outputs, in graph order."""
        need = set()
        stack = list(names)
        while stack:
            cur = stack.pop()
            if cur in need:
                continue
            need.add(cur)
            stack.extend(self._by_name[cur]["inputs"])
        return [n["name"] for n in self.nodes if n["name"] in need]


def forward(graph: ObserverGraph, image, taps=None):
    """Evaluate the graph on (..., H, W, 3); returns {tap: feature Tensor}."""
    taps = list(taps) if taps is not None else list(graph.taps)
    image = T.as_tensor(image)
    if image.ndim < 3 or image.shape[-1] != 3:
        raise T.ShapeMismatch(f"observer input must be (..., H, W, 3), got {image.shape}")
    h, w = image.shape[-3], image.shape[-2]
    if h < graph.min_input or w < graph.min_input:
        raise T.ShapeMismatch(
            f"input {h}x{w} below observer minimum {graph.min_input}")

    values = {"input": image}
    for name in graph.needed_for(taps):
        node = graph.node(name)
        op = node["op"]
        if op == "input":
            continue
        srcs = [values[s] for s in node["inputs"]]
        if op == "normalize":
            mean = np.asarray(node["mean"], dtype=np.float32)
            std = np.asarray(node["std"], dtype=np.float32)
            out = T.mul(T.sub(srcs[0], T.Tensor(mean)),
                        T.Tensor((1.0 / std).astype(np.float32)))
        elif op == "conv":
            wt = graph.weights[name + ".w"]
            kh, kw, cin, cout = wt.shape
            if srcs[0].shape[-1] != cin:
                raise T.ShapeMismatch(
                    f"conv {name!r} expects {cin} channels, got {srcs[0].shape[-1]}")
            patches = T.extract_patches(srcs[0], kh, kw, boundary="zero")
            wmat = T.Tensor(wt.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout))
            out = T.matmul_pointwise(patches, wmat, T.Tensor(graph.weights[name + ".b"]))
            if node.get("stride", 1) != 1:
                out = T.subsample(out, node["stride"], node["stride"])
        elif op == "relu":
            out = T.relu(srcs[0])
        elif op == "maxpool2":
            out = T.maxpool2(srcs[0])
        elif op == "avgpool2":
            out = T.avgpool2(srcs[0])
        elif op == "concat":
            out = T.concat_channels(srcs)
        else:
            raise ValueError(f"unknown op {op!r}")
        values[name] = out
    return {tap: values[tap] for tap in taps}


@dataclass
class TextureTarget:
    """Per-tap target Gram matrices plus loss weights."""

    grams: dict[str, np.ndarray]
    weights: dict[str, float] = field(default_factory=dict)

    def weight(self, tap):
        return float(self.weights.get(tap, 1.0))


@dataclass
class FeatureTargetSpec:
    """One observer channel to drive up."""

    tap: str
    channel: int


def make_texture_target(graph: ObserverGraph, template, weights=None) -> TextureTarget:
    """Precompute target Grams from a template image (H, W, 3)."""
    with T.no_tape():
        feats = forward(graph, T.as_tensor(template))
        grams = {tap: T.gram(f).data.copy() for tap, f in feats.items()}
    return TextureTarget(grams, dict(weights or {}))


def texture_loss(graph: ObserverGraph, target: TextureTarget, image):
    """Sum over taps of weight * mean((G(image) - G_target)^2)."""
    missing = [tap for tap in target.grams if tap not in graph.taps]
    if missing:
        raise ValueError(f"target taps {missing} not in graph taps {graph.taps}")
    feats = forward(graph, image, taps=list(target.grams))
    total = None
    for tap, gt in target.grams.items():
        diff = T.sub(T.gram(feats[tap]), T.Tensor(gt))
        term = T.scale(T.tmean(T.mul(diff, diff)), target.weight(tap))
        total = term if total is None else T.add(total, term)
    return total


def feature_loss(graph: ObserverGraph, spec: FeatureTargetSpec, image):
    """Negative spatial mean of one tapped channel (lower = more active)."""
    count = graph.channels_of(spec.tap)
    if not (0 <= spec.channel < count):
        raise ValueError(
            f"channel {spec.channel} out of range for tap {spec.tap!r} ({count})")
    feat = forward(graph, image, taps=[spec.tap])[spec.tap]
    channel = T.slice_channels(feat, spec.channel, spec.channel + 1)
    return T.scale(T.tmean(channel), -1.0)


# -- OBSV v1 container -----------------------------------------------------


def observer_bytes(graph: ObserverGraph) -> bytes:
    """Serialize to OBSV v1: magic, u32 manifest length, JSON manifest
    (padded to a 16-byte boundary), then weight tensors as 16-byte-aligned
    LE f32."""
    blob = bytearray()
    layers = []
    for node in graph.nodes:
        entry = {k: v for k, v in node.items()}
        if node["op"] == "conv":
            refs = {}
            for suffix in ("w", "b"):
                arr = np.ascontiguousarray(graph.weights[f"{node['name']}.{suffix}"],
                                           dtype="<f4")
                pad = (-len(blob)) % 16
                blob.extend(b"\0" * pad)
                refs[suffix] = {"offset": len(blob), "shape": list(arr.shape),
                                "dtype": "f32"}
                blob.extend(arr.tobytes())
            entry["weights"] = refs
        layers.append(entry)
    manifest = {
        "format": "OBSV",
        "version": 1,
        "layout": "HWCK",
        "gram_normalization": "H*W",
        "min_input": graph.min_input,
        "taps": graph.taps,
        "layers": layers,
    }
    raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pad = (-(len(raw) + 12)) % 16
    raw += b" " * pad
    return OBSERVER_MAGIC + struct.pack("<I", len(raw)) + raw + bytes(blob)


def save_observer(path, graph: ObserverGraph) -> bytes:
    data = observer_bytes(graph)
    with open(path, "wb") as f:
        f.write(data)
    return data


def load_observer(path) -> ObserverGraph:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != OBSERVER_MAGIC:
        raise ValueError(f"bad magic: expected {OBSERVER_MAGIC!r}, got {buf[:8]!r}")
    (mlen,) = struct.unpack_from("<I", buf, 8)
    manifest = json.loads(buf[12:12 + mlen].decode("utf-8"))
    if manifest.get("format") != "OBSV" or manifest.get("version") != 1:
        raise ValueError("not an OBSV v1 file")
    if manifest.get("layout") != "HWCK":
        raise ValueError(f"unsupported weight layout {manifest.get('layout')!r}")
    blob = buf[12 + mlen:]

    graph = ObserverGraph()
    for layer in manifest["layers"]:
        op, name, inputs = layer["op"], layer["name"], layer.get("inputs", [])
        if op == "input":
            continue
        if op == "normalize":
            graph.add_normalize(name, inputs[0], layer["mean"], layer["std"])
        elif op == "conv":
            tensors = {}
            for suffix in ("w", "b"):
                ref = layer["weights"][suffix]
                n = int(np.prod(ref["shape"]))
                off = ref["offset"]
                if off % 16 or off + 4 * n > len(blob):
                    raise ValueError(f"bad blob offset for {name}.{suffix}")
                tensors[suffix] = np.frombuffer(
                    blob, dtype="<f4", count=n, offset=off).reshape(ref["shape"]).copy()
            graph.add_conv(name, inputs[0], tensors["w"], tensors["b"],
                           stride=layer.get("stride", 1))
        elif op == "relu":
            graph.add_relu(name, inputs[0])
        elif op == "maxpool2":
            graph.add_maxpool(name, inputs[0])
        elif op == "avgpool2":
            graph.add_avgpool(name, inputs[0])
        elif op == "concat":
            graph.add_concat(name, inputs)
        else:
            raise ValueError(f"unknown op {op!r} in manifest")
    graph.set_taps(manifest.get("taps", []), manifest.get("min_input", 1))
    return graph


# -- a small self-contained observer ---------------------------------------


def make_desk_observer(seed=0) -> ObserverGraph:
    """Compact two-stage observer for desk-scale experiments.

    Stage one applies fixed color and oriented-edge filters, each in BOTH
    polarities (+f and -f per RGB channel); stage two mixes a 2x2-pooled
    copy with seeded random 3x3 filters.  Gram matrices over these taps pin
    color statistics and stroke orientation, which is enough signal to
    train stripe- and blob-like textures without a pretrained network.

    The paired polarities matter: with one-sided filters and zero biases, a
    suitably saturated input zeroes every relu, the loss degenerates to a
    constant, and training can park in that gradient-free hole.  With +-
    pairs every input excites some channel, so the loss surface has no
    flat blind spot.
    """
    eye = np.zeros((3, 3), dtype=np.float32)
    eye[1, 1] = 1.0
    gx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], np.float32) / 4.0
    gy = gx.T.copy()
    d1 = np.array([[-2, -1, 0], [-1, 0, 1], [0, 1, 2]], np.float32) / 4.0
    d2 = np.array([[0, -1, -2], [1, 0, -1], [2, 1, 0]], np.float32) / 4.0
    bank = []
    for k in (eye, gx, gy, d1, d2):
        bank.extend((k, -k))

    w1 = np.zeros((3, 3, 3, 30), dtype=np.float32)
    for c in range(3):
        for i, k in enumerate(bank):
            w1[:, :, c, c * 10 + i] = k
    b1 = np.zeros(30, dtype=np.float32)

    rs = np.random.RandomState(seed)
    w2 = (rs.standard_normal((3, 3, 30, 24)) / np.sqrt(9 * 30)).astype(np.float32)
    b2 = (rs.uniform(0.05, 0.2, 24)).astype(np.float32)

    g = ObserverGraph()
    g.add_normalize("norm", "input", mean=[0.5, 0.5, 0.5], std=[0.25, 0.25, 0.25])
    g.add_conv("conv1", "norm", w1, b1)
    g.add_relu("relu1", "conv1")
    g.add_maxpool("pool1", "relu1")
    g.add_conv("conv2", "pool1", w2, b2)
    g.add_relu("relu2", "conv2")
    g.set_taps(["relu1", "relu2"], min_input=8)
    return g
