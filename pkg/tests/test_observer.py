"""Observer engine vs an independent reference interpreter, loss-head
contracts, and the OBSV v1 container."""

import numpy as np
import pytest

from texa import observer as O
from texa import tensor as T


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.RandomState(seed).uniform(lo, hi, size=shape).astype(np.float32)


# -- reference interpreter (plain f64 numpy, no engine code) ----------------


def ref_forward(graph, image, taps):
    vals = {"input": np.asarray(image, dtype=np.float64)}
    for node in graph.nodes:
        name, op = node["name"], node["op"]
        if op == "input":
            continue
        srcs = [vals[s] for s in node["inputs"]]
        if op == "normalize":
            out = (srcs[0] - np.asarray(node["mean"])) / np.asarray(node["std"])
        elif op == "conv":
            w = graph.weights[name + ".w"].astype(np.float64)
            b = graph.weights[name + ".b"].astype(np.float64)
            kh, kw, cin, cout = w.shape
            x = srcs[0]
            h, wd = x.shape[:2]
            xp = np.zeros((h + kh - 1, wd + kw - 1, cin))
            xp[kh // 2:kh // 2 + h, kw // 2:kw // 2 + wd] = x
            out = np.broadcast_to(b, (h, wd, cout)).copy()
            for dy in range(kh):
                for dx in range(kw):
                    out += xp[dy:dy + h, dx:dx + wd] @ w[dy, dx]
            s = node.get("stride", 1)
            out = out[::s, ::s]
        elif op == "relu":
            out = np.maximum(srcs[0], 0.0)
        elif op == "maxpool2":
            h, wd, c = srcs[0].shape
            out = srcs[0].reshape(h // 2, 2, wd // 2, 2, c).max(axis=(1, 3))
        elif op == "avgpool2":
            h, wd, c = srcs[0].shape
            out = srcs[0].reshape(h // 2, 2, wd // 2, 2, c).mean(axis=(1, 3))
        elif op == "concat":
            out = np.concatenate(srcs, axis=-1)
        else:
            raise AssertionError(op)
        vals[name] = out
    return {tap: vals[tap] for tap in taps}


def identity_conv(cin):
    w = np.zeros((3, 3, cin, cin), dtype=np.float32)
    for c in range(cin):
        w[1, 1, c, c] = 1.0
    return w


# -- forward ----------------------------------------------------------------


def test_identity_conv_relu_passes_image_through():
    g = O.ObserverGraph()
    g.add_conv("c", "input", identity_conv(3), np.zeros(3, np.float32))
    g.add_relu("r", "c")
    g.set_taps(["r"])
    img = rand((6, 6, 3), seed=1, lo=0.0, hi=1.0)
    out = O.forward(g, T.Tensor(img))["r"].data
    assert np.array_equal(out, img)


def test_zero_image_normalize_conv_matches_reference():
    g = O.ObserverGraph()
    g.add_normalize("n", "input", mean=[0.485, 0.456, 0.406],
                    std=[0.229, 0.224, 0.225])
    g.add_conv("c", "n", rand((3, 3, 3, 5), seed=2), rand((5,), seed=3))
    g.set_taps(["c"])
    img = np.zeros((8, 8, 3), dtype=np.float32)
    got = O.forward(g, T.Tensor(img))["c"].data
    want = ref_forward(g, img, ["c"])["c"]
    assert np.abs(got - want).max() < 1e-5
    # interior of the constant field is one bias-plus-weighted-mean pattern
    assert np.allclose(got[2:-2, 2:-2], got[3, 3], atol=1e-6)


def random_dag(seed):
    rs = np.random.RandomState(seed)
    g = O.ObserverGraph()
    g.add_normalize("norm", "input", mean=[0.4, 0.5, 0.6], std=[0.3, 0.3, 0.3])
    g.add_conv("c1", "norm", rs.standard_normal((3, 3, 3, 6)).astype(np.float32) * 0.4,
               rs.standard_normal(6).astype(np.float32) * 0.1)
    g.add_relu("r1", "c1")
    g.add_conv("c2", "r1", rs.standard_normal((1, 1, 6, 4)).astype(np.float32) * 0.4,
               np.zeros(4, np.float32))
    g.add_maxpool("p1", "r1")
    g.add_conv("c3", "p1", rs.standard_normal((3, 3, 6, 4)).astype(np.float32) * 0.4,
               rs.standard_normal(4).astype(np.float32) * 0.1)
    g.add_avgpool("p2", "c2")
    g.add_concat("cat", ["c3", "p2"])
    g.add_relu("out", "cat")
    g.set_taps(["out", "r1"], min_input=4)
    return g


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_random_dag_matches_reference_interpreter(seed):
    g = random_dag(seed)
    img = rand((12, 16, 3), seed=seed + 100, lo=0.0, hi=1.0)
    got = O.forward(g, T.Tensor(img))
    want = ref_forward(g, img, g.taps)
    for tap in g.taps:
        assert np.abs(got[tap].data - want[tap]).max() < 1e-5


def test_forward_batched_matches_per_sample():
    g = random_dag(14)
    imgs = rand((3, 8, 8, 3), seed=15)
    got = O.forward(g, T.Tensor(imgs))
    for b in range(3):
        one = O.forward(g, T.Tensor(imgs[b]))
        for tap in g.taps:
            assert np.array_equal(got[tap].data[b], one[tap].data)


def test_forward_rejects_undersized_input():
    g = random_dag(16)
    with pytest.raises(T.ShapeMismatch, match="minimum"):
        O.forward(g, T.Tensor(rand((2, 2, 3))))


def test_graph_rejects_unknown_wiring_and_dup_names():
    g = O.ObserverGraph()
    with pytest.raises(ValueError, match="unknown input"):
        g.add_relu("r", "ghost")
    g.add_relu("r", "input")
    with pytest.raises(ValueError, match="duplicate"):
        g.add_relu("r", "input")
    with pytest.raises(ValueError, match="names no node"):
        g.set_taps(["ghost"])


def test_conv_rejects_nonfinite_weights():
    w = identity_conv(3)
    w[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        O.ObserverGraph().add_conv("c", "input", w, np.zeros(3, np.float32))


def test_shift_equivariance_at_pooled_tap():
    g = random_dag(17)
    img = rand((32, 32, 3), seed=18, lo=0.0, hi=1.0)
    shifted = np.roll(img, (2, 4), axis=(0, 1))
    a = O.forward(g, T.Tensor(shifted))["out"].data
    b = np.roll(O.forward(g, T.Tensor(img))["out"].data, (1, 2), axis=(0, 1))
    # zero same-padding contaminates a border band (2 pooled px) which the
    # roll then displaces; compare a crop clear of both
    assert np.allclose(a[5:-5, 5:-5], b[5:-5, 5:-5], atol=1e-5)


# -- texture loss ------------------------------------------------------------


def test_texture_loss_zero_on_template():
    g = random_dag(19)
    template = rand((8, 8, 3), seed=20, lo=0.0, hi=1.0)
    target = O.make_texture_target(g, template)
    loss = O.texture_loss(g, target, T.Tensor(template))
    assert abs(loss.item()) < 1e-6


def test_texture_loss_tap_weight_linearity():
    g = random_dag(21)
    template = rand((8, 8, 3), seed=22, lo=0.0, hi=1.0)
    img = T.Tensor(rand((8, 8, 3), seed=23, lo=0.0, hi=1.0))
    single = O.TextureTarget
    base = O.make_texture_target(g, template)
    one = O.texture_loss(g, single({"out": base.grams["out"]}, {"out": 1.0}), img)
    two = O.texture_loss(g, single({"out": base.grams["out"]}, {"out": 2.0}), img)
    assert two.item() == pytest.approx(2.0 * one.item(), rel=1e-7)


def test_texture_loss_matches_loop_oracle():
    g = O.ObserverGraph()
    g.add_conv("c1", "input", rand((3, 3, 3, 4), seed=24, lo=-0.5, hi=0.5),
               rand((4,), seed=25, lo=-0.1, hi=0.1))
    g.add_relu("r1", "c1")
    g.set_taps(["r1"], min_input=4)
    template = rand((6, 6, 3), seed=26, lo=0.0, hi=1.0)
    img = rand((6, 6, 3), seed=27, lo=0.0, hi=1.0)

    target = O.make_texture_target(g, template)
    got = O.texture_loss(g, target, T.Tensor(img)).item()

    def gram_oracle(feat):
        h, w, c = feat.shape
        gm = np.zeros((c, c))
        for i in range(c):
            for j in range(c):
                gm[i, j] = (feat[..., i] * feat[..., j]).sum() / (h * w)
        return gm

    gt = gram_oracle(ref_forward(g, template, ["r1"])["r1"])
    gi = gram_oracle(ref_forward(g, img, ["r1"])["r1"])
    want = ((gi - gt) ** 2).mean()
    assert got == pytest.approx(want, abs=1e-6)


def test_texture_loss_template_beats_noise():
    g = random_dag(28)
    template = rand((8, 8, 3), seed=29, lo=0.0, hi=1.0)
    target = O.make_texture_target(g, template)
    on_template = O.texture_loss(g, target, T.Tensor(template)).item()
    for seed in range(5):
        noise = rand((8, 8, 3), seed=200 + seed, lo=0.0, hi=1.0)
        assert on_template < O.texture_loss(g, target, T.Tensor(noise)).item()


def test_texture_loss_rejects_unknown_tap():
    g = random_dag(30)
    bad = O.TextureTarget({"nope": np.zeros((4, 4), np.float32)})
    with pytest.raises(ValueError, match="nope"):
        O.texture_loss(g, bad, T.Tensor(rand((8, 8, 3))))


def test_texture_target_deterministic_and_symmetric():
    g = random_dag(31)
    template = rand((8, 8, 3), seed=32, lo=0.0, hi=1.0)
    t1 = O.make_texture_target(g, template)
    t2 = O.make_texture_target(g, template)
    for tap in t1.grams:
        assert np.array_equal(t1.grams[tap], t2.grams[tap])
        assert np.array_equal(t1.grams[tap], t1.grams[tap].T)


def test_texture_loss_gradient_matches_finite_differences():
    # 32x32 image, 2-conv graph; FD on the f64 reference pipeline
    g = O.ObserverGraph()
    g.add_normalize("n", "input", mean=[0.5, 0.5, 0.5], std=[0.5, 0.5, 0.5])
    g.add_conv("c1", "n", rand((3, 3, 3, 4), seed=33, lo=-0.4, hi=0.4),
               rand((4,), seed=34, lo=-0.1, hi=0.1))
    g.add_relu("r1", "c1")
    g.add_conv("c2", "r1", rand((3, 3, 4, 4), seed=35, lo=-0.4, hi=0.4),
               np.zeros(4, np.float32))
    g.add_relu("r2", "c2")
    g.set_taps(["r1", "r2"], min_input=8)

    template = rand((32, 32, 3), seed=36, lo=0.0, hi=1.0)
    img = rand((32, 32, 3), seed=37, lo=0.0, hi=1.0)
    target = O.make_texture_target(g, template)

    with T.Tape() as tape:
        xt = T.Tensor(img.copy())
        tape.watch(xt)
        loss = O.texture_loss(g, target, xt)
    T.backward(tape, loss)

    def ref_loss(image):
        feats = ref_forward(g, image, g.taps)
        total = 0.0
        for tap in g.taps:
            f = feats[tap]
            h, w, c = f.shape
            f2 = f.reshape(-1, c)
            gm = f2.T @ f2 / (h * w)
            total += ((gm - target.grams[tap].astype(np.float64)) ** 2).mean()
        return total

    rs = np.random.RandomState(38)
    coords = [tuple(rs.randint(0, d) for d in img.shape) for _ in range(60)]
    h = 1e-4
    ok = 0
    for idx in coords:
        up = img.astype(np.float64).copy()
        up[idx] += h
        down = img.astype(np.float64).copy()
        down[idx] -= h
        fd = (ref_loss(up) - ref_loss(down)) / (2 * h)
        ad = float(xt.grad[idx])
        if abs(ad - fd) <= max(1e-3 * abs(fd), 1e-6):
            ok += 1
    assert ok >= 0.95 * len(coords)


# -- feature loss -------------------------------------------------------------


def test_feature_loss_zero_and_constant_channel():
    g = O.ObserverGraph()
    w = np.zeros((1, 1, 3, 2), dtype=np.float32)
    b = np.array([0.0, 0.75], dtype=np.float32)
    g.add_conv("c", "input", w, b)
    g.set_taps(["c"])
    img = T.Tensor(rand((4, 4, 3), seed=39))
    assert O.feature_loss(g, O.FeatureTargetSpec("c", 0), img).item() == 0.0
    assert O.feature_loss(g, O.FeatureTargetSpec("c", 1), img).item() == pytest.approx(-0.75)


def test_feature_loss_matches_direct_mean():
    g = random_dag(40)
    img = rand((8, 8, 3), seed=41, lo=0.0, hi=1.0)
    got = O.feature_loss(g, O.FeatureTargetSpec("out", 3), T.Tensor(img)).item()
    want = -ref_forward(g, img, ["out"])["out"][..., 3].mean()
    assert got == pytest.approx(want, abs=1e-6)


def test_feature_loss_rejects_bad_channel():
    g = random_dag(42)
    with pytest.raises(ValueError, match="channel"):
        O.feature_loss(g, O.FeatureTargetSpec("out", 99), T.Tensor(rand((8, 8, 3))))


# -- OBSV container -----------------------------------------------------------


def test_obsv_roundtrip_bitwise_forward(tmp_path):
    g = random_dag(43)
    path = tmp_path / "g.obsv"
    O.save_observer(path, g)
    g2 = O.load_observer(path)
    img = T.Tensor(rand((8, 8, 3), seed=44, lo=0.0, hi=1.0))
    a = O.forward(g, img)
    b = O.forward(g2, img)
    assert g2.taps == g.taps
    for tap in g.taps:
        assert np.array_equal(a[tap].data, b[tap].data)


def test_obsv_bytes_deterministic(tmp_path):
    g = random_dag(45)
    d1 = O.save_observer(tmp_path / "a.obsv", g)
    d2 = O.save_observer(tmp_path / "b.obsv", g)
    assert d1 == d2


def test_obsv_offsets_aligned(tmp_path):
    import json
    import struct
    data = O.save_observer(tmp_path / "g.obsv", random_dag(46))
    (mlen,) = struct.unpack_from("<I", data, 8)
    assert (12 + mlen) % 16 == 0
    manifest = json.loads(data[12:12 + mlen].decode())
    for layer in manifest["layers"]:
        for ref in layer.get("weights", {}).values():
            assert ref["offset"] % 16 == 0


def test_obsv_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.obsv"
    p.write_bytes(b"NOTOBSRV" + b"\0" * 32)
    with pytest.raises(ValueError, match="magic"):
        O.load_observer(p)


def test_desk_observer_builds_and_runs():
    g = O.make_desk_observer(seed=7)
    img = T.Tensor(rand((16, 16, 3), seed=47, lo=0.0, hi=1.0))
    feats = O.forward(g, img)
    assert set(feats) == {"relu1", "relu2"}
    assert feats["relu1"].shape == (16, 16, 30)
    assert feats["relu2"].shape == (8, 8, 24)


def test_desk_observer_has_no_dead_zone():
    # Saturated inputs must still light up some first-stage channel; a
    # one-sided filter bank would zero every relu on a constant extreme
    # image and leave texture_loss with no gradient at all.
    g = O.make_desk_observer(seed=7)
    for value in (-3.0, 0.0, 1.0, 3.0):
        img = T.Tensor(np.full((16, 16, 3), value, dtype=np.float32))
        feats = O.forward(g, img)
        assert float(np.abs(feats["relu1"].data).max()) > 0.0
