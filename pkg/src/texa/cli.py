"""Command-line driver: train / run / print / quantize / bench.

Exit codes: 0 success, 2 bad flags or malformed specs, 3 file IO problems,
4 training aborted by divergence, 5 model/option geometry mismatch.

`TEXA_THREADS` caps the numeric library thread pools; it must take effect
before numpy loads, which is why every subcommand imports the heavy modules
lazily from inside its handler.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_GEOMETRY = 5


def _apply_thread_cap() -> None:
    cap = os.environ.get("TEXA_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _write_manifest(path, command: str, config: dict, hashes: dict,
                    outputs: dict | None = None) -> None:
    from . import __version__
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "hashes": hashes,
        "outputs": outputs or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# spec grammars


def parse_size(text: str) -> tuple[int, int]:
    """'HxW' -> (H, W); a bare integer means a square grid."""
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            n = int(parts[0])
            dims = (n, n)
        elif len(parts) == 2:
            dims = (int(parts[0]), int(parts[1]))
        else:
            raise ValueError
    except ValueError:
        raise ValueError(f"bad size {text!r}, expected HxW") from None
    if dims[0] < 1 or dims[1] < 1:
        raise ValueError(f"size must be positive, got {text!r}")
    return dims


def parse_damage(text: str):
    """'disc:cx,cy,r,noise|zero@T' or 'rect:x,y,w,h,noise|zero@T'."""
    from . import runtime
    try:
        body, at = text.rsplit("@", 1)
        step = int(at)
        kind, rest = body.split(":", 1)
        fields = rest.split(",")
        *nums, fill = fields
        args = tuple(int(v) for v in nums)
    except ValueError:
        raise ValueError(
            f"bad damage spec {text!r}, expected kind:args,mode@step") from None
    if step < 0:
        raise ValueError(f"damage step must be >= 0 in {text!r}")
    return step, runtime.DamageSpec(kind, args, fill=fill)


def parse_expand(text: str):
    """'HxW[:anchor]@T' -> (step, H, W, anchor)."""
    try:
        body, at = text.rsplit("@", 1)
        step = int(at)
        if ":" in body:
            size, anchor = body.split(":", 1)
        else:
            size, anchor = body, "center"
        h, w = parse_size(size)
    except ValueError:
        raise ValueError(
            f"bad expand spec {text!r}, expected HxW[:anchor]@step") from None
    if anchor not in ("center", "topleft"):
        raise ValueError(f"bad expand anchor {anchor!r}")
    return step, h, w, anchor


def parse_tiles(text: str) -> tuple[int, int]:
    """'CxR' -> (columns, rows) of a regular split."""
    c, r = parse_size(text)
    return c, r


def parse_rates(text: str) -> list:
    try:
        rates = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValueError(f"bad rates {text!r}, expected comma floats") from None
    if any(r <= 0 for r in rates):
        raise ValueError("rates must be positive")
    return rates


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from . import observer as obs
    from . import trainer

    for path, label in ((args.template, "template"), (args.observer, "observer")):
        if not Path(path).is_file():
            print(f"error: {label} file not found: {path}", file=sys.stderr)
            return EXIT_IO
    config = trainer.TrainConfig(
        size=args.size, batch=args.batch, steps=args.steps,
        pool_capacity=args.pool, lr=args.lr, seed=args.seed, qat=args.qat,
        loss=args.loss, feature_tap=args.feature_tap,
        feature_channel=args.feature_channel,
        rollout_lo=args.rollout_min, rollout_hi=args.rollout_max,
        lr_decay_step=args.lr_decay_step)
    graph = obs.load_observer(args.observer)
    metrics_path = args.metrics or (str(args.out) + ".metrics.jsonl")

    def progress(rec):
        if not args.quiet:
            print(f"step {rec['step']}  loss {rec['loss']:.6f}  "
                  f"lr {rec['lr']:.2e}", flush=True)

    trainer.fit(args.template, config, graph, out_path=args.out,
                metrics_path=metrics_path, progress=progress)
    _write_manifest(
        str(args.out) + ".manifest.json", "train",
        config=_config_echo(args) | {"metrics": metrics_path},
        hashes={"template": _sha256_file(args.template),
                "observer": _sha256_file(args.observer)},
        outputs={"model": _sha256_file(args.out)})
    return EXIT_OK


def _load_model_for_run(args):
    from . import model_io, runtime
    header, payload = model_io.load_model(args.model)
    quantized_file = header.get("quantization") is not None
    if args.quantized != quantized_file:
        have = "int8" if quantized_file else "f32"
        want = "--quantized" if args.quantized else "a float run"
        raise ValueError(f"model {args.model} is {have}; incompatible with {want}")
    geometry = header.get("geometry", "square")
    if args.hex != (geometry == "hex"):
        raise runtime.GeometryError(
            f"model geometry is {geometry!r} but --hex={'on' if args.hex else 'off'}")
    return header, payload


def cmd_run(args) -> int:
    import numpy as np

    from . import model_io, nca, runtime

    if not Path(args.model).is_file():
        print(f"error: model file not found: {args.model}", file=sys.stderr)
        return EXIT_IO
    header, payload = _load_model_for_run(args)
    height, width = parse_size(args.size)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = {"model": _sha256_file(args.model)}

    if args.quantized and (args.damage or args.expand or args.tiles
                           or args.rotation_field or args.hex):
        raise ValueError("--quantized runs support plain square grids only")
    if args.tiles and (args.damage or args.expand or args.rotation_field):
        raise ValueError("--tiles cannot combine with damage/expand/rotation")

    state_scale = None
    snapshots = []

    def snap_name(t):
        return f"step_{t + 1:06d}"

    def on_snapshot(t, state):
        base = out_dir / snap_name(t)
        runtime.write_png(base.with_suffix(".png"), state, state_scale)
        model_io.save_state(base.with_suffix(".ncas"), state)
        snapshots.append(snap_name(t))

    if args.quantized:
        qm = runtime.load_quantized(args.model)
        state_scale = qm.state_scale
        final = runtime.run_quantized(
            qm, height, width, args.steps, seed=args.seed,
            snapshot_every=args.snapshot_every, on_snapshot=on_snapshot)
    elif args.tiles:
        cols, rows = parse_tiles(args.tiles)
        rates = parse_rates(args.rates) if args.rates else None
        plan = runtime.TilePlan.split(height, width, rows, cols, rates=rates)
        final = runtime.run_tiled(
            payload, plan, args.steps, seed=args.seed,
            band=header.get("state_band", nca.STATE_BAND),
            snapshot_every=args.snapshot_every, on_snapshot=on_snapshot)
    else:
        events = []
        for spec_text in args.damage or []:
            step, spec = parse_damage(spec_text)
            events.append((step, lambda s, sp=spec, st=step: runtime.damage(
                s, sp, seed=args.seed, draw=1_000_000 + st)))
        for spec_text in args.expand or []:
            step, h2, w2, anchor = parse_expand(spec_text)
            events.append((step, lambda s, a=(h2, w2, anchor), st=step:
                           runtime.expand(s, a[0], a[1], anchor=a[2],
                                          seed=args.seed, draw=2_000_000 + st)))
        rotation = None
        if args.rotation_field:
            if not Path(args.rotation_field).is_file():
                print(f"error: rotation field not found: {args.rotation_field}",
                      file=sys.stderr)
                return EXIT_IO
            rhdr, raster = model_io.load_state(args.rotation_field)
            if rhdr["channels"] != 1:
                raise ValueError("rotation field must be single-channel")
            rotation = raster[..., 0].astype(np.float32)
            hashes["rotation_field"] = _sha256_file(args.rotation_field)
        final = runtime.run(
            payload, height, width, args.steps, seed=args.seed,
            band=header.get("state_band", nca.STATE_BAND),
            geometry=header.get("geometry", "square"),
            rotation=rotation, events=events,
            snapshot_every=args.snapshot_every, on_snapshot=on_snapshot)

    runtime.write_png(out_dir / "final.png", final, state_scale)
    model_io.save_state(out_dir / "final.ncas", final)
    _write_manifest(
        out_dir / "manifest.json", "run", config=_config_echo(args), hashes=hashes,
        outputs={"final_state": _sha256_file(out_dir / "final.ncas"),
                 "final_png": _sha256_file(out_dir / "final.png"),
                 "snapshots": snapshots})
    return EXIT_OK


def cmd_print(args) -> int:
    from . import model_io, nca, runtime

    if not Path(args.model).is_file():
        print(f"error: model file not found: {args.model}", file=sys.stderr)
        return EXIT_IO
    header, params = model_io.load_model(args.model)
    if header.get("quantization") is not None:
        raise ValueError("printing runs the float model; quantized input given")
    if header.get("geometry", "square") != "square":
        raise runtime.GeometryError("printing supports square geometry only")
    strip = runtime.print_rows(
        params, args.width, args.rows, args.band, band_steps=args.band_steps,
        seed=args.seed, state_band=header.get("state_band", nca.STATE_BAND))
    runtime.write_png(args.out, strip)
    if args.state_out:
        model_io.save_state(args.state_out, strip)
    _write_manifest(
        str(args.out) + ".manifest.json", "print", config=_config_echo(args),
        hashes={"model": _sha256_file(args.model)},
        outputs={"png": _sha256_file(args.out)})
    return EXIT_OK


def cmd_quantize(args) -> int:
    from . import model_io, runtime

    if not Path(args.model).is_file():
        print(f"error: model file not found: {args.model}", file=sys.stderr)
        return EXIT_IO
    header, params = model_io.load_model(args.model)
    if header.get("quantization") is not None:
        raise ValueError(f"{args.model} is already quantized")
    if header.get("geometry", "square") != "square":
        raise runtime.GeometryError("int8 conversion supports square geometry only")
    hidden_max = args.hidden_max
    if hidden_max is None:
        hidden_max = (header.get("provenance") or {}).get(
            "qat_ranges", {}).get("hidden_max")
    qm = runtime.quantize_model(
        params, hidden_max=hidden_max, band=header.get("state_band", 3.0),
        calib_size=args.calib_size, calib_steps=args.calib_steps,
        calib_seed=args.seed)
    provenance = dict(header.get("provenance") or {})
    provenance["quantized_from"] = _sha256_file(args.model)
    runtime.save_quantized(args.out, params, qm, provenance=provenance)
    _write_manifest(
        str(args.out) + ".manifest.json", "quantize", config=_config_echo(args),
        hashes={"model": _sha256_file(args.model)},
        outputs={"model": _sha256_file(args.out)})
    print(f"hidden_max {qm.hidden_max:.6g}  w0_scale {qm.w0_scale:.6g}  "
          f"w1_scale {qm.w1_scale:.6g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import time

    import numpy as np

    from . import model_io, nca, runtime

    if args.model:
        if not Path(args.model).is_file():
            print(f"error: model file not found: {args.model}", file=sys.stderr)
            return EXIT_IO
        header, params = model_io.load_model(args.model)
        if header.get("quantization") is not None:
            raise ValueError("bench takes a float model")
    else:
        params = nca.init_params(args.seed)
        gen = np.random.default_rng(args.seed)
        params.W1.data[:] = gen.standard_normal(
            params.W1.data.shape).astype(np.float32) * 0.05
    height, width = parse_size(args.size)
    cells = height * width

    t0 = time.perf_counter()
    runtime.run(params, height, width, args.steps, seed=args.seed)
    float_s = time.perf_counter() - t0

    qm = runtime.quantize_model(params, calib_seed=args.seed)
    t0 = time.perf_counter()
    runtime.run_quantized(qm, height, width, args.steps, seed=args.seed)
    int8_s = time.perf_counter() - t0

    report = {
        "size": f"{height}x{width}",
        "steps": args.steps,
        "float_cells_steps_per_s": cells * args.steps / float_s,
        "int8_cells_steps_per_s": cells * args.steps / int8_s,
        "float_s": float_s,
        "int8_s": int8_s,
    }
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="texa",
                                description="Texture NCA trainer and runtime")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model to a texture template")
    t.add_argument("--template", required=True)
    t.add_argument("--observer", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--size", type=int, default=128)
    t.add_argument("--steps", type=int, default=8000)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--pool", type=int, default=1024)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--lr-decay-step", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--qat", action="store_true")
    t.add_argument("--loss", choices=("texture", "feature"), default="texture")
    t.add_argument("--feature-tap", default=None)
    t.add_argument("--feature-channel", type=int, default=0)
    t.add_argument("--rollout-min", type=int, default=32)
    t.add_argument("--rollout-max", type=int, default=64)
    t.add_argument("--metrics", default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="evolve a trained model")
    r.add_argument("--model", required=True)
    r.add_argument("--size", default="128x128")
    r.add_argument("--steps", type=int, default=1000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--snapshot-every", type=int, default=None)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--quantized", action="store_true")
    r.add_argument("--hex", action="store_true")
    r.add_argument("--rotation-field", default=None)
    r.add_argument("--damage", action="append", default=None,
                   metavar="KIND:ARGS,MODE@T")
    r.add_argument("--expand", action="append", default=None,
                   metavar="HxW[:ANCHOR]@T")
    r.add_argument("--tiles", default=None, metavar="CxR")
    r.add_argument("--rates", default=None, metavar="R1,R2,...")
    r.set_defaults(func=cmd_run)

    pr = sub.add_parser("print", help="stream a tall texture strip")
    pr.add_argument("--model", required=True)
    pr.add_argument("--width", type=int, required=True)
    pr.add_argument("--rows", type=int, required=True)
    pr.add_argument("--band", type=int, default=64)
    pr.add_argument("--band-steps", type=int, default=256)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.add_argument("--state-out", default=None)
    pr.set_defaults(func=cmd_print)

    q = sub.add_parser("quantize", help="convert an f32 model to int8")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--hidden-max", type=float, default=None)
    q.add_argument("--calib-size", type=int, default=32)
    q.add_argument("--calib-steps", type=int, default=48)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_quantize)

    b = sub.add_parser("bench", help="measure float and int8 throughput")
    b.add_argument("--model", default=None)
    b.add_argument("--size", default="128x128")
    b.add_argument("--steps", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def _exit_code_for(err: Exception) -> int | None:
    from . import runtime, trainer
    from . import tensor as T
    if isinstance(err, runtime.GeometryError):
        return EXIT_GEOMETRY
    if isinstance(err, (trainer.TrainingDiverged, T.DivergenceError)):
        return EXIT_DIVERGED
    if isinstance(err, OSError):
        return EXIT_IO
    if isinstance(err, (ValueError, KeyError)):
        return EXIT_USAGE
    return None


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as err:
        code = _exit_code_for(err)
        if code is None:
            raise
        print(f"error: {err}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
