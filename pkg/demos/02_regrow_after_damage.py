"""Cut a hole in a settled texture and watch the CA regrow it.

Loads a trained model (train one with demos/01_train_stripes.py), lets
the grid settle, then noises out a disc a quarter of the grid wide and
snapshots the recovery.  The same local rule that grew the texture heals
it; there is no separate repair mechanism.

    python3 demos/02_regrow_after_damage.py --model /tmp/stripes_demo/stripes.ncam
"""

import argparse
import pathlib

from texa import model_io, runtime


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", required=True)
    ap.add_argument("--out-dir", default="regrow_demo")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--settle", type=int, default=400)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    params, _ = model_io.load_model(args.model)
    n = args.size

    # Settle from noise, then punch a noise-filled disc of radius n/4 in
    # the middle.  runtime.run applies events before the update at the
    # given wall step, so step `settle` is the first post-damage frame.
    spec = runtime.DamageSpec("disc", (n // 2, n // 2, n // 4), "noise")
    frames = []

    def keep(step, state):
        frames.append((step, state.copy()))

    runtime.run(
        params, n, n, args.settle + 200, seed=args.seed,
        events=[(args.settle, lambda s: runtime.damage(s, spec, args.seed))],
        snapshot_every=25, on_snapshot=keep)

    for step, state in frames:
        tag = "pre" if step < args.settle else "post"
        runtime.write_png(out / f"{tag}_{step:04d}.png", state)
    print(f"wrote {len(frames)} frames to {out}/")


if __name__ == "__main__":
    main()
