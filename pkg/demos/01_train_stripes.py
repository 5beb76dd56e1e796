"""Train a texture CA on a synthetic diagonal-stripe template.

Walks the whole pipeline at desk scale: build a template, build the
compact bundled observer, fit the CA, then roll the trained model from
noise and write snapshots.  The defaults finish in a few minutes on one
core; pass --steps 1500 for the full desk-quality run.

    python3 demos/01_train_stripes.py --out-dir /tmp/stripes_demo
"""

import argparse
import pathlib

import numpy as np

from texa import model_io, nca, observer, rng, runtime, tensor, trainer


def diagonal_stripes(n, period=8):
    """0.9/0.1 bands running down the main diagonal, period pixels wide."""
    y, x = np.mgrid[0:n, 0:n]
    band = ((x + y) // (period // 2)) % 2
    img = np.where(band[..., None] == 0, 0.9, 0.1).astype(np.float32)
    return np.repeat(img, 3, axis=-1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="stripes_demo")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    # 1. A texture target is just an image; any RGB array works.
    template = diagonal_stripes(args.size)
    runtime.write_png(out / "template.png", template)

    # 2. The bundled observer is a small fixed-weight conv net.  Its Gram
    #    matrices over color and oriented-edge channels are the training
    #    signal; no pretrained weights are needed at this scale.
    graph = observer.make_desk_observer(seed=0)

    # 3. Fit.  The trainer maintains a pool of evolving grids so the CA
    #    learns to *hold* the texture, not merely to reach it once.
    cfg = trainer.TrainConfig(
        size=args.size, batch=4, steps=args.steps, pool_capacity=256,
        seed=args.seed, lr=5e-5, lr_decay_step=1000,
        rollout_lo=32, rollout_hi=64,
    )
    model_path = out / "stripes.ncam"
    _, records = trainer.fit(
        template, cfg, graph, model_path,
        metrics_path=out / "metrics.jsonl",
        progress=lambda rec: print(
            f"step {rec['step']:5d}  loss {rec['loss']:.3f}", flush=True))
    losses = [r["loss"] for r in records if r["loss"] is not None]
    if losses:
        print(f"loss: first {losses[0]:.3f}  "
              f"min {min(losses):.3f}  last {losses[-1]:.3f}")

    # 4. Roll the trained rule from fresh noise and keep a filmstrip.
    params, _ = model_io.load_model(model_path)
    state = rng.noise_state(args.seed + 1, args.size, args.size, nca.CHANNELS)
    for chunk in range(6):
        state = runtime.run(params, args.size, args.size, 50,
                            seed=args.seed + 1, initial=state,
                            first_step=chunk * 50)
        runtime.write_png(out / f"grown_{chunk * 50 + 50:03d}.png", state)
    print(f"wrote {out}/grown_*.png")


if __name__ == "__main__":
    main()
