"""Class-conditioned vs unconditioned VQ-VAE at equal steps, compared on latent diff.

Latent diff is the training-log value; the tail mean over the last ``--tail`` steps is reported
per seed.  Each seed prepares its own run directory once and trains both variants on it.
"""
import argparse
import shutil
import tempfile
from pathlib import Path

import numpy as np

from zenfoley import config, pipeline

ROOT = Path(__file__).resolve().parent.parent


def tail_mean(history, key, n):
    return float(np.mean([r[key] for r in history[-n:]]))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=None, help="overrides vq_steps")
    ap.add_argument("--tail", type=int, default=50)
    args = ap.parse_args()
    overrides = {} if args.steps is None else {"vq_steps": args.steps}
    print(f"{'seed':>4}  {'conditioned':>12}  {'unconditioned':>13}  {'recon c/u':>17}")
    with tempfile.TemporaryDirectory() as tmp:
        for seed in args.seeds:
            out = Path(tmp) / f"s{seed}"
            cfg = config.load_config(args.config, overrides)
            pipeline.split(cfg, out, seed)
            pipeline.prepare(cfg, out, seed)
            rows = {}
            for cond in (True, False):
                run = out / ("cond" if cond else "uncond")
                shutil.copytree(out, run, ignore=shutil.ignore_patterns("cond", "uncond"))
                c = config.load_config(args.config, {**overrides, "class_conditioning": cond})
                rows[cond] = pipeline.train_vqvae(c, run, seed).history
            print(f"{seed:>4}  {tail_mean(rows[True], 'latent_diff', args.tail):12.4e}  "
                  f"{tail_mean(rows[False], 'latent_diff', args.tail):13.4e}  "
                  f"{tail_mean(rows[True], 'recon_mse', args.tail):8.4f}/{tail_mean(rows[False], 'recon_mse', args.tail):.4f}")


if __name__ == "__main__":
    main()
