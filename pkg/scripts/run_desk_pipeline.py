"""Run every stage at desk scale and print per-stage wall time and the final losses."""
import argparse
import json
import time
from pathlib import Path

from zenfoley import config, pipeline

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = config.load_config(args.config)
    out = Path(args.out)
    stages = [
        ("split", lambda: pipeline.split(cfg, out, args.seed)),
        ("prepare", lambda: pipeline.prepare(cfg, out, args.seed)),
        ("train-vqvae", lambda: pipeline.train_vqvae(cfg, out, args.seed)),
        ("extract-codes", lambda: pipeline.extract_code_files(cfg, out)),
        ("train-snail", lambda: pipeline.train_snail(cfg, out, args.seed)),
        ("generate", lambda: pipeline.generate(cfg, out, args.seed)),
        ("evaluate", lambda: pipeline.evaluate(cfg, out)),
    ]
    results = {}
    for name, fn in stages:
        t0 = time.perf_counter()
        results[name] = fn()
        print(f"{name:<14} {time.perf_counter() - t0:7.1f}s")
    vq, prior = results["train-vqvae"].history, results["train-snail"].history
    print("vqvae first/last", json.dumps({k: vq[0][k] for k in ("recon_mse", "total")}),
          json.dumps({k: vq[-1][k] for k in ("recon_mse", "total")}))
    print(f"prior nll first {prior[0]['nll']:.4f} last {prior[-1]['nll']:.4f}")
    print(results["evaluate"].to_table(), end="")


if __name__ == "__main__":
    main()
