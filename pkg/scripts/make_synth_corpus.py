"""Write the seeded 7-category tone/noise corpus that configs/desk.cfg points at."""
import argparse
from pathlib import Path

from zenfoley import config, synth
from zenfoley.manifest import read_manifest

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "data" / "synth"))
    ap.add_argument("--clips", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"),
                    help="feature rows and mel params for the pseudo-feature sidecars")
    args = ap.parse_args()
    cfg = config.load_config(args.config)
    path = synth.make_corpus(Path(args.out), args.clips, args.seed, cfg.feature_rows, cfg.mel_params())
    manifest = read_manifest(path)
    print(f"{len(manifest)} clips, per category {manifest.counts().tolist()} -> {args.out}")


if __name__ == "__main__":
    main()
