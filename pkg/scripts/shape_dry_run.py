"""Push one synthetic clip through every stage at the configured scale and print the shapes."""
import argparse

from zenfoley import config, pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None, help="defaults to the full-scale settings")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for k, v in pipeline.shape_dry_run(config.load_config(args.config), args.seed).items():
        print(f"{k:<9} {tuple(v)}")


if __name__ == "__main__":
    main()
