"""Attention-weight entries of a zen block with and without downsampling."""
import argparse

import numpy as np

from zenfoley.tensor import no_grad
from zenfoley.zensnail import ZenAttentionBlock, zen_attention


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", type=int, nargs="+", default=[16, 64, 300, 1200])
    ap.add_argument("--channels", type=int, default=8)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'N':>6} {'S=1':>10} {'S=4':>8} {'ratio':>7}")
    for n in args.lengths:
        x = rng.normal(size=(1, n, args.channels)).astype(np.float32)
        counts = []
        for s in (1, 4):
            block = ZenAttentionBlock(args.channels, np.random.default_rng(1), downsample=s)
            with no_grad():
                zen_attention(x, block)
            counts.append(block.attention_entries)
        print(f"{n:>6} {counts[0]:>10} {counts[1]:>8} {counts[1] / counts[0]:7.4f}")


if __name__ == "__main__":
    main()
