"""Two-stage SCAE training: plain until plateau, then L1; reports kernel sparsity.

    python3 scripts/scae_sparsity.py --l1-lambda 1e-4 --log scae.log.csv
"""

import argparse
from dataclasses import fields

from structconv.experiments import SparsitySettings, scae_sparsity
from structconv.optim import write_log_csv


def main():
    defaults = SparsitySettings()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(SparsitySettings):
        ap.add_argument(f"--{f.name.replace('_', '-')}", type=type(getattr(defaults, f.name)),
                        default=getattr(defaults, f.name))
    ap.add_argument("--log", help="write the per-epoch training log here")
    args = vars(ap.parse_args())
    log_path = args.pop("log")
    res = scae_sparsity(SparsitySettings(**args))
    print(f"stage boundary after epoch {res.boundary}")
    print(f"sparsity (|w| < 1e-3): {res.stage1_sparsity:.4f} -> {res.stage2_sparsity:.4f}")
    print(f"validation MSE: {res.stage1_val:.6f} -> {res.stage2_val:.6f} "
          f"({100 * (res.stage2_val / res.stage1_val - 1):+.1f}%)")
    if log_path:
        write_log_csv(res.log, log_path)


if __name__ == "__main__":
    main()
