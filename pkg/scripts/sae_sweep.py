"""Train SAEs over an expansion x sparsity grid on a finished run's activation cache.

    python scripts/sae_sweep.py --run casl-out --expansions 4 8 16 --lams 1 4 16 --epochs 30
"""

import argparse
import itertools
from pathlib import Path

import numpy as np

from casl.config import PipelineConfig, load
from casl.evaluation import write_csv
from casl.pipeline import Artifacts, cache_view
from casl.sae import train_sae


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--expansions", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--lams", type=float, nargs="+", default=[1.0, 4.0, 8.0, 16.0, 32.0])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-train", type=int, default=256)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--csv", type=Path, default=Path("sae_grid.csv"))
    args = ap.parse_args()

    cfg = load(args.config) if args.config else PipelineConfig()
    cache, _ = cache_view(Artifacts(args.run))
    train = cache.subset(np.arange(args.n_train))
    held = cache.subset(np.arange(cfg.sae.n_train, cfg.sae.n_train + cfg.sae.n_heldout))
    rows = []
    for g, lam, seed in itertools.product(args.expansions, args.lams, args.seeds):
        st = train_sae(train, g, lam, args.epochs, cfg.sae.lr, seed, cfg.sae.batch_maps, held, log_every=args.epochs).heldout
        rows.append([g, lam, seed, f"{st.mse:.6g}", f"{st.cosine:.6g}", f"{st.dar:.6g}"])
        print(f"expansion={g:<3} lambda={lam:<5g} seed={seed}  mse={st.mse:.5f}  cos={st.cosine:.4f}  dar={st.dar:.4f}", flush=True)
    write_csv(args.csv, ("expansion", "lam", "seed", "mse", "cosine", "dar"), rows)


if __name__ == "__main__":
    main()
