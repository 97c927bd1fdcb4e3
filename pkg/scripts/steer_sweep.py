"""Median EPR over a wider alpha x k grid than the eval stage uses.

    python scripts/steer_sweep.py --run casl-out --alphas 0.5 1 2 4 --ks 1 2 4 8 16
"""

import argparse
from pathlib import Path

import numpy as np

from casl.config import PipelineConfig, load
from casl.evaluation import sweep, write_csv
from casl.pipeline import Artifacts, _held_out, schedule_of


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    ap.add_argument("--ks", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    ap.add_argument("--n-images", type=int, default=32)
    ap.add_argument("--csv", type=Path, default=Path("steer_grid.csv"))
    args = ap.parse_args()

    cfg = load(args.config) if args.config else PipelineConfig()
    art = Artifacts(args.run)
    maps = {c: art.concept(c) for c in art.concepts()}
    x0 = art.corpus.images[_held_out(cfg, args.n_images)]
    d = cfg.diffusion
    rows = sweep(art.denoiser, art.sae, maps, art.classifier, x0, schedule_of(cfg), args.alphas, args.ks, cfg.steer.gamma, d.t_edit, d.grid_points)
    write_csv(
        args.csv,
        ("concept", "alpha", "k", "delta_target", "delta_non_target", "epr", "median_epr"),
        [[r.concept, r.alpha, r.k, f"{r.delta_target:.6g}", f"{r.delta_non_target:.6g}", f"{r.epr:.6g}", f"{r.median_epr:.6g}"] for r in rows],
    )
    for c in maps:
        print(f"concept {c}")
        print("  alpha " + " ".join(f"k={k:<6}" for k in args.ks))
        for a in args.alphas:
            med = [next(r.median_epr for r in rows if r.concept == c and r.alpha == a and r.k == k) for k in args.ks]
            print(f"  {a:<5g} " + " ".join(f"{m:<8.3f}" for m in med))
    print("median over concepts at k=1:", np.round([np.median([r.median_epr for r in rows if r.alpha == a and r.k == 1]) for a in args.alphas], 3))


if __name__ == "__main__":
    main()
