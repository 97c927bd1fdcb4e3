"""Spread of the random-direction baseline across independent draws.

Prints the per-draw median EPR next to the concept map's, plus the pooled
median the eval stage reports.

    python scripts/random_baseline_draws.py --run casl-out --draws 16
"""

import argparse
from pathlib import Path

import numpy as np

from casl.config import PipelineConfig, derive_seed, load
from casl.data import classify
from casl.diffusion import ddim_invert
from casl.evaluation import baseline_random_direction, live_latents, per_image_epr
from casl.pipeline import Artifacts, _held_out, _steer_cfg, cache_view, schedule_of
from casl.sae import encode
from casl.steer import reconstruct, steer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--draws", type=int, default=16)
    ap.add_argument("--n-images", type=int, default=32)
    args = ap.parse_args()

    cfg = load(args.config) if args.config else PipelineConfig()
    art = Artifacts(args.run)
    den, sae, clf, sch = art.denoiser, art.sae, art.classifier, schedule_of(cfg)
    x0 = art.corpus.images[_held_out(cfg, args.n_images)]
    grid = sch.grid(cfg.diffusion.grid_points)
    x_T = ddim_invert(den, sch, x0, grid).x_T
    rec = classify(clf, reconstruct(den, x0, sch, cfg.diffusion.grid_points, x_T))

    cache, _ = cache_view(art)
    held = cache.subset(np.arange(cfg.sae.n_train, cfg.sae.n_train + cfg.sae.n_heldout))
    z_mean = np.mean([encode(sae, held.acts[:, j], t).reshape(-1, sae.K).mean(axis=0) for j, t in enumerate(held.timesteps)], axis=0)
    live = live_latents(z_mean, cfg.sae.tau)

    for c in art.concepts():
        scfg = _steer_cfg(cfg, c)
        res = steer(den, sae, art.concept(c), x0, scfg, sch, x_T=x_T)
        casl = np.median(per_image_epr(rec, classify(clf, res.steered), c))
        per_draw = []
        for d in range(args.draws):
            rnd = baseline_random_direction(den, sae, art.concept(c), x0, scfg, sch, derive_seed(cfg.seed, 7, c, d), live, x_T, res.trace)
            per_draw.append(per_image_epr(rec, classify(clf, rnd.steered), c))
        meds = np.array([np.median(v) for v in per_draw])
        pooled = np.median(np.concatenate(per_draw))
        print(
            f"concept {c}: casl={casl:.3f}  random pooled={pooled:.3f}  per-draw min/median/max="
            f"{meds.min():.3f}/{np.median(meds):.3f}/{meds.max():.3f}  share of draws within 1.5x of casl: {np.mean(meds * 1.5 > casl):.2f}"
        )


if __name__ == "__main__":
    main()
