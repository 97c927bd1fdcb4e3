"""End-to-end behaviour of components trained by the default pipeline."""

import numpy as np
import pytest

from casl.align import AlignData, ConceptMap, direction, stage2_loss, train_concept
from casl.config import PipelineConfig
from casl.data import classify
from casl.diffusion import ddim_invert, window
from casl.numerics import ParamStore
from casl.sae import encode
from casl.steer import reconstruct, steer

pytestmark = pytest.mark.slow
CFG = PipelineConfig()


@pytest.fixture(scope="module")
def trained(default_run):
    from casl.pipeline import Artifacts, _held_out, schedule_of

    art = Artifacts(default_run.out)
    sch = schedule_of(CFG)
    grid = sch.grid(CFG.diffusion.grid_points)
    ts = window(grid, CFG.diffusion.t_edit)
    held = art.corpus.images[_held_out(CFG, 32)]
    return art, sch, grid, ts, held


def _align_data(den, sch, grid, ts, images):
    inv = ddim_invert(den, sch, images, grid, t_edit=CFG.diffusion.t_edit)
    return AlignData(images, np.stack([inv.state_at(int(t)) for t in ts], axis=1), ts)


def _mean_dh(den, sae, cmap, data):
    out = []
    for j, t in enumerate(data.timesteps):
        h, _ = den.encode(data.states[:, j], t)
        out.append(np.linalg.norm(direction(cmap, encode(sae, h, t)), axis=(1, 2)).mean())
    return float(np.mean(out))


def test_classifier_scores_positive_exemplars(trained):
    art = trained[0]
    c = art.corpus
    logits = classify(art.classifier, c.images[:400])
    for j in range(c.n_attributes):
        assert np.median(logits[c.labels[:400, j] == 1, j]) > 0


def test_fidelity_only_map_shrinks_shift(trained):
    art, sch, grid, ts, _ = trained
    den, sae, clf = art.denoiser, art.sae, art.classifier
    from casl.pipeline import cache_view

    cache, states = cache_view(art)
    data = AlignData(art.corpus.images[cache.image_ids[: len(states)]], states, cache.timesteps)
    init = ConceptMap.init(sae.channels, sae.K, 0, seed=0)
    m = train_concept(sae, den, clf, sch, 0, data, lam_sem=0.0, epochs=CFG.align.epochs, seed=0)
    before, after = _mean_dh(den, sae, init, data), _mean_dh(den, sae, m, data)
    assert after < 0.1 * before, f"mean |dh| {before:.3f} -> {after:.3f}"


def test_trained_maps_raise_heldout_target_logit(trained):
    art, sch, grid, ts, held = trained
    den, sae, clf = art.denoiser, art.sae, art.classifier
    data = _align_data(den, sch, grid, ts, held)
    for c in art.concepts():
        cmap = art.concept(c)
        params = ParamStore({"W": cmap.W, "b": cmap.b})
        logit0 = clf.logits(held)[:, c]
        gains = [
            stage2_loss(params, cmap, sae, den, clf, sch, held, data.states[:, j], np.full(len(held), t), logit0, grad=False)[1]["gain"]
            for j, t in enumerate(ts)
        ]
        assert np.mean(gains) > 0, (c, gains)


def test_steering_raises_target_logit_on_most_images(trained):
    from casl.pipeline import _steer_cfg

    art, sch, grid, _, held = trained
    den, sae, clf = art.denoiser, art.sae, art.classifier
    x_T = ddim_invert(den, sch, held, grid).x_T
    rec = classify(clf, reconstruct(den, held, sch, CFG.diffusion.grid_points, x_T))
    for c in art.concepts():
        res = steer(den, sae, art.concept(c), held, _steer_cfg(CFG, c), sch, x_T=x_T)
        frac = float(np.mean(classify(clf, res.steered)[:, c] > rec[:, c]))
        assert frac >= 0.7, (c, frac)
