import numpy as np
import pytest

from casl.align import AlignData, ConceptMap, direction, select_topk, stage2_loss, train_concept
from casl.data import AttributeClassifier
from casl.diffusion import ddim_invert, window
from casl.errors import ConfigurationError, ContractError, DimensionError
from casl.numerics import ParamStore, grad_check
from casl.sae import encode


def _map(W, b):
    return ConceptMap(np.array(W, dtype=float), np.array(b, dtype=float), 0)


def test_direction_examples():
    z = np.random.default_rng(0).uniform(0, 1, (5, 4))
    assert not direction(_map(np.zeros((3, 4)), np.zeros(3)), z).any()
    assert direction(_map([[1.0, -1.0]], [0.5]), np.array([[2.0, 1.0]])).tolist() == [[1.5]]
    m = _map(np.random.default_rng(1).normal(size=(3, 4)), np.zeros(3))
    np.testing.assert_allclose(direction(m, 2 * z), 2 * direction(m, z), rtol=1e-14)
    with pytest.raises(DimensionError):
        direction(m, np.zeros((1, 5)))


def test_select_topk_examples():
    norms = np.array([0.1, 0.9, 0.5])
    m = _map(np.vstack([norms, np.zeros(3)]), [0.0, 0.0])
    assert sorted(select_topk(m, 2)) == [1, 2]
    assert sorted(select_topk(m, 3)) == [0, 1, 2]
    W = np.zeros((2, 10))
    W[0, 3] = W[1, 7] = 1.0
    assert select_topk(_map(W, [0, 0]), 1).tolist() == [3]
    with pytest.raises(ContractError):
        select_topk(m, 0)
    with pytest.raises(ContractError):
        select_topk(m, 4)


def test_select_topk_abs_mode():
    m = _map([[0.2, -0.7, 0.1]], [0.0])
    assert select_topk(m, 1, mode="abs").tolist() == [1]
    with pytest.raises(ContractError):
        select_topk(_map(np.ones((2, 3)), [0, 0]), 1, mode="abs")


def _align_data(tiny, images):
    inv = ddim_invert(tiny.den, tiny.schedule, images, tiny.grid, t_edit=10)
    ts = window(tiny.grid, 10)
    return AlignData(images, np.stack([inv.state_at(int(t)) for t in ts], axis=1), ts)


def _sae_for_window(tiny):
    from casl.sae import SaeModel

    sae = SaeModel(8, 2, window(tiny.grid, 10), seed=1)
    sae.params["b_lat"][...] = np.abs(sae.params["b_lat"]) + 0.1  # keep codes alive
    return sae


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stage2_gradient(tiny, seed):
    sae = _sae_for_window(tiny)
    data = _align_data(tiny, tiny.images[:2])
    cmap = ConceptMap.init(8, 16, 1, seed=seed)
    params = ParamStore({"W": cmap.W, "b": cmap.b})
    t = data.timesteps[[0, 1]]
    logit0 = tiny.clf.logits(data.x0)[:, 1]

    def loss(P):
        P.zero_grad()
        return stage2_loss(P, cmap, sae, tiny.den, tiny.clf, tiny.schedule, data.x0, data.states[[0, 1], [0, 1]], t, logit0)[0]

    assert grad_check(loss, params, max_entries=20, seed=seed) < 1e-4


def test_fidelity_only_training_shrinks_shift(tiny):
    sae = _sae_for_window(tiny)
    data = _align_data(tiny, tiny.images)
    init = ConceptMap.init(8, 16, 0, seed=0)
    m = train_concept(sae, tiny.den, tiny.clf, tiny.schedule, 0, data, lam_sem=0.0, epochs=150, lr=2e-3, batch=3)

    def mean_dh(cmap):
        norms = []
        for j, t in enumerate(data.timesteps):
            h, _ = tiny.den.encode(data.states[:, j], t)
            norms.append(np.linalg.norm(direction(cmap, encode(sae, h, t)), axis=(1, 2)))
        return np.mean(norms)

    assert mean_dh(m) < 0.1 * mean_dh(init)


def test_semantic_training_raises_heldout_logit(tiny):
    from casl.steer import SteerConfig, steer

    sae = _sae_for_window(tiny)
    imgs = np.random.default_rng(7).uniform(-1, 1, (24, 16, 16))
    data = _align_data(tiny, imgs[:16])
    m = train_concept(sae, tiny.den, tiny.clf, tiny.schedule, 2, data, epochs=20, lr=5e-3, batch=8)
    held = imgs[16:]
    res = steer(tiny.den, sae, m, held, SteerConfig(2, alpha=1.0, k=16, t_edit=10, grid_points=6, include_bias=True), tiny.schedule)
    gain = tiny.clf.logits(res.steered)[:, 2] - tiny.clf.logits(held)[:, 2]
    assert gain.mean() > 0


def test_component_mismatch_is_configuration_error(tiny):
    sae = _sae_for_window(tiny)
    data = _align_data(tiny, tiny.images[:2])
    with pytest.raises(ConfigurationError):
        train_concept(sae, tiny.den, AttributeClassifier(32, 4), tiny.schedule, 0, data, epochs=1)
    with pytest.raises(ConfigurationError):
        train_concept(sae, tiny.den, tiny.clf, tiny.schedule, 9, data, epochs=1)
    with pytest.raises(ConfigurationError):
        train_concept(sae, tiny.den, tiny.clf, tiny.schedule, 0, data, epochs=1, optimizer="lbfgs")
