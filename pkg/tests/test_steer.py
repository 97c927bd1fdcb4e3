import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casl.align import ConceptMap, direction
from casl.errors import ConfigurationError, ContractError, DimensionError
from casl.sae import SaeModel
from casl.steer import SteerConfig, concept_shift, coordinate, reconstruct, steer


def test_coordinate_examples():
    assert coordinate(2.0, [1], 3).tolist() == [0, 2, 0]
    assert not coordinate(0.0, [0, 2], 3).any()
    assert coordinate(1.0, range(4), 4).tolist() == [1, 1, 1, 1]
    with pytest.raises(ContractError):
        coordinate(1.0, [3], 3)


def test_concept_shift_examples():
    m = ConceptMap(np.array([[1.0, -1.0]]), np.array([0.7]), 0)
    z = np.array([[2.0, 1.0]])
    assert not concept_shift(m, z, np.zeros(2)).any()
    assert concept_shift(m, z, np.array([3.0, 0.0])).tolist() == [[6.0]]
    m0 = ConceptMap(m.W, np.zeros(1), 0)
    np.testing.assert_allclose(concept_shift(m, z, np.full(2, 2.5)), 2.5 * direction(m0, z))
    assert concept_shift(m, z, np.zeros(2), include_bias=True).tolist() == [[0.7]]
    with pytest.raises(DimensionError):
        concept_shift(m, z, np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_concept_shift_linear_in_coordinate(a, b):
    rng = np.random.default_rng(0)
    m = ConceptMap(rng.normal(size=(3, 5)), rng.normal(size=3), 0)
    z, c1, c2 = rng.uniform(0, 1, (4, 5)), rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(
        concept_shift(m, z, a * c1 + b * c2), a * concept_shift(m, z, c1) + b * concept_shift(m, z, c2), atol=1e-10
    )


def _cfg(**kw):
    return SteerConfig(concept=0, t_edit=10, grid_points=6, **kw)


def test_alpha_zero_is_reconstruction(tiny):
    res = steer(tiny.den, tiny.sae, tiny.cmap, tiny.images, _cfg(alpha=0.0), tiny.schedule)
    assert np.array_equal(res.steered, reconstruct(tiny.den, tiny.images, tiny.schedule, 6))
    assert not res.trace.any()


def test_gain_and_intensity_commute(tiny):
    a = steer(tiny.den, tiny.sae, tiny.cmap, tiny.images, _cfg(alpha=0.8, gamma=2.0, k=4), tiny.schedule, record=True)
    b = steer(tiny.den, tiny.sae, tiny.cmap, tiny.images, _cfg(alpha=1.6, gamma=1.0, k=4), tiny.schedule, record=True)
    for x, y in zip(a.trajectory, b.trajectory):
        assert np.max(np.abs(x - y)) < 1e-12


def test_shift_only_inside_window(tiny):
    res = steer(tiny.den, tiny.sae, tiny.cmap, tiny.images, _cfg(alpha=1.0, k=16), tiny.schedule)
    assert res.trace.shape == (int(np.sum(tiny.grid[:-1] >= 10)), 3)
    assert np.all(res.trace > 0)


def test_single_image_input(tiny):
    res = steer(tiny.den, tiny.sae, tiny.cmap, tiny.images[0], _cfg(alpha=1.0), tiny.schedule)
    assert res.steered.shape == (16, 16) and res.trace.ndim == 1


def test_inconsistent_components(tiny):
    bad = SaeModel(8, 3, tiny.grid)
    with pytest.raises(ConfigurationError):
        steer(tiny.den, bad, tiny.cmap, tiny.images, _cfg(), tiny.schedule)
    m = ConceptMap(tiny.cmap.W, tiny.cmap.b, 0, refs={"sae_id": "aaaa"})
    tiny.sae.artifact_id = "bbbb"
    try:
        with pytest.raises(ConfigurationError, match="aaaa"):
            steer(tiny.den, tiny.sae, m, tiny.images, _cfg(), tiny.schedule)
    finally:
        del tiny.sae.artifact_id


def test_config_validation(tiny):
    with pytest.raises(ContractError):
        steer(tiny.den, tiny.sae, tiny.cmap, tiny.images, _cfg(k=17), tiny.schedule)
    with pytest.raises(ContractError):
        steer(tiny.den, tiny.sae, tiny.cmap, tiny.images, _cfg(alpha=float("inf")), tiny.schedule)
