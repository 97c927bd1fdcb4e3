import json

import numpy as np
import pytest

from casl.align import ConceptMap
from casl.data import AttributeClassifier
from casl.diffusion import Denoiser, DenoiserConfig, DiffusionSchedule
from casl.sae import SaeModel

TINY_CONFIG = {
    "version": 1,
    "seed": 5,
    "data": {"n_images": 200},
    "classifier": {"epochs": 2, "min_accuracy": 0.0},
    "diffusion": {"epochs": 1, "grid_points": 10},
    "cache": {"n_images": 60, "n_align_states": 20},
    "sae": {"epochs": 2, "n_train": 32, "n_heldout": 16},
    "align": {"epochs": 1},
    "steer": {"n_images": 2},
    "eval": {
        "n_images": 4,
        "alphas": [0.0, 1.0],
        "ks": [1, 2],
        "probe_per_class": 20,
        "probe_ks": [1, 2],
        "probe_random_draws": 2,
        "sae_sweep_expansions": [2, 4],
        "sae_sweep_lams": [1.0],
        "sae_sweep_epochs": 1,
        "sae_sweep_images": 16,
    },
}


class Tiny:
    """Untrained 16x16 components; enough for algebraic invariants."""

    def __init__(self, seed=0):
        self.schedule = DiffusionSchedule(T=20)
        self.den = Denoiser(DenoiserConfig(image_size=16, bottleneck_size=4, channels=8, enc_widths=(8,), dec_widths=(8,), temb_dim=8, T=20), seed=seed)
        self.grid = self.schedule.grid(6)
        self.sae = SaeModel(8, 2, self.grid, seed=seed)
        self.sae.params["emb"][...] = np.random.default_rng(seed).normal(0, 0.1, self.sae.params["emb"].shape)
        self.clf = AttributeClassifier(16, 4, seed=seed)
        self.cmap = ConceptMap.init(8, 16, 0, seed=seed)
        self.images = np.random.default_rng(seed + 100).uniform(-1, 1, (3, 16, 16))


@pytest.fixture(scope="session")
def tiny():
    return Tiny()


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


# ---------------------------------------------------------------- full pipeline runs

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class Run:
    def __init__(self, out, seconds):
        self.out = out
        self.seconds = seconds


def _full_run(out):
    import time

    from casl.config import PipelineConfig, replace
    from casl.pipeline import run

    start = time.perf_counter()
    run(replace(PipelineConfig(), out=str(out)), "all")
    return Run(out, time.perf_counter() - start)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default-config pipeline, built once per session.

    ``CASL_RUN_DIR`` points at an existing complete run to reuse instead
    (its wall time is then unknown).
    """
    import os
    from pathlib import Path

    reuse = os.environ.get("CASL_RUN_DIR")
    if reuse:
        return Run(Path(reuse), None)
    return _full_run(tmp_path_factory.mktemp("default") / "run")


@pytest.fixture(scope="session")
def second_run(tmp_path_factory):
    return _full_run(tmp_path_factory.mktemp("second") / "run")
