"""Resumable stage runner.

Every stage writes into ``<out>/<stage>/``. The directory is assembled in a
hidden staging directory and renamed into place only after the stage has
finished, so an interrupted stage never leaves files under the final name.
Each stage directory carries ``manifest.json`` with the hash of the config
sections the stage depends on, the digests of its upstream stages and the
FNV-1a 64 hash of every artifact file.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import ckpt
from .align import AlignData, ConceptMap, select_topk, train_concept
from .config import PipelineConfig, derive_seed, section_hash, to_dict
from .data import ATTRIBUTE_NAMES, AttributeClassifier, Corpus, classify, generate_corpus, heldout_accuracy, split_indices, train_classifier
from .diffusion import Denoiser, DenoiserConfig, DiffusionSchedule, ddim_invert, noise_prediction_mse, train_backbone, window
from .errors import ConfigurationError, LockError, MissingArtifactError, StaleArtifactError
from .evaluation import (
    EPR_COLUMNS,
    PROBE_COLUMNS,
    balanced_indices,
    baseline_random_direction,
    epr,
    latent_features,
    live_latents,
    per_image_epr,
    sweep,
    train_probe,
    write_csv,
)
from .sae import ActivationCache, SaeModel, encode, evaluate, train_sae
from .steer import SteerConfig, reconstruct, steer

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-clf", "train-backbone", "cache-acts", "train-sae", "align", "steer", "eval")

UPSTREAM = {
    "gen-data": (),
    "train-clf": ("gen-data",),
    "train-backbone": ("gen-data",),
    "cache-acts": ("gen-data", "train-backbone"),
    "train-sae": ("cache-acts",),
    "align": ("gen-data", "train-clf", "train-backbone", "cache-acts", "train-sae"),
    "steer": ("gen-data", "train-clf", "train-backbone", "train-sae", "align"),
    "eval": ("gen-data", "train-clf", "train-backbone", "cache-acts", "train-sae", "align"),
}

SECTIONS = {
    "gen-data": ("data",),
    "train-clf": ("classifier",),
    "train-backbone": ("diffusion",),
    "cache-acts": ("cache",),
    "train-sae": ("sae",),
    "align": ("align",),
    "steer": ("steer",),
    "eval": ("eval", "steer"),
}

MANIFEST = "manifest.json"
STAGE_FORMAT = "casl-stage-v1"
LOCK = ".casl.lock"


# ---------------------------------------------------------------- workspace


class Workspace:
    def __init__(self, out):
        self.out = Path(out)

    def dir(self, stage: str) -> Path:
        return self.out / stage

    def manifest(self, stage: str) -> dict | None:
        path = self.dir(stage) / MANIFEST
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    def digest(self, stage: str) -> str:
        m = self.manifest(stage)
        if m is None:
            raise MissingArtifactError(stage)
        return _digest(m["artifacts"])

    def stem(self, stage: str, name: str) -> Path:
        return self.dir(stage) / name


def _digest(artifacts: dict) -> str:
    return ckpt.hex64(ckpt.fnv1a64(json.dumps(artifacts, sort_keys=True).encode("utf-8")))


def stage_status(ws: Workspace, cfg: PipelineConfig, stage: str) -> tuple[str, str]:
    """``("ok" | "missing" | "stale", detail)`` for one stage's artifacts."""
    m = ws.manifest(stage)
    if m is None:
        return "missing", "no manifest"
    for rel, h in m["artifacts"].items():
        path = ws.dir(stage) / rel
        if not path.exists():
            return "missing", f"{rel} is gone"
        if ckpt.file_hash(path) != h:
            return "stale", f"{rel} changed on disk"
    if m["config_hash"] != section_hash(cfg, *SECTIONS[stage]):
        return "stale", "configuration changed since this stage ran"
    for up in UPSTREAM[stage]:
        um = ws.manifest(up)
        if um is None or _digest(um["artifacts"]) != m["upstream"].get(up):
            return "stale", f"upstream stage '{up}' was rebuilt"
    return "ok", ""


@contextmanager
def lock(out: Path):
    """Advisory lock against concurrent runs on one output directory."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError, PermissionError, OSError):
                log.warning("removing stale lock %s", path)
                path.unlink(missing_ok=True)
                continue
            raise LockError(f"{out} is locked by running process {pid}") from None
    else:
        raise LockError(f"could not acquire {path}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def run(cfg: PipelineConfig, stage: str, out=None, force: bool = False) -> dict[str, str]:
    """Run ``stage`` (or every stage for ``"all"``); returns ``{stage: "ran" | "up-to-date"}``."""
    if stage != "all" and stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}; choose from {', '.join(STAGES + ('all',))}")
    ws = Workspace(out if out is not None else cfg.out)
    todo = STAGES if stage == "all" else (stage,)
    done = {}
    with lock(ws.out):
        for s in todo:
            done[s] = _run_one(cfg, ws, s, force)
    return done


def _run_one(cfg: PipelineConfig, ws: Workspace, stage: str, force: bool) -> str:
    for up in UPSTREAM[stage]:
        state, detail = stage_status(ws, cfg, up)
        if state == "missing":
            raise MissingArtifactError(up, detail)
        if state == "stale":
            raise StaleArtifactError(f"stage '{up}' is stale ({detail}); rerun it with --force")
    state, detail = stage_status(ws, cfg, stage)
    if state == "ok" and not force:
        log.info("%s: up-to-date", stage)
        return "up-to-date"
    if state == "stale" and not force:
        raise StaleArtifactError(f"stage '{stage}' is stale ({detail}); rerun with --force to rebuild")
    log.info("%s: running", stage)
    ws.out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{stage}.", dir=ws.out))
    try:
        meta = RUNNERS[stage](cfg, ws, tmp) or {}
        artifacts = {
            str(p.relative_to(tmp)): ckpt.file_hash(p) for p in sorted(tmp.rglob("*")) if p.is_file()
        }
        manifest = {
            "format": STAGE_FORMAT,
            "stage": stage,
            "config_hash": section_hash(cfg, *SECTIONS[stage]),
            "config": {s: to_dict(getattr(cfg, s)) for s in SECTIONS[stage]},
            "seed": cfg.seed,
            "upstream": {up: ws.digest(up) for up in UPSTREAM[stage]},
            "artifacts": artifacts,
            "meta": meta,
        }
        ckpt.atomic_write_text(tmp / MANIFEST, ckpt.dump_json(manifest))
        final = ws.dir(stage)
        old = None
        if final.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{stage}.old.", dir=ws.out))
            os.replace(final, old / stage)
        os.replace(tmp, final)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return "ran"


# ---------------------------------------------------------------- (de)serialisation


def schedule_of(cfg: PipelineConfig) -> DiffusionSchedule:
    d = cfg.diffusion
    return DiffusionSchedule(d.T, d.beta_start, d.beta_end)


def save_corpus(stem, corpus: Corpus, meta=None) -> str:
    return ckpt.save(stem, {"images": corpus.images, "labels": corpus.labels, "factors": corpus.factors}, meta)


def load_corpus(stem) -> Corpus:
    a, _ = ckpt.load(stem)
    return Corpus(a["images"], a["labels"].astype(np.int8), a["factors"])


def save_classifier(stem, clf: AttributeClassifier, meta=None) -> str:
    m = {"image_size": clf.image_size, "n_attributes": clf.n_attributes, "seed": clf.seed, "widths": list(clf.widths), **(meta or {})}
    return ckpt.save(stem, clf.params.params, m)


def load_classifier(stem) -> AttributeClassifier:
    a, m = ckpt.load(stem)
    clf = AttributeClassifier(m["image_size"], m["n_attributes"], m["seed"], tuple(m["widths"]))
    _fill(clf.params, a)
    clf.artifact_id = ckpt.payload_hash(stem)
    return clf


def save_denoiser(stem, den: Denoiser, meta=None) -> str:
    m = {"config": dataclasses.asdict(den.cfg), **(meta or {})}
    return ckpt.save(stem, den.params.params, m)


def load_denoiser(stem) -> Denoiser:
    a, m = ckpt.load(stem)
    c = m["config"]
    cfg = DenoiserConfig(**{**c, "enc_widths": tuple(c["enc_widths"]), "dec_widths": tuple(c["dec_widths"])})
    den = Denoiser(cfg)
    _fill(den.params, a)
    den.artifact_id = ckpt.payload_hash(stem)
    return den


def save_sae(stem, sae: SaeModel, meta=None) -> str:
    m = {
        "channels": sae.channels,
        "expansion": sae.expansion,
        "timesteps": list(sae.timesteps),
        "use_timestep_embedding": sae.use_timestep_embedding,
        **(meta or {}),
    }
    return ckpt.save(stem, sae.params.params, m)


def load_sae(stem) -> SaeModel:
    a, m = ckpt.load(stem)
    sae = SaeModel(m["channels"], m["expansion"], m["timesteps"], use_timestep_embedding=m["use_timestep_embedding"])
    _fill(sae.params, a)
    sae.artifact_id = ckpt.payload_hash(stem)
    return sae


def save_concept(stem, cmap: ConceptMap) -> str:
    meta = {
        "concept_id": cmap.concept,
        "sae_id": cmap.refs.get("sae_id"),
        "denoiser_id": cmap.refs.get("denoiser_id"),
        "classifier_id": cmap.refs.get("classifier_id"),
        "lambda_sem": cmap.lam_sem,
        "lambda_recon": cmap.lam_recon,
        "margin": cmap.margin,
    }
    return ckpt.save(stem, {"W": cmap.W, "b": cmap.b}, meta)


def load_concept(stem) -> ConceptMap:
    a, m = ckpt.load(stem)
    refs = {k: m[k] for k in ("sae_id", "denoiser_id", "classifier_id") if m.get(k)}
    return ConceptMap(a["W"], a["b"], m["concept_id"], m["lambda_sem"], m["lambda_recon"], m["margin"], refs)


def _fill(store, arrays: dict) -> None:
    if set(store.names()) != set(arrays):
        raise ConfigurationError(f"checkpoint entries {sorted(arrays)} do not match model parameters {store.names()}")
    for k, v in arrays.items():
        if store[k].shape != v.shape:
            raise ConfigurationError(f"checkpoint entry {k!r} has shape {v.shape}, model expects {store[k].shape}")
        store[k][...] = v


class Artifacts:
    """Lazy loader over a finished workspace."""

    def __init__(self, ws: Workspace | str | Path):
        self.ws = ws if isinstance(ws, Workspace) else Workspace(ws)
        self._cache = {}

    def _need(self, stage: str, name: str) -> Path:
        stem = self.ws.stem(stage, name)
        if not ckpt.exists(stem):
            raise MissingArtifactError(stage, f"{stem}.json not found")
        return stem

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def corpus(self) -> Corpus:
        return self._get("corpus", lambda: load_corpus(self._need("gen-data", "corpus")))

    @property
    def classifier(self) -> AttributeClassifier:
        return self._get("clf", lambda: load_classifier(self._need("train-clf", "classifier")))

    @property
    def classifier_b(self) -> AttributeClassifier:
        return self._get("clf_b", lambda: load_classifier(self._need("train-clf", "classifier_b")))

    @property
    def denoiser(self) -> Denoiser:
        return self._get("den", lambda: load_denoiser(self._need("train-backbone", "denoiser")))

    @property
    def cache(self) -> dict:
        return self._get("acts", lambda: ckpt.load(self._need("cache-acts", "activations")))

    @property
    def sae(self) -> SaeModel:
        return self._get("sae", lambda: load_sae(self._need("train-sae", "sae")))

    def concept(self, c: int) -> ConceptMap:
        return self._get(("map", c), lambda: load_concept(self._need("align", f"concept_{c}")))

    def concepts(self) -> list[int]:
        m = self.ws.manifest("align")
        if m is None:
            raise MissingArtifactError("align")
        return list(m["meta"]["concepts"])


# ---------------------------------------------------------------- stages


def _held_out(cfg: PipelineConfig, n: int) -> np.ndarray:
    _, te = split_indices(cfg.data.n_images)
    if n > len(te):
        raise ConfigurationError(f"asked for {n} held-out images, only {len(te)} exist")
    return te[:n]


def stage_gen_data(cfg: PipelineConfig, ws: Workspace, tmp: Path) -> dict:
    corpus = generate_corpus(cfg.data.n_images, derive_seed(cfg.seed, 0), cfg.data.image_size)
    save_corpus(tmp / "corpus", corpus)
    rates = corpus.labels.mean(axis=0)
    write_csv(tmp / "label_rates.csv", ("attribute", "positive_rate"), [[n, repr(float(r))] for n, r in zip(ATTRIBUTE_NAMES, rates)])
    return {"positive_rates": rates.tolist()}


def stage_train_clf(cfg: PipelineConfig, ws: Workspace, tmp: Path) -> dict:
    corpus = Artifacts(ws).corpus
    c = cfg.classifier
    rows = []
    meta = {}
    for tag, key in (("classifier", 0), ("classifier_b", 1)):
        clf = train_classifier(corpus, c.epochs, c.lr, derive_seed(cfg.seed, 1, key), c.batch, c.min_accuracy)
        acc = heldout_accuracy(clf, corpus)
        save_classifier(tmp / tag, clf, {"heldout_balanced_accuracy": acc.tolist()})
        rows += [[tag, n, repr(float(a))] for n, a in zip(ATTRIBUTE_NAMES, acc)]
        meta[tag] = acc.tolist()
    write_csv(tmp / "accuracy.csv", ("classifier", "attribute", "balanced_accuracy"), rows)
    return meta


def stage_train_backbone(cfg: PipelineConfig, ws: Workspace, tmp: Path) -> dict:
    corpus = Artifacts(ws).corpus
    d = cfg.diffusion
    sch = schedule_of(cfg)
    tr, te = split_indices(len(corpus))
    dcfg = DenoiserConfig(image_size=cfg.data.image_size, bottleneck_size=d.bottleneck_size, channels=d.channels, T=d.T)
    den = train_backbone(corpus.images[tr], sch, d.epochs, d.lr, derive_seed(cfg.seed, 2), d.batch, dcfg)
    mse = noise_prediction_mse(den, sch, corpus.images[te], seed=derive_seed(cfg.seed, 2, 1))
    save_denoiser(tmp / "denoiser", den, {"heldout_mse": mse})
    write_csv(tmp / "metrics.csv", ("heldout_mse", "zero_predictor_mse", "ratio"), [[repr(mse), "1.0", repr(mse)]])
    return {"heldout_mse": mse}


def stage_cache_acts(cfg: PipelineConfig, ws: Workspace, tmp: Path, batch: int = 100) -> dict:
    art = Artifacts(ws)
    corpus, den = art.corpus, art.denoiser
    sch = schedule_of(cfg)
    d = cfg.diffusion
    tr, _ = split_indices(len(corpus))
    ids = tr[: cfg.cache.n_images]
    grid = sch.grid(d.grid_points)
    ts = window(grid, d.t_edit)
    if len(ts) == 0:
        raise ConfigurationError(f"editing window [{d.t_edit}, {d.T - 1}] contains no grid timestep")
    acts = np.empty((len(ids), len(ts), den.n_tokens, den.channels))
    n_st = cfg.cache.n_align_states
    states = np.empty((n_st, len(ts), cfg.data.image_size, cfg.data.image_size))
    for s in range(0, len(ids), batch):
        inv = ddim_invert(den, sch, corpus.images[ids[s : s + batch]], grid, t_edit=d.t_edit)
        for j, t in enumerate(ts):
            acts[s : s + batch, j] = inv.activations[int(t)]
            if s < n_st:
                states[s : min(s + batch, n_st), j] = inv.state_at(int(t))[: n_st - s]
        log.info("cache-acts %d/%d", min(s + batch, len(ids)), len(ids))
    ckpt.save(
        tmp / "activations",
        {"acts": acts, "image_ids": ids.astype(np.float64), "timesteps": ts.astype(np.float64), "states": states},
        {"grid": grid.tolist(), "t_edit": d.t_edit},
    )
    return {"n_images": len(ids), "timesteps": ts.tolist()}


def cache_view(art: Artifacts) -> tuple[ActivationCache, np.ndarray]:
    a, _ = art.cache
    ids = a["image_ids"].astype(np.int64)
    return ActivationCache(a["acts"], a["timesteps"].astype(np.int64), ids, art.corpus.labels[ids]), a["states"]


def stage_train_sae(cfg: PipelineConfig, ws: Workspace, tmp: Path) -> dict:
    art = Artifacts(ws)
    cache, _ = cache_view(art)
    s = cfg.sae
    train = cache.subset(np.arange(s.n_train))
    held = cache.subset(np.arange(s.n_train, s.n_train + s.n_heldout))
    res = train_sae(
        train, s.expansion, s.lam, s.epochs, s.lr, derive_seed(cfg.seed, 4), s.batch_maps, held,
        use_timestep_embedding=s.use_timestep_embedding,
    )
    st = res.heldout
    save_sae(tmp / "sae", res.model, {"heldout": dataclasses.asdict(st)})
    write_csv(tmp / "sae.csv", ("epoch", "mse", "cosine", "dar"), [[e, repr(m), repr(c), repr(d)] for e, m, c, d in res.history])
    write_csv(tmp / "heldout.csv", ("mse", "cosine", "dar"), [[repr(st.mse), repr(st.cosine), repr(st.dar)]])
    return {"heldout": dataclasses.asdict(st)}


def stage_align(cfg: PipelineConfig, ws: Workspace, tmp: Path) -> dict:
    art = Artifacts(ws)
    cache, states = cache_view(art)
    corpus, clf, den, sae = art.corpus, art.classifier, art.denoiser, art.sae
    a = cfg.align
    data = AlignData(corpus.images[cache.image_ids[: len(states)]], states, cache.timesteps)
    refs = {"sae_id": sae.artifact_id, "denoiser_id": den.artifact_id, "classifier_id": clf.artifact_id}
    rows = []
    for c in a.concepts:
        cmap = train_concept(
            sae, den, clf, schedule_of(cfg), c, data, a.lam_sem, a.lam_recon, a.margin, a.epochs, a.lr,
            derive_seed(cfg.seed, 5, c), a.batch, refs,
        )
        save_concept(tmp / f"concept_{c}", cmap)
        top = select_topk(cmap, min(16, cmap.K))
        norms = np.linalg.norm(cmap.W, axis=0)
        rows.append([c, ATTRIBUTE_NAMES[c], " ".join(map(str, top)), repr(float(norms[top[0]])), repr(float(norms.mean()))])
    write_csv(tmp / "align.csv", ("concept", "attribute", "top16", "top1_norm", "mean_norm"), rows)
    return {"concepts": list(a.concepts)}


def _steer_cfg(cfg: PipelineConfig, concept: int, **kw) -> SteerConfig:
    s = cfg.steer
    base = dict(
        concept=concept, alpha=s.alpha, k=s.k, gamma=s.gamma, t_edit=cfg.diffusion.t_edit,
        grid_points=cfg.diffusion.grid_points, include_bias=s.include_bias, symmetric=s.symmetric,
    )
    base.update(kw)
    return SteerConfig(**base)


def trace_rows(concept: int, grid: np.ndarray, t_edit: int, trace: np.ndarray) -> list[list]:
    ts = grid[:-1][grid[:-1] >= t_edit]
    return [[concept, i, step, int(ts[step]), repr(float(trace[step, i]))] for i in range(trace.shape[1]) for step in range(trace.shape[0])]


TRACE_COLUMNS = ("concept", "image", "step", "t", "norm")


def stage_steer(cfg: PipelineConfig, ws: Workspace, tmp: Path) -> dict:
    art = Artifacts(ws)
    corpus, den, sae = art.corpus, art.denoiser, art.sae
    sch = schedule_of(cfg)
    ids = _held_out(cfg, cfg.steer.n_images)
    x0 = corpus.images[ids]
    grid = sch.grid(cfg.diffusion.grid_points)
    x_T = ddim_invert(den, sch, x0, grid).x_T
    out = {"original": x0}
    rows = []
    for c in art.concepts():
        res = steer(den, sae, art.concept(c), x0, _steer_cfg(cfg, c), sch, x_T=x_T)
        out[f"steered_{c}"] = res.steered
        rows += trace_rows(c, grid, cfg.diffusion.t_edit, res.trace)
        for i, idx in enumerate(ids):
            ckpt.write_pgm(tmp / "images" / f"img{idx:04d}_orig.pgm", x0[i])
            ckpt.write_pgm(tmp / "images" / f"img{idx:04d}_c{c}.pgm", res.steered[i])
    ckpt.save(tmp / "steered", out, {"image_ids": ids.tolist()})
    write_csv(tmp / "trace.csv", TRACE_COLUMNS, rows)
    return {"image_ids": ids.tolist()}


BASELINE_COLUMNS = ("concept", "method", "n", "delta_target", "delta_non_target", "epr", "median_epr")


def stage_eval(cfg: PipelineConfig, ws: Workspace, tmp: Path) -> dict:
    art = Artifacts(ws)
    corpus, clf, clf_b, den, sae = art.corpus, art.classifier, art.classifier_b, art.denoiser, art.sae
    sch = schedule_of(cfg)
    e = cfg.eval
    concepts = art.concepts()
    maps = {c: art.concept(c) for c in concepts}
    ids = _held_out(cfg, e.n_images)
    x0 = corpus.images[ids]
    grid = sch.grid(cfg.diffusion.grid_points)
    x_T = ddim_invert(den, sch, x0, grid).x_T

    # alpha x k sweep
    rows = sweep(den, sae, maps, clf, x0, sch, e.alphas, e.ks, cfg.steer.gamma, cfg.diffusion.t_edit, cfg.diffusion.grid_points, x_T)
    write_csv(tmp / "epr.csv", EPR_COLUMNS, [r.csv_row() for r in rows])
    write_csv(tmp / "sweep_median.csv", ("concept", "alpha", "k", "median_epr"), [[r.concept, repr(r.alpha), r.k, repr(r.median_epr)] for r in rows])

    # baselines at the default steering config, and classifier sensitivity
    cache, _ = cache_view(art)
    held = cache.subset(np.arange(cfg.sae.n_train, cfg.sae.n_train + cfg.sae.n_heldout))
    z_mean = np.mean([encode(sae, held.acts[:, j], t).reshape(-1, sae.K).mean(axis=0) for j, t in enumerate(held.timesteps)], axis=0)
    live = live_latents(z_mean, cfg.sae.tau)
    rec = reconstruct(den, x0, sch, cfg.diffusion.grid_points, x_T)
    base_a = classify(clf, x0)
    rec_a, rec_b = classify(clf, rec), classify(clf_b, rec)
    brows, srows, trows = [], [], []
    for c in concepts:
        scfg = _steer_cfg(cfg, c)
        res = steer(den, sae, maps[c], x0, scfg, sch, x_T=x_T)
        casl_ed = classify(clf, res.steered)
        # the random baseline pools every image of every draw
        rnd_ed, rnd_trace = [], None
        for d in range(e.random_draws):
            rnd = baseline_random_direction(den, sae, maps[c], x0, scfg, sch, derive_seed(cfg.seed, 7, c, d), live, x_T, res.trace)
            rnd_ed.append(classify(clf, rnd.steered))
            rnd_trace = rnd.trace if rnd_trace is None else rnd_trace
        # edits are scored against the unshifted reconstruction; the reconstruction itself against the input
        for method, ref, ed in (
            ("casl", rec_a, casl_ed),
            ("random", np.tile(rec_a, (e.random_draws, 1)), np.concatenate(rnd_ed)),
            ("reconstruction", base_a, rec_a),
        ):
            r = epr(ref, ed, c)
            med = float(np.median(per_image_epr(ref, ed, c)))
            brows.append([c, method, r.n, repr(r.delta_target), repr(r.delta_non_target), repr(r.epr), repr(med)])
        trows += [[c, "casl", *row[1:]] for row in trace_rows(c, grid, cfg.diffusion.t_edit, res.trace)]
        trows += [[c, "random", *row[1:]] for row in trace_rows(c, grid, cfg.diffusion.t_edit, rnd_trace)]
        for tag, cl, base in (("classifier", clf, rec_a), ("classifier_b", clf_b, rec_b)):
            ed = classify(cl, res.steered)
            r = epr(base, ed, c)
            srows.append([c, tag, repr(r.epr), repr(float(np.median(per_image_epr(base, ed, c))))])
    write_csv(tmp / "baselines.csv", BASELINE_COLUMNS, brows)
    write_csv(tmp / "trace.csv", ("concept", "method", "image", "step", "t", "norm"), trows)
    write_csv(tmp / "sensitivity.csv", ("concept", "classifier", "epr", "median_epr"), srows)

    # linear probes on pooled SAE codes
    feats = latent_features(sae, cache.acts, cache.timesteps, e.probe_pooling)
    prows, rrows = [], []
    for c in concepts:
        sel = balanced_indices(cache.labels[:, c], e.probe_per_class, derive_seed(cfg.seed, 8, c))
        y = cache.labels[sel, c]
        pseed = derive_seed(cfg.seed, 9, c)
        for k in e.probe_ks:
            p = train_probe(feats[sel], y, c, select_topk(maps[c], k), pseed)
            prows.append([c, k, repr(p.accuracy), p.n_train, p.n_test, pseed])
        rng = np.random.default_rng(derive_seed(cfg.seed, 10, c))
        for draw in range(e.probe_random_draws):
            for k in e.probe_ks:
                idx = np.sort(rng.choice(sae.K, size=k, replace=False))
                p = train_probe(feats[sel], y, c, idx, pseed)
                rrows.append([c, k, draw, repr(p.accuracy)])
    write_csv(tmp / "probe.csv", PROBE_COLUMNS, prows)
    write_csv(tmp / "probe_random.csv", ("concept", "k", "draw", "accuracy"), rrows)

    # SAE expansion / sparsity sweep
    n_sw = min(e.sae_sweep_images, cfg.sae.n_train)
    sw_train = cache.subset(np.arange(n_sw))
    sw_rows = []
    settings = [(g, e.sae_sweep_lam) for g in e.sae_sweep_expansions] + [(cfg.sae.expansion, lam) for lam in e.sae_sweep_lams]
    for g, lam in settings:
        r = train_sae(sw_train, g, lam, e.sae_sweep_epochs, cfg.sae.lr, derive_seed(cfg.seed, 11), cfg.sae.batch_maps, held, log_every=e.sae_sweep_epochs)
        st = r.heldout
        sw_rows.append([g, repr(float(lam)), repr(st.mse), repr(st.cosine), repr(st.dar)])
    write_csv(tmp / "sae_sweep.csv", ("expansion", "lam", "mse", "cosine", "dar"), sw_rows)
    return {"concepts": concepts, "n_images": len(ids), "live_latents": int(len(live))}


RUNNERS = {
    "gen-data": stage_gen_data,
    "train-clf": stage_train_clf,
    "train-backbone": stage_train_backbone,
    "cache-acts": stage_cache_acts,
    "train-sae": stage_train_sae,
    "align": stage_align,
    "steer": stage_steer,
    "eval": stage_eval,
}
