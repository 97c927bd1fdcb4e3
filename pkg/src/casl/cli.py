"""``casl`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 stage failure,
3 stale artifacts.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ckpt
from .config import PipelineConfig, load, replace
from .data import ATTRIBUTE_NAMES, classify
from .errors import ConfigurationError, LockError, MissingArtifactError, StaleArtifactError
from .evaluation import read_csv, write_csv
from .pipeline import STAGES, TRACE_COLUMNS, Artifacts, _steer_cfg, run, schedule_of, trace_rows
from .steer import steer

EXIT_OK, EXIT_USAGE, EXIT_FAILURE, EXIT_STALE = 0, 1, 2, 3

log = logging.getLogger("casl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="casl", description="Sparse-autoencoder concept steering on a toy diffusion model.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one pipeline stage or all of them")
    r.add_argument("--stage", required=True, choices=STAGES + ("all",))
    r.add_argument("--config", type=Path, help="JSON config (defaults built in)")
    r.add_argument("--out", type=Path, help="output directory (overrides the config)")
    r.add_argument("--seed", type=_u64, help="global seed (overrides the config)")
    r.add_argument("--force", action="store_true", help="rebuild stale stages instead of failing")

    rep = sub.add_parser("report", help="print summary tables of a finished run")
    rep.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("steer", help="steer PGM images with a trained concept map")
    s.add_argument("--run", type=Path, required=True, help="output directory of a finished pipeline run")
    s.add_argument("--concept", type=int, required=True)
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--topk", type=int, default=None)
    s.add_argument("--gamma", type=float, default=None)
    s.add_argument("--t-edit", type=int, default=None)
    s.add_argument("--in", dest="inp", type=Path, required=True, help="PGM file or directory of PGM files")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--config", type=Path)
    return p


class UsageError(Exception):
    pass


def _config(args) -> PipelineConfig:
    try:
        cfg = load(args.config) if getattr(args, "config", None) else PipelineConfig()
        kw = {}
        if getattr(args, "seed", None) is not None:
            kw["seed"] = args.seed
        if getattr(args, "out", None) is not None and args.command == "run":
            kw["out"] = str(args.out)
        return replace(cfg, **kw) if kw else cfg
    except (OSError, ConfigurationError) as e:
        raise UsageError(f"bad configuration: {e}") from None


def cmd_run(args) -> int:
    cfg = _config(args)
    done = run(cfg, args.stage, cfg.out, force=args.force)
    for stage, what in done.items():
        print(f"{stage}: {what}")
    return EXIT_OK


# ---------------------------------------------------------------- report


def _f(v, nd=3) -> str:
    return f"{float(v):.{nd}f}"


def _table(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([title, line(header), line(["-" * w for w in widths]), *map(line, rows), ""])


def report_text(out: Path) -> str:
    ev = Path(out) / "eval"
    needed = ["baselines.csv", "probe.csv", "probe_random.csv", "sae_sweep.csv", "sensitivity.csv", "epr.csv"]
    missing = [n for n in needed if not (ev / n).exists()]
    if missing:
        raise MissingArtifactError("eval", f"{ev} lacks {', '.join(missing)}")
    base = read_csv(ev / "baselines.csv")
    concepts = sorted({int(r["concept"]) for r in base})
    parts = []

    rows = []
    for c in concepts:
        by = {r["method"]: r for r in base if int(r["concept"]) == c}
        cs = by["casl"]
        rows.append(
            [ATTRIBUTE_NAMES[c], _f(cs["delta_target"]), _f(cs["delta_non_target"]), _f(cs["epr"]), _f(cs["median_epr"]),
             _f(by["random"]["median_epr"]), _f(by["reconstruction"]["median_epr"])]
        )
    parts.append(_table("Editing precision (default alpha, k)", ["concept", "d_target", "d_non_target", "EPR", "median", "random", "recon"], rows))

    probe = read_csv(ev / "probe.csv")
    rnd = read_csv(ev / "probe_random.csv")
    ks = sorted({int(r["k"]) for r in probe})
    rows = []
    for c in concepts:
        acc = {int(r["k"]): float(r["accuracy"]) for r in probe if int(r["concept"]) == c}
        ra = {k: np.median([float(r["accuracy"]) for r in rnd if int(r["concept"]) == c and int(r["k"]) == k]) for k in ks}
        rows.append([ATTRIBUTE_NAMES[c], *(_f(acc[k]) for k in ks), *(_f(ra[k]) for k in ks)])
    parts.append(_table("Probe accuracy (top-k vs random-k median)", ["concept", *(f"top{k}" for k in ks), *(f"rand{k}" for k in ks)], rows))

    sw = read_csv(ev / "sae_sweep.csv")
    rows = [[r["expansion"], _f(r["lam"], 1), _f(r["mse"], 5), _f(r["cosine"], 4), _f(r["dar"], 4)] for r in sw]
    parts.append(_table("SAE sweep (held-out)", ["expansion", "lambda", "mse", "cosine", "dar"], rows))

    sens = read_csv(ev / "sensitivity.csv")
    rows = [[ATTRIBUTE_NAMES[int(r["concept"])], r["classifier"], _f(r["epr"]), _f(r["median_epr"])] for r in sens]
    parts.append(_table("EPR under two classifiers", ["concept", "classifier", "EPR", "median"], rows))
    by_clf: dict[str, list[float]] = {}
    for r in sens:
        by_clf.setdefault(r["classifier"], []).append(float(r["epr"]))
    if len(by_clf) == 2 and len(concepts) > 1:
        a, b = (np.argsort(np.argsort(v)) for v in by_clf.values())
        rho = float(np.corrcoef(a, b)[0, 1])
        parts.append(f"concept rank agreement between classifiers (Spearman): {_f(rho, 2)}\n")
    return "\n".join(parts)


def cmd_report(args) -> int:
    sys.stdout.write(report_text(args.out))
    return EXIT_OK


# ---------------------------------------------------------------- steer


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.pgm"))
        if not files:
            raise ConfigurationError(f"no .pgm files in {path}")
        return files
    if not path.exists():
        raise ConfigurationError(f"{path} does not exist")
    return [path]


def cmd_steer(args) -> int:
    cfg = _config(args)
    art = Artifacts(args.run)
    den, sae, clf = art.denoiser, art.sae, art.classifier
    cmap = art.concept(args.concept)
    kw = {}
    for flag, key in ((args.alpha, "alpha"), (args.topk, "k"), (args.gamma, "gamma"), (args.t_edit, "t_edit")):
        if flag is not None:
            kw[key] = flag
    scfg = _steer_cfg(cfg, args.concept, **kw)
    files = _inputs(args.inp)
    x0 = np.stack([ckpt.read_pgm(f) for f in files])
    sch = schedule_of(cfg)
    res = steer(den, sae, cmap, x0, scfg, sch)
    args.out.mkdir(parents=True, exist_ok=True)
    before, after = classify(clf, x0), classify(clf, res.steered)
    rows = []
    for i, f in enumerate(files):
        ckpt.write_pgm(args.out / f"{f.stem}_orig.pgm", x0[i])
        ckpt.write_pgm(args.out / f"{f.stem}_steered.pgm", res.steered[i])
        rows.append([f.name, *(repr(float(v)) for v in before[i]), *(repr(float(v)) for v in after[i])])
    grid = sch.grid(scfg.grid_points)
    write_csv(args.out / "trace.csv", TRACE_COLUMNS, trace_rows(args.concept, grid, scfg.t_edit, res.trace))
    write_csv(
        args.out / "logits.csv",
        ("image", *(f"{n}_before" for n in ATTRIBUTE_NAMES), *(f"{n}_after" for n in ATTRIBUTE_NAMES)),
        rows,
    )
    print(f"steered {len(files)} image(s) toward '{ATTRIBUTE_NAMES[args.concept]}' -> {args.out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "report": cmd_report, "steer": cmd_steer}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StaleArtifactError as e:
        print(f"casl: stale artifacts: {e}", file=sys.stderr)
        return EXIT_STALE
    except UsageError as e:
        print(f"casl: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifactError, LockError) as e:
        print(f"casl: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:  # noqa: BLE001 - any stage failure maps to exit 2
        log.debug("stage failure", exc_info=True)
        print(f"casl: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
