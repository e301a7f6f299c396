"""Command-line entry point: ``clom gen|train|protocol|analyze|sweep --config <path>``.

Every command is a function of (config, seed): reruns write identical bytes.
Each CSV starts with a ``# config_sha256=<hex> seed=<seed>`` comment line.
With several seeds, outputs go to ``<out>/seed_<s>/``.
Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import analyze_model, class_relation_matrix, relation_delta
from .config import ExperimentConfig, load_config
from .data import Dataset, gen_synthetic, load_dataset, save_dataset
from .errors import ClomError, ConfigError
from .model import load_checkpoint, save_checkpoint
from .numcore import derive_seed
from .protocol import (
    SessionReport,
    TrainConfig,
    build_model,
    run_protocol,
    session_train_data,
    split_sessions,
    train_base,
)

logger = logging.getLogger("clom")

COMMANDS = ("gen", "train", "protocol", "analyze", "sweep")


@dataclass
class Run:
    """One (config, seed) pair with resolved paths."""

    cfg: ExperimentConfig
    seed: int
    out: Path
    base_dir: Path
    digest: str

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


# ---------------------------------------------------------------- output helpers


def _fmt(x: float | None, digits: int = 6) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def write_csv(run: Run, name: str, header: list[str], rows: list[list]) -> Path:
    buf = io.StringIO()
    buf.write(f"# config_sha256={run.digest} seed={run.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / name
    path.write_text(buf.getvalue())
    return path


def session_rows(reports: list[SessionReport]) -> list[list[str]]:
    return [
        [r.session, _fmt(r.overall_acc), _fmt(r.base_acc), _fmt(r.novel_acc), r.n_classes, r.n_test]
        for r in reports
    ]


SESSION_HEADER = ["session", "overall", "base", "novel", "n_classes", "n_test"]


# ---------------------------------------------------------------- shared steps


def dataset_for(run: Run) -> Dataset:
    section = run.cfg.dataset
    if section.synthetic is not None:
        return gen_synthetic(section.synthetic.spec(run.seed))
    return load_dataset(run.resolve(section.path))


def split_for(run: Run, ds: Dataset):
    s = run.cfg.split
    return split_sessions(ds.train_y, s.base_count, s.sessions, s.classes_per_session, s.shots, run.seed, ds.test_y)


def train_config(run: Run, seed: int | None = None, **margins) -> TrainConfig:
    return run.cfg.train.build(run.seed if seed is None else seed, **margins)


# ---------------------------------------------------------------- commands


def cmd_gen(run: Run) -> None:
    section = run.cfg.dataset.synthetic
    if section is None:
        raise ConfigError("gen needs dataset.synthetic")
    spec = section.spec(run.seed)
    save_dataset(gen_synthetic(spec), run.out, spec)


def cmd_train(run: Run) -> None:
    ds = dataset_for(run)
    split = split_for(run, ds)
    tcfg = train_config(run)
    state = build_model(ds, split, run.cfg.model.build(ds.dim, tcfg.dual), tcfg)
    state, curve = train_base(state, *session_train_data(ds, split, 0), tcfg)
    run.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, run.out / "model.ckpt")
    write_csv(run, "train_loss.csv", ["epoch", "loss"], [[e, f"{v:.10g}"] for e, v in enumerate(curve)])


def cmd_protocol(run: Run) -> None:
    ds = dataset_for(run)
    split = split_for(run, ds)
    tcfg = train_config(run)
    result = run_protocol(ds, split, run.cfg.model.build(ds.dim, tcfg.dual), tcfg)
    run.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.state, run.out / "model.ckpt")
    write_csv(run, "train_loss.csv", ["epoch", "loss"], [[e, f"{v:.10g}"] for e, v in enumerate(result.loss_curve)])
    write_csv(run, "sessions.csv", SESSION_HEADER, session_rows(result.reports))


def _analysis_data(ds: Dataset, class_ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
    mask = np.isin(ds.train_y, class_ids)
    if not mask.any():
        raise ClomError("dataset has no training samples of the checkpoint's classes")
    return ds.train_x[mask], ds.train_y[mask]


def cmd_analyze(run: Run) -> None:
    a = run.cfg.analysis
    if a.checkpoint is None:
        raise ConfigError("analyze needs analysis.checkpoint")
    state = load_checkpoint(run.resolve(a.checkpoint))
    ref = load_checkpoint(run.resolve(a.reference_checkpoint)) if a.reference_checkpoint else None
    ds = dataset_for(run)
    x, y = _analysis_data(ds, state.class_ids)
    report = analyze_model(state, x, y, a.top_k, a.magnitude, ref)
    keep = set(a.metrics) | {"top_k"}
    rows = [[m, tag, f"{v:.10g}"] for m, tag, v in report.rows if m in keep]
    write_csv(run, "analysis.csv", ["metric", "tag", "value"], rows)

    classes = sorted(int(c) for c in np.unique(y))
    inherent = None
    if ref is not None:
        inherent = analyze_model(ref, x, y, a.top_k, a.magnitude).relations
    elif ds.means is not None:
        inherent = class_relation_matrix(ds.means[classes])[1]
    iu, ju = np.triu_indices(len(classes), k=1)
    for tag, rm in report.relations.items():
        if isinstance(inherent, dict):
            # single-branch references only carry NM relations
            r0 = inherent.get(tag, inherent.get("nm_" + tag.split("_", 1)[1]))
        else:
            r0 = inherent if inherent is not None else rm
        rd = relation_delta(r0, rm, tag)
        rows = [
            [classes[iu[k]], classes[ju[k]], f"{r:.10g}", f"{d:.10g}"]
            for k, r, d in zip(rd.order, rd.r0, rd.delta)
        ]
        write_csv(run, f"relations_{tag}.csv", ["class_i", "class_j", "r0", "delta"], rows)


def cmd_sweep(run: Run) -> None:
    ds = dataset_for(run)
    split = split_for(run, ds)
    rows = []
    for i, j, nm_value, pm_value in run.cfg.sweep.cells():
        cell_seed = derive_seed(run.seed, "cell", i, j)
        tcfg = train_config(run, cell_seed, nm_ave=nm_value, pm_ave=pm_value)
        reports = run_protocol(ds, split, run.cfg.model.build(ds.dim, tcfg.dual), tcfg).reports
        first, last = reports[0], reports[-1]
        rows.append([
            i, j, cell_seed, f"{nm_value:g}", "" if pm_value is None else f"{pm_value:g}",
            _fmt(first.overall_acc), _fmt(last.overall_acc), _fmt(last.base_acc), _fmt(last.novel_acc),
        ])
        logger.info("cell (%d, %d) last-session overall %.4f", i, j, last.overall_acc)
    header = ["i", "j", "cell_seed", "m_nm", "m_pm", "session0_overall", "last_overall", "last_base", "last_novel"]
    write_csv(run, "sweep.csv", header, rows)


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "protocol": cmd_protocol, "analyze": cmd_analyze, "sweep": cmd_sweep}


# ---------------------------------------------------------------- entry point


class UsageError(ClomError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clom", description="Margin-based few-shot class-incremental learning lab.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="run a single seed (overrides seeds)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def runs_for(cfg: ExperimentConfig, config_path: Path, out: str | None, seed: int | None) -> list[Run]:
    if seed is not None and not 0 <= seed < 2**64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}")
    base_dir = config_path.parent
    root = Path(out) if out is not None else base_dir / cfg.output_dir
    seeds = [seed] if seed is not None else list(cfg.seeds)
    digest = cfg.digest()
    if len(seeds) == 1:
        return [Run(cfg, seeds[0], root, base_dir, digest)]
    return [Run(cfg, s, root / f"seed_{s}", base_dir, digest) for s in seeds]


def run_command(command: str, config_path, out: str | None = None, seed: int | None = None) -> list[Path]:
    path = Path(config_path)
    cfg = load_config(path)
    runs = runs_for(cfg, path, out, seed)
    for run in runs:
        HANDLERS[command](run)
    return [run.out for run in runs]


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": " ".join(str(message).split())})


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(_error_line("UsageError", exc), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        run_command(args.command, args.config, args.out, args.seed)
    except ConfigError as exc:
        print(_error_line("ConfigError", exc), file=sys.stderr)
        return 2
    except ClomError as exc:
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_error_line("OSError", f"{exc.strerror}: {exc.filename}"), file=sys.stderr)
        return 1
    except Exception as exc:  # keep the one-line contract for unexpected failures too
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
