"""Command-line entry point: ``fedspeech <command> [options]``.

Settings resolve as flag > environment > config file > built-in default.
Every command writes its artifacts under ``--out-dir`` together with a
``<artifact>.prov.json`` record (command, config hash, seed, input and output
content hashes) and checks the records of the artifacts it consumes.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import click
import numpy as np

from . import __version__
from .audio import IngestStats, clip_windows, read_manifest, read_transcript, read_wav
from .dataset import Corpus, featurize_manifest
from .features import FeatureSet, StftConfig, read_feature_cache, write_feature_cache
from .federation.partition import partition_dataset
from .federation.server import run_federated_training, write_history
from .harness import (SCHEMES, TASKS, GridConfig, TaskSpec, check_leakage, derive_seed, prepare_arch,
                      rank_methods, run_grid, stratified_kfold)
from .models import ARCH_NAMES, majority_vote
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .profiler import bench_inference, cascade_infer, write_bench_report
from .synth import SubjectInfo, SynthCorpusSpec, oracle_accuracy, synth_corpus
from .training import fit, frame_logits

ARTIFACT_VERSION = 1
ENV_PREFIX = "FEDSPEECH_"

EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_FAILURE = 4


class DependencyError(RuntimeError):
    def __init__(self, artifact: Path, hint: str):
        super().__init__(f"missing or invalid artifact {artifact}; run `{hint}` first")
        self.artifact = str(artifact)
        self.hint = hint


# ---------------------------------------------------------------------------
# Settings

class Settings:
    """Sectioned key/value settings with flag > env > file precedence."""

    def __init__(self, path: str | None):
        self.file = configparser.ConfigParser()
        self.path = path
        if path:
            if not Path(path).is_file():
                raise click.UsageError(f"config file {path} not found")
            self.file.read(path)

    def section(self, name: str) -> dict[str, str]:
        """File values overlaid by ``FEDSPEECH_<SECTION>_<KEY>`` environment variables."""
        out = dict(self.file[name]) if self.file.has_section(name) else {}
        prefix = f"{ENV_PREFIX}{name.upper()}_"
        for k, v in os.environ.items():
            if k.startswith(prefix):
                out[k[len(prefix):].lower()] = v
        return out

    def get(self, flag_value, env: str, section: str, key: str, default):
        if flag_value is not None:
            return flag_value
        if ENV_PREFIX + env in os.environ:
            return type(default)(os.environ[ENV_PREFIX + env]) if default is not None else os.environ[ENV_PREFIX + env]
        value = self.section(section).get(key)
        if value is not None:
            return type(default)(value) if default is not None else value
        return default


def _typed(cls, raw: dict[str, str]) -> dict:
    kw = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in raw.items():
        if k not in known:
            raise click.UsageError(f"unknown setting {k!r} for {cls.__name__}")
        default = known[k].default
        if isinstance(default, tuple):
            kw[k] = tuple(type(default[0])(x) for x in v.split(",")) if default else tuple(v.split(","))
        else:
            kw[k] = type(default)(v)
    return kw


# ---------------------------------------------------------------------------
# Provenance

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file() and not q.name.endswith(".prov.json")):
        h.update(str(p.relative_to(root)).encode())
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def _hash(path: Path) -> str:
    return sha256_tree(path) if path.is_dir() else sha256_file(path)


def write_provenance(artifact: Path, command: str, config: dict, seed: int, inputs: dict[str, Path],
                     volatile: tuple[str, ...] = ()) -> Path:
    """Record how ``artifact`` was made. ``volatile`` names companion files holding wall-clock data."""
    record = {
        "artifact_version": ARTIFACT_VERSION,
        "package_version": __version__,
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "inputs": {k: _hash(v) for k, v in sorted(inputs.items())},
        "sha256": _hash(artifact),
        "volatile": list(volatile),
    }
    prov = artifact.parent / (artifact.name + ".prov.json")
    prov.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return prov


def require(artifact: Path, hint: str) -> dict:
    """Check an input artifact exists, has a provenance record of this version, and is unmodified."""
    prov = artifact.parent / (artifact.name + ".prov.json")
    if not artifact.exists() or not prov.exists():
        raise DependencyError(artifact, hint)
    record = json.loads(prov.read_text())
    if record.get("artifact_version") != ARTIFACT_VERSION:
        raise DependencyError(artifact, hint)
    if record.get("sha256") != _hash(artifact):
        raise DependencyError(artifact, hint + "  (content hash mismatch)")
    return record


# ---------------------------------------------------------------------------
# Shared helpers

class Ctx:
    def __init__(self, settings: Settings, seed: int, out_dir: Path, workers: int):
        self.settings, self.seed, self.out_dir, self.workers = settings, seed, out_dir, workers

    @property
    def corpus_dir(self) -> Path:
        return self.out_dir / "corpus"

    @property
    def features_path(self) -> Path:
        return self.out_dir / "features.ffc"

    @property
    def subjects_path(self) -> Path:
        return self.out_dir / "subjects.json"

    @property
    def cache_dir(self) -> Path:
        return self.out_dir / "cache"

    def grid_config(self, **overrides) -> GridConfig:
        raw = self.settings.section("grid")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        raw["seed"] = self.seed
        raw["workers"] = self.workers
        try:
            return GridConfig.from_mapping(raw)
        except (ValueError, TypeError) as exc:
            raise click.UsageError(str(exc)) from exc

    def load_corpus(self) -> Corpus:
        require(self.features_path, "fedspeech featurize")
        require(self.subjects_path, "fedspeech featurize")
        fs = read_feature_cache(self.features_path)
        subjects = {s["subject_id"]: SubjectInfo(**s) for s in json.loads(self.subjects_path.read_text())}
        return Corpus(fs, subjects)


def _emit(obj: dict) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


def _manifest_path(ctx: Ctx, manifest: str | None) -> Path:
    if manifest:
        path = Path(manifest)
        if not path.exists():
            raise DependencyError(path, "fedspeech synth")
        return path
    path = ctx.corpus_dir / "manifest.csv"
    require(ctx.corpus_dir, "fedspeech synth")
    return path


# ---------------------------------------------------------------------------
# Commands

@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(), default=None, help="Sectioned key/value config file.")
@click.option("--seed", type=int, default=None, help="Master seed (env FEDSPEECH_SEED).")
@click.option("--out-dir", type=click.Path(), default=None, help="Artifact directory (env FEDSPEECH_OUT_DIR).")
@click.option("--workers", type=int, default=None, help="Grid worker processes (env FEDSPEECH_WORKERS).")
@click.pass_context
def main(cctx, config_path, seed, out_dir, workers):
    """Federated depression-screening simulator."""
    config_path = config_path or os.environ.get(ENV_PREFIX + "CONFIG")
    s = Settings(config_path)
    seed = s.get(seed, "SEED", "run", "seed", 0)
    out = Path(s.get(out_dir, "OUT_DIR", "run", "out_dir", "runs"))
    workers = s.get(workers, "WORKERS", "run", "workers", 1)
    if workers < 1:
        raise click.UsageError("--workers must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    cctx.obj = Ctx(s, seed, out, workers)


@main.command()
@click.pass_obj
def synth(ctx: Ctx):
    """Write a synthetic corpus (WAVs, transcripts, manifest) under OUT_DIR/corpus."""
    kw = _typed(SynthCorpusSpec, ctx.settings.section("synth"))
    kw["seed"] = ctx.seed
    spec = SynthCorpusSpec(**kw)
    manifest = synth_corpus(spec, ctx.corpus_dir)
    dep = oracle_accuracy(manifest, spec=spec)
    sev = oracle_accuracy(manifest, threshold=10, spec=spec)
    (ctx.out_dir / "oracle.json").write_text(json.dumps({"depression": dep, "severity": sev}, sort_keys=True) + "\n")
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    write_provenance(ctx.corpus_dir, "synth", cfg, ctx.seed, {})
    _emit({"command": "synth", "manifest": str(manifest), "subjects": spec.n_subjects,
           "oracle_accuracy": {"depression": dep, "severity": sev}})


def _feature_settings(ctx: Ctx) -> tuple[StftConfig, float, float]:
    raw = ctx.settings.section("features")
    length = float(raw.pop("length_s", 1.0))
    hop = float(raw.pop("hop_s", 0.1))
    return StftConfig(**_typed(StftConfig, raw)), length, hop


@main.command()
@click.option("--manifest", type=click.Path(), default=None, help="Manifest CSV (default: OUT_DIR/corpus).")
@click.pass_obj
def ingest(ctx: Ctx, manifest):
    """Segment participant speech and count analysis windows per subject."""
    path = _manifest_path(ctx, manifest)
    _, length, hop = _feature_settings(ctx)
    rows = []
    total = IngestStats()
    for row in read_manifest(path):
        stats = IngestStats()
        clip = read_wav(row.wav_path, row.subject_id, row.phq8)
        n = len(clip_windows(clip, read_transcript(row.transcript_path), length, hop, stats))
        rows.append({"subject_id": row.subject_id, "phq8": row.phq8, "gender": row.gender, "windows": n,
                     "segments": stats.segments, "skipped_short": stats.skipped_short})
        total.segments += stats.segments
        total.skipped_short += stats.skipped_short
        total.skipped_out_of_range += stats.skipped_out_of_range
        total.windows += n
        total.warnings += stats.warnings
    out = ctx.out_dir / "ingest.json"
    out.write_text(json.dumps({"subjects": rows, "totals": asdict(total)}, indent=2, sort_keys=True) + "\n")
    write_provenance(out, "ingest", {"length_s": length, "hop_s": hop}, ctx.seed, {"manifest": path})
    _emit({"command": "ingest", "subjects": len(rows), "windows": total.windows, "warnings": len(total.warnings)})


@main.command()
@click.option("--manifest", type=click.Path(), default=None, help="Manifest CSV (default: OUT_DIR/corpus).")
@click.pass_obj
def featurize(ctx: Ctx, manifest):
    """Compute 224x224 log-spectrogram frames into OUT_DIR/features.ffc."""
    path = _manifest_path(ctx, manifest)
    cfg, length, hop = _feature_settings(ctx)
    corpus = featurize_manifest(path, cfg, length_s=length, hop_s=hop)
    write_feature_cache(ctx.features_path, corpus.features)
    subjects = [asdict(s) for s in corpus.subjects.values()]
    ctx.subjects_path.write_text(json.dumps(subjects, indent=1, sort_keys=True) + "\n")
    settings = {**asdict(cfg), "length_s": length, "hop_s": hop}
    write_provenance(ctx.features_path, "featurize", settings, ctx.seed, {"manifest": path})
    write_provenance(ctx.subjects_path, "featurize", settings, ctx.seed, {"manifest": path})
    _emit({"command": "featurize", "frames": len(corpus.features), "subjects": len(subjects),
           "sha256": sha256_file(ctx.features_path)})


def _single_run(ctx: Ctx, task: str, arch: str, scheme: str, fold: int, clients: int | None):
    """Train one model on fold ``fold``'s training subjects; returns (model, metrics, history)."""
    from .harness import compute_metrics

    corpus = ctx.load_corpus()
    cfg = ctx.grid_config(tasks=task, archs=arch, schemes=scheme, n_clients=clients)
    spec = TaskSpec(task)
    labels = spec.subject_labels(corpus.subjects)
    splits = stratified_kfold(labels, cfg.folds, seed=[cfg.seed, TASKS.index(task)])
    if not 0 <= fold < cfg.folds:
        raise click.UsageError(f"--fold must be in [0, {cfg.folds})")
    data = prepare_arch(arch, corpus, cfg, ctx.cache_dir)
    fs = data.frame_subjects
    tr_subj, va_subj = splits[fold]
    tr = np.flatnonzero(np.isin(fs, tr_subj))
    va = np.flatnonzero(np.isin(fs, va_subj))
    check_leakage(splits, fs, tr, va, fold)
    y = np.array([spec.label(p) for p in data.frame_phq], dtype=np.int64)
    model = data.model.with_params(data.model.params.copy())
    seed = derive_seed(cfg.seed, TASKS.index(task), fold)
    history = None
    if scheme == "central":
        res = fit(model, data.augmented[tr], y[tr], data.clean[va], y[va], cfg.train, cfg.stopping, seed=seed)
        model = model.with_params(res.params)
        epochs = res.epochs_run
    else:
        rc = cfg.round_config(scheme)
        shards = partition_dataset(data.augmented[tr], y[tr], fs[tr], {s: labels[s] for s in tr_subj}, rc, seed)
        res = run_federated_training(shards, model, rc, cfg.train, seed=seed, val=(data.clean[va], y[va]),
                                     stopping=cfg.stopping)
        model = model.with_params(res.params)
        history = res.history
        epochs = len(res.history) * rc.local_epochs
    votes = frame_logits(model, data.clean[va], True).argmax(axis=1)
    preds = [majority_vote(votes[fs[va] == s]).label for s in va_subj]
    m = compute_metrics(preds, [labels[s] for s in va_subj])
    metrics = {"task": task, "arch": arch, "scheme": scheme, "fold": fold, "accuracy": m.accuracy,
               "f1": m.f1, "precision": m.precision, "recall": m.recall, "epochs_run": epochs,
               "frame_accuracy": float(np.mean(votes == y[va]))}
    return model, metrics, history, cfg


def _write_model(ctx: Ctx, name: str, model, metrics: dict, cfg: GridConfig, command: str) -> Path:
    models = ctx.out_dir / "models"
    models.mkdir(exist_ok=True)
    ckpt = models / f"{name}.fvx"
    ckpt.write_bytes(save_checkpoint(model.params))
    (models / f"{name}.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_provenance(ckpt, command, cfg.to_dict(), ctx.seed, {"features": ctx.features_path})
    return ckpt


task_opt = click.option("--task", type=click.Choice(TASKS), default=None, help="Task (env FEDSPEECH_TASK).")
arch_opt = click.option("--arch", type=click.Choice(ARCH_NAMES), default=None, help="Architecture (env FEDSPEECH_ARCH).")
fold_opt = click.option("--fold", type=int, default=0, show_default=True, help="Cross-validation fold held out.")


@main.command("train-central")
@task_opt
@arch_opt
@fold_opt
@click.pass_obj
def train_central(ctx: Ctx, task, arch, fold):
    """Train one centralized model and save its checkpoint."""
    task = ctx.settings.get(task, "TASK", "run", "task", "combined")
    arch = ctx.settings.get(arch, "ARCH", "run", "arch", "rn18-lite")
    model, metrics, _, cfg = _single_run(ctx, task, arch, "central", fold, None)
    ckpt = _write_model(ctx, f"{task}-{arch}-central", model, metrics, cfg, "train-central")
    _emit({"command": "train-central", "checkpoint": str(ckpt), **metrics})


@main.command("train-fed")
@task_opt
@arch_opt
@fold_opt
@click.option("--aggregator", type=click.Choice(SCHEMES), default=None,
              help="fedavg or fedma (env FEDSPEECH_AGGREGATOR).")
@click.option("--clients", type=int, default=None, help="Number of simulated devices.")
@click.pass_obj
def train_fed(ctx: Ctx, task, arch, fold, aggregator, clients):
    """Train one federated model; writes the checkpoint and a JSON-lines round history."""
    task = ctx.settings.get(task, "TASK", "run", "task", "combined")
    arch = ctx.settings.get(arch, "ARCH", "run", "arch", "rn18-lite")
    aggregator = ctx.settings.get(aggregator, "AGGREGATOR", "run", "aggregator", "fedavg")
    if aggregator == "central":
        raise click.UsageError("train-fed needs --aggregator fedavg or fedma; use train-central instead")
    model, metrics, history, cfg = _single_run(ctx, task, arch, aggregator, fold, clients)
    name = f"{task}-{arch}-{aggregator}"
    ckpt = _write_model(ctx, name, model, metrics, cfg, "train-fed")
    hist = ctx.out_dir / "models" / f"{name}.history.jsonl"
    write_history(hist, history)
    _emit({"command": "train-fed", "checkpoint": str(ckpt), "history": str(hist), "rounds": len(history),
           "clients": cfg.n_clients, **metrics})


@main.command()
@task_opt
@arch_opt
@click.option("--aggregator", type=click.Choice(SCHEMES), default=None, help="Restrict to one scheme.")
@click.pass_obj
def grid(ctx: Ctx, task, arch, aggregator):
    """Run the task x arch x scheme cross-validation grid into OUT_DIR/grid."""
    corpus = ctx.load_corpus()
    task = ctx.settings.get(task, "TASK", "grid", "tasks", None)
    arch = ctx.settings.get(arch, "ARCH", "grid", "archs", None)
    aggregator = ctx.settings.get(aggregator, "AGGREGATOR", "grid", "schemes", None)
    cfg = ctx.grid_config(tasks=task, archs=arch, schemes=aggregator)
    out = ctx.out_dir / "grid"
    report = run_grid(corpus, cfg, out, ctx.cache_dir)
    write_provenance(out / "report.json", "grid", cfg.to_dict(), ctx.seed, {"features": ctx.features_path},
                     volatile=("timing.json", "plot_train_time.csv"))
    d = report.directional()
    _emit({"command": "grid", "cells": len(report.cells), "report": str(out / "report.json"),
           "central_ge_fl": f"{d['central_ge_fl_count']}/{d['cells']}"})


@main.command()
@click.option("--matrix", type=click.Path(exists=True), default=None,
              help="CSV with columns task,item,value to rank instead of the grid report.")
@click.option("--better", type=click.Choice(["higher", "lower"]), default="higher", show_default=True)
@click.pass_obj
def rank(ctx: Ctx, matrix, better):
    """Rank methods and networks per task (1 = best); write OUT_DIR/ranks.json."""
    out = ctx.out_dir / "ranks.json"
    if matrix:
        import csv

        values: dict[str, dict[str, float]] = {}
        with open(matrix, newline="") as fh:
            for r in csv.DictReader(fh):
                values.setdefault(r["task"], {})[r["item"]] = float(r["value"])
        table = rank_methods(values, better)
        doc = {"matrix": table.to_dict()}
        inputs = {"matrix": Path(matrix)}
    else:
        report_path = ctx.out_dir / "grid" / "report.json"
        require(report_path, "fedspeech grid")
        report = json.loads(report_path.read_text())
        timing = json.loads((ctx.out_dir / "grid" / "timing.json").read_text())
        doc = {k: v for k, v in report.items() if "ranks" in k}
        doc.update({k: v for k, v in timing.items() if "ranks" in k})
        inputs = {"report": report_path}
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_provenance(out, "rank", {"better": better}, ctx.seed, inputs)
    _emit({"command": "rank", "ranks": str(out),
           "summary": {k: v["sum"] for k, v in doc.items()}})


@main.command()
@arch_opt
@click.option("--frames", "n_frames", type=int, default=None, help="Frames timed per model.")
@click.option("--warmup", type=int, default=None)
@click.option("--reps", type=int, default=None)
@click.pass_obj
def bench(ctx: Ctx, arch, n_frames, warmup, reps):
    """Time per-frame inference and report analytic memory; run the cascade when its models exist."""
    corpus = ctx.load_corpus()
    n_frames = ctx.settings.get(n_frames, "BENCH_FRAMES", "bench", "frames", 20)
    warmup = ctx.settings.get(warmup, "BENCH_WARMUP", "bench", "warmup", 2)
    reps = ctx.settings.get(reps, "BENCH_REPS", "bench", "reps", 1)
    arch = ctx.settings.get(arch, "ARCH", "bench", "arch", None)
    archs = [arch] if arch else list(ARCH_NAMES)
    cfg = ctx.grid_config(archs=",".join(archs))
    frames = corpus.features.pixels[:n_frames]
    results = []
    from .models import pretrained_model, default_spec

    for a in archs:
        model = pretrained_model(default_spec(a), cfg.seed, ctx.cache_dir, cfg.pretrain)
        results.append(bench_inference(model, frames, warmup, reps))
    out = ctx.out_dir / "bench.json"
    write_bench_report(results, out)
    summary = {"command": "bench", "report": str(out),
               "mean_ms": {r.model: round(r.mean_ms, 3) for r in results}}
    cascade = _cascade(ctx, corpus, archs[0], cfg)
    if cascade is not None:
        (ctx.out_dir / "cascade.json").write_text(json.dumps(cascade, indent=2, sort_keys=True) + "\n")
        summary["cascade"] = str(ctx.out_dir / "cascade.json")
    _emit(summary)


def _cascade(ctx: Ctx, corpus: Corpus, arch: str, cfg: GridConfig) -> dict | None:
    """Per-subject cascade decisions from centralized checkpoints, if all four were trained."""
    from .models import default_spec, pretrained_model

    names = {t: ctx.out_dir / "models" / f"{t}-{arch}-central.fvx" for t in TASKS}
    if not all(p.exists() for p in names.values()):
        return None
    base = pretrained_model(default_spec(arch), cfg.seed, ctx.cache_dir, cfg.pretrain)
    models = {t: base.with_params(load_checkpoint(p.read_bytes(), expect=base.params)[0]) for t, p in names.items()}
    fs = corpus.features
    sids = np.asarray(fs.subject_ids, dtype=object)
    decisions = {}
    for sid, info in sorted(corpus.subjects.items()):
        frames = fs.pixels[sids == sid][:, None]
        gender_model = models["male" if info.gender == "M" else "female"]
        d = cascade_infer(models["combined"], gender_model, models["severity"], frames)
        decisions[sid] = {"depression": d.depression, "severity": d.severity, "votes": d.votes,
                          "phq8": info.phq8}
    return {"arch": arch, "subjects": decisions}


def run(argv=None) -> int:
    """Console-script entry point; failures print one JSON object on stderr."""
    try:
        main.main(args=argv, prog_name="fedspeech", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        _fail("usage", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except DependencyError as exc:
        _fail("dependency", str(exc), EXIT_DEPENDENCY, artifact=exc.artifact, hint=exc.hint)
        return EXIT_DEPENDENCY
    except click.Abort:
        _fail("aborted", "interrupted", EXIT_FAILURE)
        return EXIT_FAILURE
    except Exception as exc:  # every other failure still yields machine-readable output
        _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
        return EXIT_FAILURE


def _fail(kind: str, message: str, code: int, **extra) -> None:
    click.echo(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}, sort_keys=True),
               err=True)


def entry() -> None:
    sys.exit(run())
