"""Experiment grid: tasks x architectures x training schemes under subject-level k-fold CV.

Backbones are pretrained once per architecture and frozen, so every frame is
embedded once (clean) and once more (augmented, for training use only); all
schemes then train the head on those embeddings.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import Corpus
from .features import TRAIN, AugmentPolicy, FeatureFrame, augment
from .federation.partition import DIRICHLET, IID, RoundConfig, partition_dataset
from .federation.server import run_federated_training
from .models import ARCH_NAMES, PretrainConfig, default_spec, majority_vote, pretrained_model
from .nn.network import Model, embed
from .synth import DEPRESSION_THRESHOLD, SEVERITY_THRESHOLD, SubjectInfo
from .training import EarlyStopping, TrainConfig, fit, frame_logits

TASKS = ("male", "female", "combined", "severity")
SCHEMES = ("central", "fedavg", "fedma")


class HarnessError(ValueError):
    pass


class LeakageError(HarnessError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Tasks and splits

@dataclass(frozen=True)
class TaskSpec:
    category: str

    def __post_init__(self):
        if self.category not in TASKS:
            raise HarnessError(f"unknown task {self.category!r}; choose from {TASKS}")

    @property
    def threshold(self) -> int:
        return SEVERITY_THRESHOLD if self.category == "severity" else DEPRESSION_THRESHOLD

    @property
    def class_names(self) -> tuple[str, str]:
        return ("low", "high") if self.category == "severity" else ("noDepression", "hasDepression")

    def label(self, phq8: int) -> int:
        return int(phq8 >= self.threshold)

    def includes(self, info: SubjectInfo) -> bool:
        if self.category == "male":
            return info.gender == "M"
        if self.category == "female":
            return info.gender == "F"
        return True

    def subject_labels(self, subjects: Mapping[str, SubjectInfo]) -> dict[str, int]:
        return {sid: self.label(info.phq8) for sid, info in sorted(subjects.items()) if self.includes(info)}


def stratified_kfold(subject_labels: Mapping[str, int], k: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Subject-level stratified folds as (train subjects, val subjects).

    Each class is shuffled and dealt round-robin; the dealing position carries
    over from one class to the next so fold sizes differ by at most one.
    """
    if k < 2:
        raise HarnessError("k-fold needs k >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for c in sorted(set(subject_labels.values())):
        members = sorted(s for s, l in subject_labels.items() if l == c)
        if len(members) < k:
            raise HarnessError(f"class {c} has {len(members)} subjects, fewer than k={k}")
        for s in (members[i] for i in rng.permutation(len(members))):
            folds[pos % k].append(s)
            pos += 1
    everyone = sorted(subject_labels)
    return [(sorted(set(everyone) - set(f)), sorted(f)) for f in folds]


def check_leakage(splits: Sequence[tuple[Sequence[str], Sequence[str]]], frame_subjects: Sequence[str],
                  train_idx: np.ndarray | None = None, val_idx: np.ndarray | None = None,
                  fold: int | None = None) -> None:
    """Raise LeakageError on any subject-level overlap.

    Checks that validation folds partition the subjects and, when frame
    indices are given for ``fold``, that no validation subject's frame is
    among the training frames.
    """
    seen: dict[str, int] = {}
    universe = set(splits[0][0]) | set(splits[0][1]) if splits else set()
    for i, (tr, va) in enumerate(splits):
        if set(tr) & set(va):
            raise LeakageError(f"fold {i}: subjects in both train and val: {sorted(set(tr) & set(va))[:5]}")
        if set(tr) | set(va) != universe:
            raise LeakageError(f"fold {i}: train+val does not cover the subject set")
        for s in va:
            if s in seen:
                raise LeakageError(f"subject {s} in validation folds {seen[s]} and {i}")
            seen[s] = i
    if set(seen) != universe:
        raise LeakageError(f"subjects never validated: {sorted(universe - set(seen))[:5]}")
    if fold is not None and train_idx is not None:
        fs = np.asarray(frame_subjects, dtype=object)
        val_subjects = set(splits[fold][1])
        bad = sorted({s for s in fs[train_idx] if s in val_subjects})
        if bad:
            raise LeakageError(f"fold {fold}: validation subjects with training frames: {bad[:5]}")
        if val_idx is not None and not set(fs[val_idx]) <= val_subjects:
            raise LeakageError(f"fold {fold}: validation frames from non-validation subjects")


# ---------------------------------------------------------------------------
# Metrics and ranks

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def compute_metrics(predicted: Sequence[int], truth: Sequence[int]) -> Metrics:
    """Binary metrics with class 1 as positive; precision and F1 are 0 when undefined."""
    p = np.asarray(predicted, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape:
        raise HarnessError(f"{len(p)} predictions for {len(t)} labels")
    if p.size == 0:
        raise HarnessError("no predictions to score")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics((tp + tn) / p.size, precision, recall, f1, tp, fp, tn, fn)


@dataclass
class RankTable:
    items: list[str]
    tasks: list[str]
    ranks: np.ndarray  # (tasks, items)
    better: str

    @property
    def sums(self) -> dict[str, float]:
        return {m: float(self.ranks[:, j].sum()) for j, m in enumerate(self.items)}

    @property
    def averages(self) -> dict[str, float]:
        return {m: round(s / len(self.tasks), 2) for m, s in self.sums.items()}

    def to_dict(self) -> dict:
        return {"items": self.items, "tasks": self.tasks, "better": self.better,
                "ranks": self.ranks.tolist(), "sum": self.sums, "avg": self.averages}

    def to_rows(self) -> list[list]:
        rows = [["task"] + self.items]
        rows += [[t] + [float(r) for r in self.ranks[i]] for i, t in enumerate(self.tasks)]
        rows.append(["sum"] + [self.sums[m] for m in self.items])
        rows.append(["avg"] + [self.averages[m] for m in self.items])
        return rows


def rank_methods(values: Mapping[str, Mapping[str, float]], better: str = "higher",
                 items: Sequence[str] | None = None) -> RankTable:
    """Rank items within each task (1 = best); ties share the average rank.

    ``values[task][item]`` is the metric; ``better`` says whether higher or
    lower values win.
    """
    if better not in ("higher", "lower"):
        raise HarnessError(f"better must be 'higher' or 'lower', got {better!r}")
    tasks = list(values)
    if not tasks:
        raise HarnessError("no tasks to rank")
    items = list(items) if items is not None else list(values[tasks[0]])
    ranks = np.empty((len(tasks), len(items)))
    for i, t in enumerate(tasks):
        missing = [m for m in items if m not in values[t] or values[t][m] is None
                   or not math.isfinite(values[t][m])]
        if missing:
            raise HarnessError(f"task {t!r}: missing values for {missing}")
        row = np.array([values[t][m] for m in items], dtype=np.float64)
        ranks[i] = rankdata(-row if better == "higher" else row, method="average")
    return RankTable(items, tasks, ranks, better)


# ---------------------------------------------------------------------------
# Grid configuration

@dataclass(frozen=True)
class GridConfig:
    tasks: tuple[str, ...] = TASKS
    archs: tuple[str, ...] = ARCH_NAMES
    schemes: tuple[str, ...] = SCHEMES
    folds: int = 5
    seed: int = 0
    n_clients: int = 5
    local_epochs: int = 1
    partition: str = IID
    alpha: float = 0.5
    base_lr: float = 0.001
    momentum: float = 0.9
    gamma: float = 0.1
    step: int = 7
    batch_size: int = 16
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 25
    augment_shift: float = 0.1
    augment_noise: float = 0.05
    pretrain_frames: int = 800
    pretrain_epochs: int = 4
    workers: int = 1

    def __post_init__(self):
        for t in self.tasks:
            TaskSpec(t)
        for a in self.archs:
            default_spec(a)
        for s in self.schemes:
            if s not in SCHEMES:
                raise HarnessError(f"unknown scheme {s!r}; choose from {SCHEMES}")
        if self.partition not in (IID, DIRICHLET):
            raise HarnessError(f"unknown partition {self.partition!r}")
        if self.local_epochs < 1 or self.max_epochs < 1 or self.max_epochs % self.local_epochs:
            raise HarnessError("max_epochs must be a positive multiple of local_epochs")

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.base_lr, self.momentum, self.gamma, self.step, self.batch_size)

    @property
    def stopping(self) -> EarlyStopping:
        return EarlyStopping(self.patience, self.min_delta, self.max_epochs)

    @property
    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.augment_shift, self.augment_noise)

    @property
    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(self.pretrain_frames, self.pretrain_epochs)

    def round_config(self, aggregator: str) -> RoundConfig:
        # equal epoch budget: rounds x local epochs == centralized max epochs
        return RoundConfig(self.n_clients, self.local_epochs, self.max_epochs // self.local_epochs, aggregator,
                           self.partition, self.alpha)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_mapping(cls, raw: Mapping[str, object]) -> "GridConfig":
        kw = {}
        known = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise HarnessError(f"unknown grid setting {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                kw[key] = tuple(x.strip() for x in value.split(",") if x.strip()) if isinstance(value, str) \
                    else tuple(value)
            elif isinstance(default, bool):
                kw[key] = str(value).lower() in ("1", "true", "yes")
            else:
                kw[key] = type(default)(value)
        return cls(**kw)


# ---------------------------------------------------------------------------
# Per-architecture embedding stage

@dataclass
class ArchData:
    """Everything a grid cell needs for one architecture."""

    model: Model
    clean: np.ndarray
    augmented: np.ndarray
    frame_subjects: np.ndarray
    frame_phq: np.ndarray


def augmented_pixels(corpus: Corpus, policy: AugmentPolicy, seed: int) -> np.ndarray:
    """One augmented copy per frame, seeded per frame so the result does not depend on order."""
    fs = corpus.features
    out = np.empty_like(fs.pixels)
    for i in range(len(fs)):
        frame = FeatureFrame(fs.pixels[i], fs.subject_ids[i], int(fs.segment_index[i]), int(fs.window_index[i]),
                             int(fs.labels[i]), TRAIN)
        out[i] = augment(frame, np.random.default_rng([seed, i]), policy).pixels
    return out


def prepare_arch(arch: str, corpus: Corpus, cfg: GridConfig, cache_dir: str | Path | None = None,
                 aug_pixels: np.ndarray | None = None) -> ArchData:
    model = pretrained_model(default_spec(arch), cfg.seed, cache_dir, cfg.pretrain)
    fs = corpus.features
    if aug_pixels is None:
        aug_pixels = augmented_pixels(corpus, cfg.augment_policy, cfg.seed)
    clean = embed(model, fs.pixels[:, None])
    augmented = embed(model, aug_pixels[:, None])
    return ArchData(model, clean, augmented, np.asarray(fs.subject_ids, dtype=object), fs.labels.copy())


# ---------------------------------------------------------------------------
# Grid cells

@dataclass
class FoldReport:
    fold: int
    accuracy: float
    f1: float
    precision: float
    recall: float
    frame_accuracy: float
    train_time_s: float
    epochs_run: int
    early_stopped: bool
    n_train_subjects: int
    n_val_subjects: int
    n_train_frames: int
    confusion: dict = field(default_factory=dict)
    leakage_checked: bool = False


@dataclass
class CellResult:
    task: str
    arch: str
    scheme: str
    folds: list[FoldReport]
    config_digest: str = ""

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(f, key) for f in self.folds]))

    def sd(self, key: str) -> float:
        return float(np.std([getattr(f, key) for f in self.folds], ddof=1)) if len(self.folds) > 1 else 0.0

    @property
    def key(self) -> str:
        return f"{self.task}__{self.arch}__{self.scheme}"

    def summary(self, timing: bool = True) -> dict:
        out = {"task": self.task, "arch": self.arch, "scheme": self.scheme, "folds": len(self.folds)}
        for k in ("accuracy", "f1", "precision", "recall", "frame_accuracy"):
            out[f"{k}_mean"] = self.mean(k)
            out[f"{k}_sd"] = self.sd(k)
        out["epochs_mean"] = self.mean("epochs_run")
        if timing:
            out["train_time_s_mean"] = self.mean("train_time_s")
        return out

    def to_dict(self) -> dict:
        return {"task": self.task, "arch": self.arch, "scheme": self.scheme, "config_digest": self.config_digest,
                "folds": [asdict(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CellResult":
        return cls(d["task"], d["arch"], d["scheme"], [FoldReport(**f) for f in d["folds"]], d.get("config_digest", ""))


def _clip_predictions(model: Model, x: np.ndarray, subjects: np.ndarray, head_only: bool):
    votes = frame_logits(model, x, head_only).argmax(axis=1)
    order = sorted(set(subjects))
    return order, [majority_vote(votes[subjects == s]).label for s in order], votes


def run_fold(data: ArchData, task: TaskSpec, scheme: str, cfg: GridConfig, splits, fold: int) -> FoldReport:
    train_subj, val_subj = splits[fold]
    labels = {s: task.label(p) for s, p in zip(data.frame_subjects, data.frame_phq)}
    train_idx = np.flatnonzero(np.isin(data.frame_subjects, train_subj))
    val_idx = np.flatnonzero(np.isin(data.frame_subjects, val_subj))
    check_leakage(splits, data.frame_subjects, train_idx, val_idx, fold)
    y = np.array([task.label(p) for p in data.frame_phq], dtype=np.int64)
    x_tr, y_tr = data.augmented[train_idx], y[train_idx]
    x_va, y_va = data.clean[val_idx], y[val_idx]
    model = data.model.with_params(data.model.params.copy())
    fold_seed = derive_seed(cfg.seed, TASKS.index(task.category), fold)
    if scheme == "central":
        res = fit(model, x_tr, y_tr, x_va, y_va, cfg.train, cfg.stopping, seed=fold_seed, head_only=True)
        params, train_time, epochs, stopped = res.params, res.train_time_s, res.epochs_run, res.early_stopped
    else:
        rc = cfg.round_config(scheme)
        shards = partition_dataset(x_tr, y_tr, data.frame_subjects[train_idx],
                                   {s: labels[s] for s in train_subj}, rc, seed=fold_seed)
        res = run_federated_training(shards, model, rc, cfg.train, seed=fold_seed, val=(x_va, y_va),
                                     stopping=cfg.stopping, head_only=True)
        params, train_time, stopped = res.params, res.train_time_s, res.early_stopped
        epochs = len(res.history) * rc.local_epochs
    model = model.with_params(params)
    val_subjects, preds, votes = _clip_predictions(model, x_va, data.frame_subjects[val_idx], True)
    m = compute_metrics(preds, [labels[s] for s in val_subjects])
    return FoldReport(fold, m.accuracy, m.f1, m.precision, m.recall, float(np.mean(votes == y_va)), train_time,
                      epochs, stopped, len(train_subj), len(val_subj), len(train_idx),
                      {"tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn}, True)


def run_cell(data: ArchData, task: str, scheme: str, cfg: GridConfig,
             subjects: Mapping[str, SubjectInfo]) -> CellResult:
    spec = TaskSpec(task)
    subject_labels = spec.subject_labels(subjects)
    splits = stratified_kfold(subject_labels, cfg.folds, seed=[cfg.seed, TASKS.index(task)])
    check_leakage(splits, data.frame_subjects)
    keep = np.isin(data.frame_subjects, list(subject_labels))
    sub = ArchData(data.model, data.clean[keep], data.augmented[keep], data.frame_subjects[keep],
                   data.frame_phq[keep])
    folds = [run_fold(sub, spec, scheme, cfg, splits, k) for k in range(cfg.folds)]
    return CellResult(task, data.model.name, scheme, folds, cfg.digest())


def _cell_job(args):
    data, task, scheme, cfg, subjects = args
    return run_cell(data, task, scheme, cfg, subjects)


# ---------------------------------------------------------------------------
# Report

@dataclass
class ExperimentReport:
    config: GridConfig
    cells: list[CellResult]

    def cell(self, task: str, arch: str, scheme: str) -> CellResult:
        for c in self.cells:
            if (c.task, c.arch, c.scheme) == (task, arch, scheme):
                return c
        raise KeyError((task, arch, scheme))

    def matrix(self, key: str) -> dict[str, dict[str, float]]:
        """``{"task/arch": {scheme: mean}}``, the 12 task x arch columns of the method comparison."""
        out: dict[str, dict[str, float]] = {}
        for c in self.cells:
            out.setdefault(f"{c.task}/{c.arch}", {})[c.scheme] = c.mean(key)
        return out

    def network_matrix(self, key: str) -> dict[str, dict[str, float]]:
        """``{task: {arch: mean over schemes}}`` for the network comparison."""
        acc: dict[str, dict[str, list[float]]] = {}
        for c in self.cells:
            acc.setdefault(c.task, {}).setdefault(c.arch, []).append(c.mean(key))
        return {t: {a: float(np.mean(v)) for a, v in d.items()} for t, d in acc.items()}

    def method_ranks(self, key: str = "accuracy") -> RankTable:
        better = "lower" if key == "train_time_s" else "higher"
        return rank_methods(self.matrix(key), better, [s for s in SCHEMES if s in self.config.schemes])

    def network_ranks(self, key: str = "accuracy") -> RankTable:
        better = "lower" if key == "train_time_s" else "higher"
        return rank_methods(self.network_matrix(key), better, [a for a in ARCH_NAMES if a in self.config.archs])

    def directional(self) -> dict:
        """Centralized-vs-federated comparison per task x arch cell."""
        m = self.matrix("accuracy")
        fl = [s for s in ("fedavg", "fedma") if s in self.config.schemes]
        wins = {k: all(v["central"] >= v[s] for s in fl) for k, v in m.items() if "central" in v}
        gaps = {k: {s: v["central"] - v[s] for s in fl} for k, v in m.items() if "central" in v}
        return {"central_ge_fl": wins, "central_ge_fl_count": int(sum(wins.values())), "cells": len(wins),
                "gaps": gaps}

    def to_dict(self) -> dict:
        """Deterministic content only (wall-clock timings live in :meth:`timing_dict`)."""
        out = {"config": self.config.to_dict(), "config_digest": self.config.digest(),
               "cells": [c.summary(timing=False) for c in self.cells],
               "directional": self.directional()}
        if len(self.config.schemes) > 1:
            out["method_ranks_accuracy"] = self.method_ranks("accuracy").to_dict()
        if len(self.config.archs) > 1:
            out["network_ranks_accuracy"] = self.network_ranks("accuracy").to_dict()
        return out

    def timing_dict(self) -> dict:
        out = {"cells": [{"task": c.task, "arch": c.arch, "scheme": c.scheme,
                          "train_time_s_mean": c.mean("train_time_s"),
                          "train_time_s_folds": [f.train_time_s for f in c.folds]} for c in self.cells]}
        if len(self.config.schemes) > 1:
            out["method_ranks_time"] = self.method_ranks("train_time_s").to_dict()
        if len(self.config.archs) > 1:
            out["network_ranks_time"] = self.network_ranks("train_time_s").to_dict()
        return out

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "cells_csv": out / "report.csv",
                 "accuracy_csv": out / "plot_accuracy.csv", "timing": out / "timing.json",
                 "timing_csv": out / "plot_train_time.csv"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        paths["timing"].write_text(json.dumps(self.timing_dict(), indent=2, sort_keys=True) + "\n")
        rows = [c.summary(timing=False) for c in self.cells]
        _write_csv(paths["cells_csv"], rows)
        _write_csv(paths["accuracy_csv"], [{"task": c.task, "arch": c.arch, "scheme": c.scheme,
                                            "accuracy": c.mean("accuracy"), "sd": c.sd("accuracy")}
                                           for c in self.cells])
        _write_csv(paths["timing_csv"], [{"task": c.task, "arch": c.arch, "scheme": c.scheme,
                                          "train_time_s": c.mean("train_time_s")} for c in self.cells])
        return paths


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# Driver

def run_grid(corpus: Corpus, cfg: GridConfig = GridConfig(), out_dir: str | Path | None = None,
             cache_dir: str | Path | None = None,
             on_cell: Callable[[CellResult], None] | None = None) -> ExperimentReport:
    """Run every task x arch x scheme cell with k-fold CV.

    Completed cells are written to ``out_dir/cells/<task>__<arch>__<scheme>.json``
    and reused on a rerun with the same configuration digest.
    """
    cell_dir = Path(out_dir) / "cells" if out_dir is not None else None
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    done: dict[tuple, CellResult] = {}
    todo = []
    for arch in cfg.archs:
        for task in cfg.tasks:
            for scheme in cfg.schemes:
                path = cell_dir / f"{task}__{arch}__{scheme}.json" if cell_dir else None
                if path is not None and path.exists():
                    cached = CellResult.from_dict(json.loads(path.read_text()))
                    if cached.config_digest == digest:
                        done[(task, arch, scheme)] = cached
                        continue
                todo.append((task, arch, scheme))
    needed_archs = [a for a in cfg.archs if any(t[1] == a for t in todo)]
    aug = augmented_pixels(corpus, cfg.augment_policy, cfg.seed) if needed_archs else None

    def finish(res: CellResult):
        done[(res.task, res.arch, res.scheme)] = res
        if cell_dir is not None:
            (cell_dir / f"{res.key}.json").write_text(json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n")
        if on_cell:
            on_cell(res)

    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for arch in needed_archs:
            data = prepare_arch(arch, corpus, cfg, cache_dir, aug)
            jobs = [(data, t, s, cfg, corpus.subjects) for t, a, s in todo if a == arch]
            results = pool.map(_cell_job, jobs) if pool else map(_cell_job, jobs)
            for res in results:
                finish(res)
    finally:
        if pool:
            pool.shutdown()
    ordered = [done[(t, a, s)] for a in cfg.archs for t in cfg.tasks for s in cfg.schemes]
    report = ExperimentReport(cfg, ordered)
    if out_dir is not None:
        report.write(out_dir)
    return report
