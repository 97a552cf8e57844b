"""Player-independent cross-validation, UAR metrics, grid search and report assembly."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .features import FEATURE_VERSIONS, SEQUENCE_FEATURES, VECTOR_FEATURES
from .ingest import SCORES, SEXES, DatasetManifest
from .learn.nets import NetConfig, TrainConfig, net_predict, net_train
from .learn.svm import Standardizer, standardize_fit, svm_predict, svm_train
from .lld import AGGREGATIONS, aggregate

REPORT_SCHEMA_VERSION = "gruntlab-report/1"
TASKS = ("sex", "score")
SUBSETS = ("women", "men", "combined")
SUBSET_SEX = {"women": "female", "men": "male", "combined": None}
CLASS_NAMES = {"sex": SEXES, "score": SCORES}

# hyperparameter sets: (batch size, learning rate)
HP_SETS: Dict[str, Tuple[int, float]] = {
    "I": (16, 5e-5),
    "II": (16, 1e-4),
    "III": (16, 1e-3),
    "IV": (32, 1e-3),
    "V": (64, 1e-4),
    "VI": (64, 1e-5),
}
HP_ORDER = tuple(HP_SETS)
C_GRID = tuple(10.0 ** e for e in range(-5, 2))


class LeakageError(AssertionError):
    """A test player's clips reached the training set."""


@dataclass(frozen=True)
class HpSet:
    id: str
    batch_size: int
    learning_rate: float

    @classmethod
    def get(cls, hp_id: str) -> "HpSet":
        if hp_id not in HP_SETS:
            raise ValueError(f"unknown HP set {hp_id!r}; expected one of {', '.join(HP_ORDER)}")
        return cls(hp_id, *HP_SETS[hp_id])


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    folds: List[List[str]]
    seed: int

    def fold_of(self, player: str) -> int:
        for i, members in enumerate(self.folds):
            if player in members:
                return i
        raise KeyError(player)

    def players(self) -> List[str]:
        return [p for f in self.folds for p in f]


def plan_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle players within each sex and deal them round-robin across k folds.

    The deal continues from where the previous sex stopped, so total fold sizes
    differ by at most one, as do per-fold counts of each sex.
    """
    sex_of = manifest.player_sex()
    if len(sex_of) < k:
        raise ValueError(f"need at least {k} players for {k} folds, got {len(sex_of)}")
    rng = np.random.default_rng(seed)
    folds: List[List[str]] = [[] for _ in range(k)]
    slot = 0
    for sex in SEXES:
        group = sorted(p for p, s in sex_of.items() if s == sex)
        for i in rng.permutation(len(group)):
            folds[slot % k].append(group[i])
            slot += 1
    return FoldPlan(k, [sorted(f) for f in folds], seed)


# --------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    classes: Tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recalls(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        if np.any(rows == 0):
            missing = [c for c, n in zip(self.classes, rows) if n == 0]
            raise ValueError(f"classes without ground-truth samples: {missing}")
        return np.diag(self.counts) / rows


def confusion(truth, pred, classes: Sequence[str] = ("0", "1")) -> ConfusionMatrix:
    """counts[i][j] = number of samples of true class i predicted as j."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: {truth.size} truths vs {pred.size} predictions")
    n = len(classes)
    for arr in (truth, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= n or not np.issubdtype(arr.dtype, np.integer)):
            raise ValueError(f"labels must be integer class ids in [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (truth.astype(np.int64), pred.astype(np.int64)), 1)
    return ConfusionMatrix(counts, tuple(classes))


def uar(cm: ConfusionMatrix) -> float:
    """Unweighted average recall: mean of the per-class recalls."""
    return float(np.mean(cm.recalls()))


def population_std(values: Sequence[float]) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64)))


# --------------------------------------------------------------------------
# models


class ConstantModel:
    def __init__(self, label: int):
        self.label = label

    def predict(self, X) -> np.ndarray:
        return np.full(len(X), self.label, dtype=np.int64)


@dataclass(frozen=True)
class ConstantSpec:
    """Baseline that always predicts one class id."""

    label: int = 0
    kind: str = "constant"

    def fit(self, X, y, seed: int) -> ConstantModel:
        return ConstantModel(self.label)

    def describe(self) -> dict:
        return {"kind": self.kind, "label": self.label}


class _SvmPredictor:
    def __init__(self, model):
        self.model = model

    def predict(self, X) -> np.ndarray:
        return svm_predict(self.model, X)[0]


@dataclass(frozen=True)
class SvmSpec:
    C: float
    iterations: int = 1000
    kind: str = "svm"

    def fit(self, X, y, seed: int) -> _SvmPredictor:
        std = standardize_fit(X)
        model = svm_train(std.apply(X), y, self.C, self.iterations, seed)
        model.standardizer = std
        return _SvmPredictor(model)

    def describe(self) -> dict:
        return {"kind": self.kind, "C": self.C, "iterations": self.iterations}

    @property
    def hp_label(self) -> str:
        return f"C={self.C:g}"


def fit_sequence_standardizer(X: np.ndarray) -> Standardizer:
    """Per-channel statistics pooled over all frames of all training sequences."""
    return standardize_fit(X.reshape(-1, X.shape[-1]))


class _NetPredictor:
    def __init__(self, params, std: Standardizer):
        self.params = params
        self.std = std

    def predict(self, X) -> np.ndarray:
        logits = net_predict(self.params, self.std.apply(X))
        return np.argmax(logits, axis=1).astype(np.int64)


@dataclass(frozen=True)
class NetSpec:
    architecture: str
    hp: str = "I"
    epochs: int = 30
    lstm_hidden: int = 64
    feature: str = "mfcc"
    optimizer: str = "adam"
    kind: str = "net"

    def config(self, input_shape) -> NetConfig:
        if self.architecture == "crnn":
            return NetConfig.crnn(input_shape, feature=self.feature, lstm_hidden=self.lstm_hidden)
        return NetConfig.lstm_rnn(input_shape, lstm_hidden=self.lstm_hidden)

    def train_config(self, seed: int) -> TrainConfig:
        hp = HpSet.get(self.hp)
        return TrainConfig(hp.batch_size, hp.learning_rate, self.epochs, seed, self.optimizer)

    def fit(self, X, y, seed: int) -> _NetPredictor:
        X = np.asarray(X, dtype=np.float64)
        std = fit_sequence_standardizer(X)
        params, _ = net_train(self.config(X.shape[1:]), self.train_config(seed), std.apply(X), y)
        return _NetPredictor(params, std)

    def describe(self) -> dict:
        hp = HpSet.get(self.hp)
        return {"kind": self.kind, "architecture": self.architecture, "hp": self.hp,
                "batch_size": hp.batch_size, "learning_rate": hp.learning_rate,
                "epochs": self.epochs, "lstm_hidden": self.lstm_hidden, "lstm_layers": 2,
                "optimizer": self.optimizer, "dropout": 0.5 if self.architecture == "crnn" else 0.0,
                "clip_norm": 5.0}

    @property
    def hp_label(self) -> str:
        return self.hp


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    aggregation: Optional[str] = None

    def describe(self) -> dict:
        return {"name": self.name, "aggregation": self.aggregation,
                "schema_version": FEATURE_VERSIONS[self.name]}


# allowed feature x model combinations
SVM_AGGREGATIONS = {"lld": AGGREGATIONS, "mfcc": AGGREGATIONS, "spectrogram": ("flat",),
                    "compare_functionals": (None,), "egemaps_functionals": (None,)}
NET_FEATURES = {"lstm_rnn": ("lld", "mfcc"), "crnn": ("lld", "mfcc", "spectrogram")}


def check_combination(feature: FeatureSpec, model) -> None:
    kind = getattr(model, "kind", None)
    if kind == "svm":
        allowed = SVM_AGGREGATIONS.get(feature.name)
        if allowed is None or feature.aggregation not in allowed:
            raise ValueError(f"SVM does not take {feature.name} with aggregation "
                             f"{feature.aggregation!r}; allowed: {allowed}")
    elif kind == "net":
        if feature.name not in NET_FEATURES[model.architecture]:
            raise ValueError(f"{model.architecture} does not take {feature.name}; allowed: "
                             f"{NET_FEATURES[model.architecture]}")
        if feature.aggregation is not None:
            raise ValueError("neural models take whole sequences; drop the aggregation")
    elif kind != "constant":
        raise ValueError(f"unknown model kind {kind!r}")


def design_matrix(features: Mapping[str, np.ndarray], keys: Sequence[str], feature: FeatureSpec,
                  model) -> np.ndarray:
    arrays = [features[k] for k in keys]
    if getattr(model, "kind", None) == "net":
        return np.stack(arrays)
    if feature.name in VECTOR_FEATURES:
        return np.stack([a.reshape(-1) for a in arrays])
    agg = feature.aggregation or "flat"
    return np.stack([aggregate(a, agg).values for a in arrays])


def labels_for(manifest: DatasetManifest, task: str) -> np.ndarray:
    if task == "sex":
        return np.array([SEXES.index(r.sex) for r in manifest.records], dtype=np.int64)
    if task == "score":
        return np.array([SCORES.index(r.score) for r in manifest.records], dtype=np.int64)
    raise ValueError(f"unknown task {task!r}")


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    test_players: List[str]
    n_train: int
    n_test: int
    uar: float
    confusion: List[List[int]]


@dataclass
class EvalReport:
    task: str
    subset: str
    feature: dict
    model: dict
    hp: str
    folds: List[FoldResult]
    uar_mean: float
    uar_std: float
    fingerprint: dict
    notes: List[str] = field(default_factory=list)

    @property
    def uar_folds(self) -> List[float]:
        return [f.uar for f in self.folds]

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "subset": self.subset,
            "feature": self.feature,
            "model": self.model,
            "hp": self.hp,
            "uar_mean": self.uar_mean,
            "uar_std": self.uar_std,
            "std_kind": "population",
            "uar_folds": self.uar_folds,
            "folds": [{"test_players": f.test_players, "n_train": f.n_train, "n_test": f.n_test,
                       "uar": f.uar, "confusion": f.confusion} for f in self.folds],
            "fingerprint": self.fingerprint,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        folds = [FoldResult(f["test_players"], f["n_train"], f["n_test"], f["uar"], f["confusion"])
                 for f in d["folds"]]
        return cls(d["task"], d["subset"], d["feature"], d["model"], d["hp"], folds,
                   d["uar_mean"], d["uar_std"], d["fingerprint"], d.get("notes", []))


def _run_fold(job):
    fold_idx, X_train, y_train, X_test, model, seed = job
    predictor = model.fit(X_train, y_train, seed)
    return predictor.predict(X_test)


def cross_validate(manifest: DatasetManifest, plan: FoldPlan, task: str, subset: str,
                   features: Mapping[str, np.ndarray], feature: FeatureSpec, model,
                   seed: int = 0, jobs: int = 1) -> EvalReport:
    """Train on the players outside each fold, test on the fold's players."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if subset not in SUBSETS:
        raise ValueError(f"unknown subset {subset!r}")
    if task == "sex" and subset != "combined":
        raise ValueError("the sex task needs both sexes (subset=combined)")
    check_combination(feature, model)
    data = manifest.subset(SUBSET_SEX[subset])
    players = set(data.players())
    planned = plan.players()
    repeated = sorted(p for p, n in Counter(planned).items() if n > 1)
    if repeated:
        raise LeakageError(f"players assigned to more than one fold: {repeated}")
    planned = set(planned)
    if players != planned:
        raise ValueError("fold plan does not cover exactly the players of the selected subset")
    y = labels_for(data, task)
    keys = [r.key for r in data.records]
    fold_of = {p: i for i, f in enumerate(plan.folds) for p in f}
    clip_fold = np.array([fold_of[r.player_id] for r in data.records])
    X = design_matrix(features, keys, feature, model)
    classes = CLASS_NAMES[task]

    jobs_list = []
    splits = []
    for f in range(plan.k):
        test = np.flatnonzero(clip_fold == f)
        train = np.flatnonzero(clip_fold != f)
        train_players = {data.records[i].player_id for i in train}
        test_players = {data.records[i].player_id for i in test}
        if train_players & test_players:
            raise LeakageError(f"fold {f}: players in both train and test: "
                               f"{sorted(train_players & test_players)}")
        if test.size == 0:
            raise ValueError(f"fold {f} has no test clips")
        splits.append((train, test, sorted(test_players)))
        jobs_list.append((f, X[train], y[train], X[test], model, seed * 1000 + f))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            predictions = list(pool.map(_run_fold, jobs_list))
    else:
        predictions = [_run_fold(j) for j in jobs_list]

    folds = []
    for (train, test, test_players), pred in zip(splits, predictions):
        cm = confusion(y[test], pred, classes)
        folds.append(FoldResult(test_players, int(train.size), int(test.size), uar(cm),
                                cm.counts.tolist()))
    uars = [f.uar for f in folds]
    fingerprint = {
        "package_version": __version__,
        "report_schema": REPORT_SCHEMA_VERSION,
        "feature_schema": FEATURE_VERSIONS[feature.name],
        "fold_seed": plan.seed,
        "model_seed": seed,
        "k": plan.k,
        "class_order": list(classes),
    }
    notes = []
    if subset != "combined":
        notes.append(f"folds re-planned within the {subset} subset")
    if feature.name == "spectrogram":
        notes.append("spectrograms computed at 44.1 kHz, 227x227 laid out time x frequency")
    return EvalReport(task, subset, feature.describe(), model.describe(),
                      getattr(model, "hp_label", "-"), folds, float(np.mean(uars)),
                      population_std(uars), fingerprint, notes)


def run_experiment(manifest: DatasetManifest, features: Mapping[str, np.ndarray], task: str,
                   subset: str, feature: FeatureSpec, model, seed: int = 0, k: int = 5,
                   jobs: int = 1) -> EvalReport:
    """Subset filter, fold planning and cross-validation in one call."""
    data = manifest.subset(SUBSET_SEX[subset])
    plan = plan_folds(data, k, seed)
    return cross_validate(data, plan, task, subset, features, feature, model, seed, jobs)


def best_index(reports: Sequence[EvalReport], order: Optional[Sequence[int]] = None) -> int:
    """Highest uar_mean; ties -> lower uar_std, then earlier grid position."""
    if not reports:
        raise ValueError("empty grid")
    order = list(range(len(reports))) if order is None else list(order)
    return min(range(len(reports)), key=lambda i: (-reports[i].uar_mean, reports[i].uar_std, order[i]))


def grid_search(manifest: DatasetManifest, features: Mapping[str, np.ndarray], task: str,
                subset: str, feature: FeatureSpec, models: Sequence, seed: int = 0, k: int = 5,
                jobs: int = 1) -> Tuple[List[EvalReport], int]:
    """One full cross-validation per grid point; returns the reports and the best index."""
    if not models:
        raise ValueError("empty grid")
    reports = [run_experiment(manifest, features, task, subset, feature, m, seed, k, jobs)
               for m in models]
    order = []
    for m in models:
        hp = getattr(m, "hp", None)
        order.append(HP_ORDER.index(hp) if m.kind == "net" and hp in HP_ORDER else len(order))
    return reports, best_index(reports, order)


# --------------------------------------------------------------------------
# serialization


def report_document(reports: Sequence[EvalReport], best: Optional[int] = None,
                    timestamp: Optional[str] = None) -> dict:
    if best is None and reports:
        best = best_index(reports)
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "timestamp": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "best": best,
        "reports": [r.to_dict() for r in reports],
    }


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def load_report_document(text: str) -> dict:
    doc = json.loads(text)
    version = doc.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ValueError(f"report schema {version!r} != {REPORT_SCHEMA_VERSION!r}")
    return doc


def _row_label(r: dict) -> str:
    feat = r["feature"]["name"] + (f" ({r['feature']['aggregation']})" if r["feature"]["aggregation"] else "")
    model = r["model"].get("architecture", r["model"]["kind"])
    return f"{feat} + {model}"


def render_table(reports: Sequence[dict], best: Optional[int] = None, sort: bool = False) -> str:
    """Aligned text table with Ø / ± columns (percent); best row per task/subset is starred."""
    groups: Dict[str, List[int]] = defaultdict(list)
    for i, r in enumerate(reports):
        groups[r["task"]].append(i)
    best_rows = set()
    per_cell: Dict[Tuple[str, str], int] = {}
    for i, r in enumerate(reports):
        cell = (r["task"], r["subset"])
        j = per_cell.get(cell)
        if j is None or (-r["uar_mean"], r["uar_std"]) < (-reports[j]["uar_mean"], reports[j]["uar_std"]):
            per_cell[cell] = i
    best_rows.update(per_cell.values())
    if best is not None:
        best_rows = {best} | (best_rows if len(per_cell) > 1 else set())
    lines = []
    for task in TASKS:
        idx = groups.get(task)
        if not idx:
            continue
        if sort:
            idx = sorted(idx, key=lambda i: (-reports[i]["uar_mean"], reports[i]["uar_std"], i))
        rows = [(_row_label(reports[i]), reports[i]["subset"], str(reports[i]["hp"]),
                 f"{100 * reports[i]['uar_mean']:.1f}", f"{100 * reports[i]['uar_std']:.1f}",
                 "*" if i in best_rows else "") for i in idx]
        head = ("features + model", "subset", "hp", "Ø [%]", "± [%]", "best")
        widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
        lines.append(f"== task: {task} ==")
        fmt = "  ".join(f"{{:<{w}}}" if c < 3 else f"{{:>{w}}}" for c, w in enumerate(widths))
        lines.append(fmt.format(*head))
        lines.append("  ".join("-" * w for w in widths))
        lines += [fmt.format(*row) for row in rows]
        lines.append("")
    return "\n".join(lines)

