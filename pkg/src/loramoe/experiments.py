"""Declarative experiment specs and the runner that turns them into result tables.

Protocols
---------
HIDDEN_SWEEP, EXPERT_SWEEP, RANK_SWEEP, DEPTH_STUDY
    One model per sweep value (BL_1, BL_2, ...) per architecture, trained
    on the 450-feature subject representation, plus StackMax / StackMean
    rows. Every row is averaged over seeded repetitions of the 75/25
    subject split.
TASK_LEVEL
    Each (subject, task) pair is one 18-feature sample. The split stays at
    subject level so no subject appears on both sides.
VOTE_BY_TASK
    One model per task and hidden size; the 25 task predictions of a test
    subject are combined by hard voting. Stack rows aggregate the hidden
    sizes per task before voting.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import ensemble as E
from .autograd import BalanceConfig
from .layers import KINDS, Model, build_model, predict_proba
from .numerics import Rng, use_backend
from .training import (ConfusionCounts, MetricsReport, TrainConfig, confusion,
                       confusion_from_predictions, metrics, predict_class, train)

log = logging.getLogger(__name__)

PROTOCOLS = ("HIDDEN_SWEEP", "EXPERT_SWEEP", "RANK_SWEEP", "TASK_LEVEL", "DEPTH_STUDY", "VOTE_BY_TASK")
SWEPT = {
    "HIDDEN_SWEEP": "hidden", "TASK_LEVEL": "hidden", "DEPTH_STUDY": "hidden", "VOTE_BY_TASK": "hidden",
    "EXPERT_SWEEP": "n_experts", "RANK_SWEEP": "rank",
}
ARCH_LABEL = {"LoRAMoE": "LoRA-MoE", "MoE": "MoE", "MLP": "MLP"}
VOTE_PREFIX = {"LoRAMoE": "LM", "MoE": "MoE", "MLP": "MLP"}
CSV_COLUMNS = ("arch", "model", "accuracy", "sensitivity", "specificity", "auc", "precision", "f1", "time_s")

SUBJECT_LEVEL_NOTE = (
    "450-feature subject-level models; each row is the mean over seeded "
    "repetitions of a 75/25 subject split, not a per-task average"
)


@dataclass
class Fixed:
    depth: int = 2
    hidden: int = 300
    n_experts: int = 6
    rank: int = 2
    alpha: float = 1.0
    top_k: int = 1


@dataclass
class ExperimentSpec:
    name: str
    protocol: str
    sweep: tuple
    architectures: tuple = ("LoRAMoE", "MoE", "MLP")
    fixed: Fixed = field(default_factory=Fixed)
    train: TrainConfig = field(default_factory=TrainConfig)
    repetitions: int = 20
    seed: int = 0
    record_time: bool = True

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        self.sweep = tuple(int(v) for v in self.sweep)
        if not self.sweep:
            raise ValueError("sweep values must be non-empty")
        self.architectures = tuple(self.architectures)
        bad = [a for a in self.architectures if a not in KINDS]
        if bad:
            raise ValueError(f"unknown architectures {bad}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if isinstance(self.fixed, dict):
            self.fixed = Fixed(**self.fixed)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.fixed.depth < 2:
            raise ValueError("depth must be >= 2")
        if not 1 <= self.fixed.top_k <= self.fixed.n_experts and self.protocol != "EXPERT_SWEEP":
            raise ValueError("top_k must lie in 1..n_experts")
        if self.protocol == "EXPERT_SWEEP" and min(self.sweep) < self.fixed.top_k:
            raise ValueError("every swept expert count must be >= top_k")

    @property
    def swept(self) -> str:
        return SWEPT[self.protocol]

    def model_kwargs(self, value: int) -> dict:
        kw = dataclasses.asdict(self.fixed)
        kw[self.swept] = value
        return kw

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _train_defaults() -> TrainConfig:
    return TrainConfig(epochs=300, batch_size=0, learning_rate=1e-3, optimizer="ADAM")


def built_in_specs() -> dict[str, ExperimentSpec]:
    hidden_50_400 = tuple(range(50, 401, 50))
    return {
        "hidden_sweep": ExperimentSpec(
            "hidden_sweep", "HIDDEN_SWEEP", hidden_50_400,
            fixed=Fixed(depth=2, n_experts=6, rank=2), train=_train_defaults()),
        "expert_sweep": ExperimentSpec(
            "expert_sweep", "EXPERT_SWEEP", tuple(range(3, 11)),
            fixed=Fixed(depth=2, hidden=300, rank=2), train=_train_defaults()),
        "rank_sweep": ExperimentSpec(
            "rank_sweep", "RANK_SWEEP", tuple(range(1, 9)),
            fixed=Fixed(depth=2, hidden=300, n_experts=6), train=_train_defaults()),
        "task_level": ExperimentSpec(
            "task_level", "TASK_LEVEL", tuple(range(5, 41, 5)),
            fixed=Fixed(depth=2, n_experts=5, rank=2), train=_train_defaults()),
        "depth5": ExperimentSpec(
            "depth5", "DEPTH_STUDY", hidden_50_400,
            fixed=Fixed(depth=5, n_experts=6, rank=2), train=_train_defaults()),
        "depth8": ExperimentSpec(
            "depth8", "DEPTH_STUDY", hidden_50_400,
            fixed=Fixed(depth=8, n_experts=6, rank=2), train=_train_defaults()),
        "vote_by_task": ExperimentSpec(
            "vote_by_task", "VOTE_BY_TASK", tuple(range(5, 26, 5)),
            fixed=Fixed(depth=3, n_experts=5, rank=1, alpha=1.0, top_k=1), train=_train_defaults(),
            repetitions=20),
    }


def override(spec: ExperimentSpec, **changes) -> ExperimentSpec:
    """Copy of ``spec`` with fields replaced; ``fixed``/``train`` accept partial dicts."""
    fixed = changes.pop("fixed", None)
    tr = changes.pop("train", None)
    new = dataclasses.replace(spec, **changes)
    if fixed:
        new.fixed = dataclasses.replace(spec.fixed, **fixed)
    if tr:
        tr = dict(tr)
        if isinstance(tr.get("balance"), dict):
            tr["balance"] = dataclasses.replace(spec.train.balance, **tr["balance"])
        new.train = dataclasses.replace(spec.train, **tr)
    # validate the merged result
    return ExperimentSpec(**{f.name: getattr(new, f.name) for f in dataclasses.fields(new)})


# ---------------------------------------------------------------- results

@dataclass
class ResultRow:
    arch: str
    model: str
    metrics: MetricsReport
    std: dict = field(default_factory=dict)


@dataclass
class ResultTable:
    spec: ExperimentSpec
    rows: list[ResultRow] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def row(self, arch: str, model: str) -> ResultRow:
        for r in self.rows:
            if r.arch == arch and r.model == model:
                return r
        raise KeyError((arch, model))

    def rows_for(self, arch: str) -> list[ResultRow]:
        return [r for r in self.rows if r.arch == arch]

    def base_learners(self, arch: str) -> list[ResultRow]:
        return [r for r in self.rows_for(arch) if not r.model.startswith("Stack")
                and not r.model.endswith(("-Mean", "-Max"))]


def _summarize(arch: str, model: str, reports: list[MetricsReport]) -> ResultRow:
    stats = E.RepetitionStats.from_reports(reports)
    m = MetricsReport(**{k: stats.mean[k] for k in MetricsReport.FIELDS},
                      train_time_s=stats.mean.get("train_time_s"))
    return ResultRow(arch, model, m, dict(stats.std))


def _model_seed(rep_seed: int, arch_idx: int, k: int) -> int:
    return int(Rng(rep_seed, arch_idx, k, 0x7A1).integers(0, 2**62))


def _fit(spec: ExperimentSpec, arch: str, arch_idx: int, k: int, value: int, rep_seed: int,
         X: np.ndarray, y: np.ndarray) -> tuple[Model, float | None]:
    kw = spec.model_kwargs(value)
    model = build_model(arch, X.shape[1], kw["hidden"], kw["depth"], n_experts=kw["n_experts"],
                        rank=kw["rank"], alpha=kw["alpha"], top_k=kw["top_k"],
                        rng=Rng(rep_seed, arch_idx, k))
    cfg = dataclasses.replace(spec.train, seed=_model_seed(rep_seed, arch_idx, k))
    res = train(model, X, y, cfg)
    return res.model, (res.train_time_s if spec.record_time else None)


def _eval(probs: np.ndarray, y: np.ndarray, t: float | None) -> MetricsReport:
    return metrics(confusion(probs, y), probs, y, t)


def _rep_datasets(spec: ExperimentSpec, data: D.Dataset, rep_seed: int):
    split = D.split_subjects(data.n, rep_seed)
    if spec.protocol == "TASK_LEVEL":
        train_views, test_views = [], []
        for v in D.task_views(data):
            tr, te = D.prepare_split(v, split)
            train_views.append(tr)
            test_views.append(te)
        return D.task_level_samples(train_views)[0], D.task_level_samples(test_views)[0]
    return D.prepare_split(data, split)


def _run_sweep(spec: ExperimentSpec, data: D.Dataset) -> ResultTable:
    reports: dict[tuple[str, str], list[MetricsReport]] = {}
    for rep in range(spec.repetitions):
        rs = E.rep_seed(spec.seed, rep)
        train_ds, test_ds = _rep_datasets(spec, data, rs)
        for a_idx, arch in enumerate(spec.architectures):
            bank = E.LearnerBank()
            for k, value in enumerate(spec.sweep):
                model, t = _fit(spec, arch, a_idx, k, value, rs, train_ds.features, train_ds.labels)
                probs = predict_proba(model, test_ds.features)
                bank.add(probs, f"BL_{k + 1}")
                reports.setdefault((arch, f"BL_{k + 1}"), []).append(_eval(probs, test_ds.labels, t))
            for name, stacker in E.STACKERS.items():
                reports.setdefault((arch, name), []).append(_eval(stacker(bank), test_ds.labels, None))
        log.info("%s: repetition %d/%d done", spec.name, rep + 1, spec.repetitions)

    table = ResultTable(spec, extra={"interpretation": SUBJECT_LEVEL_NOTE})
    if spec.protocol == "TASK_LEVEL":
        table.extra["interpretation"] = (
            "each (subject, task) pair is one 18-feature sample; split at subject level; "
            "features standardized per task with training-subject statistics")
    for arch in spec.architectures:
        names = [f"BL_{k + 1}" for k in range(len(spec.sweep))] + list(E.STACKERS)
        for name in names:
            table.rows.append(_summarize(ARCH_LABEL[arch], name, reports[(arch, name)]))
    table.extra["sweep_parameter"] = spec.swept
    table.extra["bl_values"] = {f"BL_{k + 1}": v for k, v in enumerate(spec.sweep)}
    return table


def _vote_metrics(council: E.VoteCouncil, y: np.ndarray, t: float | None) -> MetricsReport:
    pred = E.hard_vote(council)
    return metrics(confusion_from_predictions(pred, y), council.patient_fraction(), y, t)


def _run_vote(spec: ExperimentSpec, data: D.Dataset) -> ResultTable:
    reports: dict[tuple[str, str], list[MetricsReport]] = {}
    per_task: dict[tuple[str, str, int], list[ConfusionCounts]] = {}
    single_acc: dict[tuple[str, str], list[float]] = {}
    for rep in range(spec.repetitions):
        rs = E.rep_seed(spec.seed, rep)
        # split first, then decompose, so a subject is wholly train or test
        split = D.split_subjects(data.n, rs)
        views = [D.prepare_split(v, split) for v in D.task_views(data)]
        y_test = views[0][1].labels
        for a_idx, arch in enumerate(spec.architectures):
            prefix = VOTE_PREFIX[arch]
            names = [f"{prefix}-{v}" for v in spec.sweep]
            task_probs = {n: [] for n in names}
            times = {n: 0.0 for n in names}
            for t_idx, (tr, te) in enumerate(views):
                for k, (value, name) in enumerate(zip(spec.sweep, names)):
                    model, t = _fit(spec, arch, a_idx, k * 64 + t_idx, value, rs, tr.features, tr.labels)
                    probs = predict_proba(model, te.features)
                    task_probs[name].append(probs)
                    times[name] += t or 0.0
            for label, stacker in (("Mean", E.stack_mean), ("Max", E.stack_max)):
                name = f"{prefix}-{label}"
                task_probs[name] = [stacker([task_probs[n][t] for n in names]) for t in range(len(views))]
            for name, probs_list in task_probs.items():
                preds = [predict_class(p) for p in probs_list]
                for t_idx, p in enumerate(preds):
                    per_task.setdefault((arch, name, t_idx), []).append(confusion_from_predictions(p, y_test))
                single_acc.setdefault((arch, name), []).extend(float(np.mean(p == y_test)) for p in preds)
                t = times.get(name) if spec.record_time else None
                reports.setdefault((arch, name), []).append(
                    _vote_metrics(E.VoteCouncil.from_predictions(preds), y_test, t))
        log.info("%s: repetition %d/%d done", spec.name, rep + 1, spec.repetitions)

    table = ResultTable(spec, extra={
        "interpretation": "hard vote over 25 task models per subject; rows are mean over repetitions, "
                          "std holds the population standard deviation; AUC scores are Patient vote fractions",
    })
    task_rows, single = [], {}
    for arch in spec.architectures:
        prefix = VOTE_PREFIX[arch]
        for name in [f"{prefix}-{v}" for v in spec.sweep] + [f"{prefix}-Mean", f"{prefix}-Max"]:
            table.rows.append(_summarize(ARCH_LABEL[arch], name, reports[(arch, name)]))
            single[f"{ARCH_LABEL[arch]}/{name}"] = float(np.mean(single_acc[(arch, name)]))
            for t_idx in range(data.task_count):
                cs = per_task[(arch, name, t_idx)]
                task_rows.append({
                    "arch": ARCH_LABEL[arch], "model": name, "task": t_idx + 1,
                    "accuracy": float(np.mean([(c.tp + c.tn) / c.n for c in cs])),
                    "sensitivity": float(np.mean([c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0 for c in cs])),
                    "specificity": float(np.mean([c.tn / (c.tn + c.fp) if c.tn + c.fp else 0.0 for c in cs])),
                })
    table.extra["per_task"] = task_rows
    table.extra["single_task_mean_accuracy"] = single
    return table


def run(spec: ExperimentSpec, data: D.Dataset) -> ResultTable:
    """Run every repetition of ``spec`` on ``data``; deterministic per ``spec.seed``."""
    with use_backend("blas"):
        if spec.protocol == "VOTE_BY_TASK":
            return _run_vote(spec, data)
        return _run_sweep(spec, data)


# ---------------------------------------------------------------- emission

def _cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def to_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in table.rows:
        m = r.metrics
        w.writerow([r.arch, r.model, *(_cell(getattr(m, k)) for k in MetricsReport.FIELDS), _cell(m.train_time_s)])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def to_json(table: ResultTable) -> str:
    doc = {
        "version": __version__,
        "spec": table.spec.to_dict(),
        "seed": table.spec.seed,
        "columns": list(CSV_COLUMNS),
        "rows": [
            {"arch": r.arch, "model": r.model, **r.metrics.as_dict(), "std": r.std}
            for r in table.rows
        ],
        "extra": table.extra,
    }
    return json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n"


def emit(table: ResultTable, fmt: str, path) -> Path:
    fmt = fmt.upper()
    if fmt not in ("CSV", "JSON"):
        raise ValueError(f"unknown output format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv(table) if fmt == "CSV" else to_json(table), encoding="utf-8")
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in CSV_COLUMNS[2:]:
            r[k] = float(r[k]) if r[k] != "" else None
    return rows


def efficiency_rows(table: ResultTable) -> list[dict]:
    """Accuracy per second of training for rows that carry a time."""
    out = []
    for r in table.rows:
        t = r.metrics.train_time_s
        out.append({"arch": r.arch, "model": r.model, "accuracy": r.metrics.accuracy, "time_s": t,
                    "efficiency": r.metrics.accuracy / t if t else None})
    return out


def emit_efficiency(table: ResultTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arch", "model", "accuracy", "time_s", "efficiency"])
        for r in efficiency_rows(table):
            w.writerow([r["arch"], r["model"], _cell(r["accuracy"]), _cell(r["time_s"]), _cell(r["efficiency"])])
    return path


# ---------------------------------------------------------------- config files

DATA_ENV = "LORAMOE_DARWIN"


@dataclass
class RunConfig:
    spec: ExperimentSpec
    data_path: str | None
    out_format: str = "CSV"
    out_path: str | None = None


def parse_config(doc: dict) -> RunConfig:
    """Build a run from a config mapping.

    ``spec`` optionally names a built-in to start from; every other key
    overrides it. Keys: protocol, architectures, sweep,
    fixed{depth,hidden,n_experts,rank,alpha,top_k},
    train{epochs,lr,optimizer,batch_size,balance{enabled,lambda,dispersion}},
    repetitions, seed, record_time, data_path, out{format,path}.
    """
    doc = dict(doc)
    base_name = doc.pop("spec", None)
    if base_name is not None:
        catalog = built_in_specs()
        if base_name not in catalog:
            raise ValueError(f"unknown built-in spec {base_name!r}; choose from {sorted(catalog)}")
        spec = catalog[base_name]
    else:
        if "protocol" not in doc or "sweep" not in doc:
            raise ValueError("config needs either 'spec' or both 'protocol' and 'sweep'")
        spec = ExperimentSpec(doc.get("name", "custom"), doc["protocol"].upper(), tuple(doc["sweep"]),
                              train=_train_defaults())

    changes = {}
    for key in ("name", "repetitions", "seed", "record_time"):
        if key in doc:
            changes[key] = doc[key]
    if "protocol" in doc:
        changes["protocol"] = doc["protocol"].upper()
    if "sweep" in doc:
        changes["sweep"] = tuple(doc["sweep"])
    if "architectures" in doc:
        changes["architectures"] = tuple(doc["architectures"])
    if "fixed" in doc:
        changes["fixed"] = dict(doc["fixed"])
    if "train" in doc:
        tr = dict(doc["train"])
        if "lr" in tr:
            tr["learning_rate"] = tr.pop("lr")
        if "balance" in tr:
            bal = dict(tr["balance"])
            if "lambda" in bal:
                bal["lam"] = bal.pop("lambda")
            tr["balance"] = bal
        changes["train"] = tr
    spec = override(spec, **changes)

    out = doc.get("out") or {}
    return RunConfig(spec, doc.get("data_path"), str(out.get("format", "CSV")).upper(), out.get("path"))


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return parse_config(doc)
