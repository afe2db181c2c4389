"""DARWIN handwriting features: loading, subject-level splits, z-scoring, task views.

The CSV layout is the public DARWIN one: an ``ID`` column, 450 feature
columns named ``<feature><task>`` (18 features for each of 25 tasks) and a
``class`` column holding ``P`` (patient) or ``H`` (healthy). Columns are
reordered task-major on load, features within a task in ``FEATURES`` order,
so that task ``t`` occupies columns ``[18t, 18t + 18)``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import Rng

FEATURES = (
    "total_time", "air_time", "paper_time",
    "mean_speed_on_paper", "mean_speed_in_air",
    "mean_acc_on_paper", "mean_acc_in_air",
    "mean_jerk_on_paper", "mean_jerk_in_air",
    "gmrt_on_paper", "gmrt_in_air", "mean_gmrt",
    "num_of_pendown", "max_x_extension", "max_y_extension", "disp_index",
    "pressure_mean", "pressure_var",
)
N_TASKS = 25
N_SUBJECTS = 174
N_PATIENTS = 89
N_HEALTHY = 85
CLASS_CODES = {"P": 1, "H": 0}
STD_FLOOR = 1e-8


class DarwinFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    subject_ids: tuple
    feature_names: tuple
    task_count: int = N_TASKS
    features_per_task: int = len(FEATURES)
    task: int | None = None  # set on single-task views

    def __post_init__(self):
        if self.features.shape[0] != len(self.labels):
            raise ValueError("one label per row required")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("one name per feature column required")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            subject_ids=tuple(self.subject_ids[i] for i in rows),
        )

    def with_features(self, features: np.ndarray) -> "Dataset":
        return replace(self, features=np.ascontiguousarray(features, dtype=np.float64))


def feature_columns(n_tasks: int = N_TASKS) -> list[str]:
    return [f"{f}{t}" for t in range(1, n_tasks + 1) for f in FEATURES]


def load_darwin(path, expect_counts: bool = True) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DarwinFormatError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    lower = [h.lower() for h in header]
    if "id" not in lower:
        raise DarwinFormatError(f"{path}: missing ID column")
    if "class" not in lower:
        raise DarwinFormatError(f"{path}: missing class column")
    id_col, class_col = lower.index("id"), lower.index("class")

    wanted = feature_columns()
    position = {h: i for i, h in enumerate(header)}
    missing = [c for c in wanted if c not in position]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise DarwinFormatError(f"{path}: missing {len(missing)} feature columns: {shown}")
    extra = [h for i, h in enumerate(header) if i not in (id_col, class_col) and h not in set(wanted)]
    if extra:
        warnings.warn(f"{path}: ignoring unrecognised columns {extra[:5]}", stacklevel=2)

    cols = [position[c] for c in wanted]
    X = np.empty((len(rows), len(cols)))
    y = np.empty(len(rows), dtype=np.int64)
    ids = []
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DarwinFormatError(f"{path}: line {r} has {len(row)} cells, header has {len(header)}")
        ids.append(row[id_col].strip())
        code = row[class_col].strip().upper()
        if code not in CLASS_CODES:
            raise DarwinFormatError(f"{path}: line {r}: unknown class value {row[class_col]!r}")
        y[r - 2] = CLASS_CODES[code]
        for k, c in enumerate(cols):
            cell = row[c].strip()
            try:
                value = float(cell)
            except ValueError:
                raise DarwinFormatError(
                    f"{path}: line {r}, column {header[c]!r}: non-numeric value {cell!r}") from None
            if not math.isfinite(value):
                raise DarwinFormatError(f"{path}: line {r}, column {header[c]!r}: non-finite value")
            X[r - 2, k] = value

    if expect_counts:
        n_pos = int(y.sum())
        if (len(y), n_pos, len(y) - n_pos) != (N_SUBJECTS, N_PATIENTS, N_HEALTHY):
            warnings.warn(
                f"{path}: {len(y)} subjects ({n_pos} P / {len(y) - n_pos} H); "
                f"full DARWIN has {N_SUBJECTS} ({N_PATIENTS} P / {N_HEALTHY} H)",
                stacklevel=2,
            )
    return Dataset(X, y, tuple(ids), tuple(wanted))


def write_darwin(data: Dataset, path) -> None:
    """Write a dataset back out in DARWIN CSV layout."""
    inv = {v: k for k, v in CLASS_CODES.items()}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ID", *data.feature_names, "class"])
        for sid, row, lab in zip(data.subject_ids, data.features, data.labels):
            w.writerow([sid, *(repr(float(v)) for v in row), inv[int(lab)]])


def synthetic_darwin(n_subjects: int = N_SUBJECTS, n_patients: int | None = None,
                     seed: int = 0, signal: float = 1.2) -> Dataset:
    """A DARWIN-shaped dataset with a planted, noisy class signal.

    Each subject has a latent impairment score; a random subset of features
    per task shifts with it. Feature scales differ by orders of magnitude as
    in the real data, so standardization matters.
    """
    rng = Rng(seed, 0xDA7A)
    if n_patients is None:
        n_patients = round(n_subjects * N_PATIENTS / N_SUBJECTS)
    labels = np.zeros(n_subjects, dtype=np.int64)
    labels[rng.permutation(n_subjects)[:n_patients]] = 1
    d = N_TASKS * len(FEATURES)
    severity = labels * signal + rng.normal(n_subjects, scale=0.5)
    loadings = rng.normal(d) * (rng.uniform(0, 1, d) < 0.35)
    subject_style = rng.normal((n_subjects, 4))
    mixing = rng.normal((4, d)) * 0.4
    noise = rng.normal((n_subjects, d))
    z = np.outer(severity, loadings) + subject_style @ mixing + noise
    scales = 10.0 ** rng.uniform(-2, 4, d)
    X = np.abs(scales * (3.0 + z))
    ids = tuple(f"id_{i + 1}" for i in range(n_subjects))
    return Dataset(X, labels, ids, tuple(feature_columns()))


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray
    seed: int


def n_train_for(n: int, fraction: float = 0.75) -> int:
    return int(math.floor(fraction * n + 0.5))


def split_subjects(n: int, seed: int, fraction: float = 0.75) -> Split:
    """Seeded uniform shuffle; the first round-half-up(75%) are training subjects."""
    if n < 4:
        raise ValueError("need at least 4 subjects to split")
    perm = Rng(seed, 0x5911).permutation(n)
    k = n_train_for(n, fraction)
    return Split(np.sort(perm[:k]), np.sort(perm[k:]), seed)


# ---------------------------------------------------------------- scaling

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train_features: np.ndarray) -> "Standardizer":
        X = np.asarray(train_features, dtype=np.float64)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def transform(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=np.float64)
        return np.ascontiguousarray((X - self.mean) / self.std)


def standardize(train_features: np.ndarray, apply_to: np.ndarray) -> np.ndarray:
    """z-score ``apply_to`` with population statistics of ``train_features``."""
    return Standardizer.fit(train_features).transform(apply_to)


def prepare_split(data: Dataset, split: Split) -> tuple[Dataset, Dataset]:
    """Train/test datasets standardized with training statistics only."""
    train, test = data.subset(split.train), data.subset(split.test)
    scaler = Standardizer.fit(train.features)
    return train.with_features(scaler.transform(train.features)), test.with_features(scaler.transform(test.features))


# ---------------------------------------------------------------- task views

def task_views(data: Dataset) -> list[Dataset]:
    k = data.features_per_task
    if data.d != data.task_count * k:
        raise ValueError(f"task views need {data.task_count * k} columns, dataset has {data.d}")
    return [
        replace(
            data,
            features=np.ascontiguousarray(data.features[:, t * k:(t + 1) * k]),
            feature_names=data.feature_names[t * k:(t + 1) * k],
            task=t,
        )
        for t in range(data.task_count)
    ]


def task_level_samples(views: list[Dataset]) -> tuple[Dataset, np.ndarray]:
    """Stack task views into one (subject, task)-per-row dataset.

    Returns the stacked dataset and the task index of each row.
    """
    X = np.vstack([v.features for v in views])
    y = np.concatenate([v.labels for v in views])
    ids = tuple(s for v in views for s in v.subject_ids)
    tasks = np.repeat(np.arange(len(views)), [v.n for v in views])
    names = tuple(f for f in FEATURES) if views[0].d == len(FEATURES) else views[0].feature_names
    return Dataset(X, y, ids, names, task_count=1, features_per_task=views[0].d), tasks
