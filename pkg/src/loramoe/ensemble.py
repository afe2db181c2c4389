"""Parameter-free aggregation of base learners and task-level hard voting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .training import MetricsReport


class EmptyBank(ValueError):
    pass


@dataclass
class LearnerBank:
    """Probability outputs ``(B, 2)`` of several learners on one test set."""

    outputs: list[np.ndarray] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def add(self, probs: np.ndarray, name: str = "") -> None:
        probs = np.asarray(probs, dtype=np.float64)
        if self.outputs and probs.shape != self.outputs[0].shape:
            raise ValueError("all members must score the same test rows")
        self.outputs.append(probs)
        self.names.append(name or f"BL_{len(self.outputs)}")

    def __len__(self) -> int:
        return len(self.outputs)


def _stack(bank) -> np.ndarray:
    outputs = bank.outputs if isinstance(bank, LearnerBank) else list(bank)
    if not outputs:
        raise EmptyBank("cannot aggregate an empty bank")
    return np.stack(outputs)


def stack_mean(bank) -> np.ndarray:
    return _stack(bank).mean(axis=0)


def stack_max(bank) -> np.ndarray:
    """Per-class maximum over members, rows renormalized to sum to 1."""
    m = _stack(bank).max(axis=0)
    return m / m.sum(axis=1, keepdims=True)


STACKERS: dict[str, Callable] = {"StackMax": stack_max, "StackMean": stack_mean}


@dataclass
class VoteCouncil:
    """Per-task hard votes, ``votes[t, s]`` = class task ``t`` predicts for subject ``s``.

    ``-1`` marks a missing vote.
    """

    votes: np.ndarray

    @classmethod
    def from_predictions(cls, per_task: Sequence[np.ndarray]) -> "VoteCouncil":
        return cls(np.vstack([np.asarray(p, dtype=np.int64) for p in per_task]))

    @property
    def n_tasks(self) -> int:
        return self.votes.shape[0]

    def patient_fraction(self) -> np.ndarray:
        cast = (self.votes == 1).sum(axis=0)
        return cast / np.maximum((self.votes >= 0).sum(axis=0), 1)


class MissingVote(ValueError):
    pass


def hard_vote(council: VoteCouncil, allow_partial: bool = False) -> np.ndarray:
    """Majority class per subject; a tied count goes to Patient (1)."""
    votes = np.asarray(council.votes)
    if not allow_partial and (votes < 0).any():
        t, s = np.argwhere(votes < 0)[0]
        raise MissingVote(f"task {t} has no vote for subject {s}")
    patient = (votes == 1).sum(axis=0)
    healthy = (votes == 0).sum(axis=0)
    return (patient >= healthy).astype(np.int64)


# ---------------------------------------------------------------- repetitions

@dataclass
class RepetitionStats:
    mean: dict[str, float]
    std: dict[str, float]
    repetitions: int

    @classmethod
    def from_values(cls, values: dict[str, Sequence[float]]) -> "RepetitionStats":
        lengths = {len(v) for v in values.values()}
        if len(lengths) != 1 or 0 in lengths:
            raise ValueError("every metric needs the same, non-zero number of repetitions")
        return cls(
            mean={k: float(np.mean(v)) for k, v in values.items()},
            std={k: float(np.std(v)) for k, v in values.items()},
            repetitions=lengths.pop(),
        )

    @classmethod
    def from_reports(cls, reports: Sequence[MetricsReport]) -> "RepetitionStats":
        keys = list(MetricsReport.FIELDS)
        if all(r.train_time_s is not None for r in reports):
            keys.append("train_time_s")
        return cls.from_values({k: [getattr(r, k) for r in reports] for k in keys})


def rep_seed(base_seed: int, rep: int) -> int:
    return int(base_seed) ^ int(rep)


def repeat_experiment(run_once: Callable[[int], MetricsReport], repetitions: int, base_seed: int) -> RepetitionStats:
    """Call ``run_once(seed)`` with ``seed = base_seed ^ rep`` and summarise.

    ``run_once`` performs the split, training and evaluation for one
    repetition. Standard deviations are population (ddof=0).
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    return RepetitionStats.from_reports([run_once(rep_seed(base_seed, r)) for r in range(repetitions)])
