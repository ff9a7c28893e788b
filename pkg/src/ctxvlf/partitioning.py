"""Patient-disjoint splitting and gradable-only filtering."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import ExamRecord


@dataclass(frozen=True)
class SplitPlan:
    train: frozenset
    validation: frozenset
    test: frozenset = frozenset()
    train_ratio: float = 0.8
    test_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise ValueError("split partitions share patients")

    def partition_of(self, patient_id: str) -> str:
        for name in ("train", "validation", "test"):
            if patient_id in getattr(self, name):
                return name
        raise KeyError(patient_id)

    def select(self, records: Iterable[ExamRecord], name: str) -> list[ExamRecord]:
        keep = getattr(self, name)
        return [r for r in records if r.patient_id in keep]

    def to_json(self) -> dict:
        return {
            "train": sorted(self.train),
            "validation": sorted(self.validation),
            "test": sorted(self.test),
            "train_ratio": self.train_ratio,
            "test_ratio": self.test_ratio,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitPlan":
        kw = {k: frozenset(obj.get(k, ())) for k in ("train", "validation", "test")}
        return cls(**kw, train_ratio=obj.get("train_ratio", 0.8), test_ratio=obj.get("test_ratio", 0.0),
                   seed=obj.get("seed", 0))

    def save(self, path: os.PathLike | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: os.PathLike | str) -> "SplitPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def split_patients(records: Iterable[ExamRecord], train_ratio: float = 0.8, seed: int = 0,
                   test_ratio: float = 0.0) -> SplitPlan:
    """Assign whole patients to train/validation (and optionally a held-out test set).

    Membership depends only on the sorted set of patient ids and the seed, so
    the input order of records is irrelevant. With ``test_ratio`` > 0 the test
    patients are drawn first and the ratio applies to the remainder.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie strictly between 0 and 1")
    if not 0.0 <= test_ratio < 1.0:
        raise ValueError("test_ratio must lie in [0, 1)")
    patients = sorted({r.patient_id for r in records})
    if len(patients) < 2:
        raise ValueError(f"need at least 2 distinct patients, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    n_test = int(round(test_ratio * len(shuffled)))
    test, rest = shuffled[:n_test], shuffled[n_test:]
    if len(rest) < 2:
        raise ValueError("too few patients left after the test hold-out")
    n_train = int(round(train_ratio * len(rest)))
    n_train = min(max(n_train, 1), len(rest) - 1)
    return SplitPlan(train=frozenset(rest[:n_train]), validation=frozenset(rest[n_train:]),
                     test=frozenset(test), train_ratio=train_ratio, test_ratio=test_ratio, seed=seed)


def filter_gradable(records: Iterable[ExamRecord]) -> list[ExamRecord]:
    """Drop ungradable images; exams left with no image are dropped entirely."""
    out = []
    for rec in records:
        kept = [im for im in rec.images if im.gradable]
        if not kept:
            continue
        if len(kept) == len(rec.images):
            out.append(rec)
        else:
            out.append(dataclasses.replace(rec, images=kept))
    return out
