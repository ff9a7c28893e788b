"""Seeded synthetic exam datasets standing in for a private screening cohort.

Each exam holds four 3-channel images (macula- and disc-centred, both eyes).
Grade is encoded by bright lesion-like Gaussian blobs on a dark fundus disc:
the blob count is Poisson(1 + 2 * grade * strength) and the per-image lesion
intensity is 0.3 + 0.1 * grade * strength plus Gaussian jitter.
"""

from __future__ import annotations

import datetime as dt
from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import ndimage

from .data import (
    FIELDS,
    FINDING_PHRASES,
    FINDINGS,
    GRADE_PHRASES,
    LATERALITIES,
    DRGrade,
    EyeDiagnosis,
    EyeImage,
    ExamRecord,
)

N_GRADES = len(DRGrade)
LESION_INTENSITY_BASE = 0.3
LESION_INTENSITY_SLOPE = 0.1
LESION_INTENSITY_JITTER = 0.06
_LESION_COLOR = np.array([1.0, 0.9, 0.45])
_BACKGROUND = np.array([0.45, 0.18, 0.08])
_EPOCH = dt.date(2004, 1, 1)
_TREATMENTS = ("diet", "oral antidiabetics", "insulin")


class SyntheticSpec(BaseModel):
    seed: int = 0
    n_patients: int = Field(100, ge=1)
    exams_per_patient: Tuple[int, int] = (1, 3)
    image_size: Tuple[int, int] = (32, 32)
    grade_signal_strength: float = Field(1.0, ge=0.0, le=1.0)
    prior_correlation: float = Field(0.5, ge=0.0, le=1.0)
    prior_band: int = Field(1, ge=0, le=N_GRADES - 1)
    # chance that the fellow eye shares the first eye's grade at a first exam
    inter_eye_agreement: float = Field(0.7, ge=0.0, le=1.0)
    ungradable_fraction: float = Field(0.0, ge=0.0, le=1.0)
    finding_rate: float = Field(0.1, ge=0.0, le=1.0)

    model_config = {"frozen": True, "extra": "forbid"}

    @field_validator("image_size")
    @classmethod
    def _size(cls, v):
        if min(v) < 16:
            raise ValueError("image sides must be >= 16")
        return v

    @model_validator(mode="after")
    def _exam_range(self):
        lo, hi = self.exams_per_patient
        if not 1 <= lo <= hi:
            raise ValueError("exams_per_patient must satisfy 1 <= min <= max")
        return self


def lesion_intensity(grade: int, strength: float) -> float:
    return LESION_INTENSITY_BASE + LESION_INTENSITY_SLOPE * grade * strength


def render_fundus(rng: np.random.Generator, grade: int, strength: float, size: Tuple[int, int],
                  laterality: str, field: str, ungradable: bool = False) -> tuple[np.ndarray, int]:
    """Draw one image; returns (H x W x 3 pixels in [0, 1], lesion count)."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = 0.46 * min(h, w)
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2

    img = np.zeros((h, w, 3))
    img[disc] = _BACKGROUND
    # optic disc: centred for disc-field images, nasal side for macula-field
    side = -1.0 if laterality == "left" else 1.0
    ox = cx if field == "disc" else cx + side * 0.3 * w
    od = np.exp(-((yy - cy) ** 2 + (xx - ox) ** 2) / (2 * (0.07 * w) ** 2))
    img += 0.35 * od[..., None] * np.array([1.0, 0.85, 0.6])
    # dark macula
    mx = cx - side * 0.25 * w if field == "disc" else cx
    mac = np.exp(-((yy - cy) ** 2 + (xx - mx) ** 2) / (2 * (0.08 * w) ** 2))
    img -= 0.12 * mac[..., None]

    count = int(rng.poisson(1.0 + 2.0 * grade * strength))
    amp = max(0.05, lesion_intensity(grade, strength) + rng.normal(0.0, LESION_INTENSITY_JITTER))
    if count:
        r = 0.8 * radius * np.sqrt(rng.uniform(size=count))
        theta = rng.uniform(0.0, 2 * np.pi, size=count)
        by = cy + r * np.sin(theta)
        bx = cx + r * np.cos(theta)
        sigma = 0.035 * min(h, w)
        d2 = (yy[None] - by[:, None, None]) ** 2 + (xx[None] - bx[:, None, None]) ** 2
        blobs = np.exp(-d2 / (2 * sigma ** 2)).sum(axis=0)
        img += amp * blobs[..., None] * _LESION_COLOR

    img += rng.normal(0.0, 0.02, size=img.shape)
    img *= disc[..., None]
    if ungradable:
        img = ndimage.gaussian_filter(img, sigma=(0.1 * min(h, w), 0.1 * min(h, w), 0))
        img = 0.3 * (img - img.mean()) + img.mean()
    return np.clip(img, 0.0, 1.0).astype(np.float32), count


def _next_grade(rng: np.random.Generator, prior: int, spec: SyntheticSpec) -> int:
    if rng.uniform() < spec.prior_correlation:
        lo = max(0, prior - spec.prior_band)
        hi = min(N_GRADES - 1, prior + spec.prior_band)
        return int(rng.integers(lo, hi + 1))
    return int(rng.integers(0, N_GRADES))


def conclusion_for(grades: dict, findings: dict) -> str:
    parts = []
    for side in LATERALITIES:
        text = GRADE_PHRASES[grades[side]]
        if findings[side]:
            text += " with " + " and ".join(findings[side])
        parts.append(f"{side} eye: {text}")
    worst = max(grades.values())
    if worst == 0:
        advice = "routine screening in two years"
    elif worst == 1:
        advice = "follow-up in one year"
    elif worst == 2:
        advice = "follow-up in six months"
    else:
        advice = "refer to specialist"
    return "; ".join(parts) + ". " + advice


def _patient_exams(spec: SyntheticSpec, index: int) -> list[ExamRecord]:
    rng = np.random.default_rng([spec.seed, index])
    pid = f"P{index:05d}"
    lo, hi = spec.exams_per_patient
    n_exams = int(rng.integers(lo, hi + 1))
    clinical_base = {
        "diabetes_type": int(rng.choice([1, 2], p=[0.2, 0.8])),
        "years_diabetic": int(rng.integers(1, 25)),
        "treatment": str(rng.choice(_TREATMENTS)),
        "hypertension": bool(rng.uniform() < 0.4),
    }
    date = _EPOCH + dt.timedelta(days=int(rng.integers(0, 3650)))
    records: list[ExamRecord] = []
    grades: dict = {}
    for k in range(n_exams):
        if k == 0:
            first = int(rng.integers(0, N_GRADES))
            other = first if rng.uniform() < spec.inter_eye_agreement else int(rng.integers(0, N_GRADES))
            grades = {"left": first, "right": other}
        else:
            grades = {side: _next_grade(rng, grades[side], spec) for side in LATERALITIES}
            date = date + dt.timedelta(days=int(rng.integers(180, 540)))
        findings = {side: [f for f in FINDINGS if rng.uniform() < spec.finding_rate] for side in LATERALITIES}

        images = []
        for side in LATERALITIES:
            for fld in FIELDS:
                bad = bool(rng.uniform() < spec.ungradable_fraction)
                pixels, count = render_fundus(rng, grades[side], spec.grade_signal_strength,
                                              spec.image_size, side, fld, ungradable=bad)
                images.append(EyeImage(laterality=side, field=fld,
                                       quality="ungradable" if bad else "gradable",
                                       pixels=pixels, lesion_count=count))
        clinical = dict(clinical_base)
        if records:
            clinical["years_diabetic"] += (date - records[0].exam_date).days // 365
        finding_phrases = {s: [FINDING_PHRASES[f] for f in findings[s]] for s in LATERALITIES}
        records.append(ExamRecord(
            patient_id=pid,
            exam_id=f"{pid}-E{k:02d}",
            exam_date=date,
            images=images,
            diagnosis_left=EyeDiagnosis(DRGrade(grades["left"]), tuple(findings["left"])),
            diagnosis_right=EyeDiagnosis(DRGrade(grades["right"]), tuple(findings["right"])),
            conclusion_text=conclusion_for(grades, finding_phrases),
            clinical=clinical,
            prior_exam_id=records[-1].exam_id if records else None,
        ))
    return records


def generate_synthetic(spec: SyntheticSpec) -> list[ExamRecord]:
    """Generate a dataset that is a pure function of ``spec``.

    Every patient draws from its own stream seeded by (seed, patient index),
    so patients can be generated in any order.
    """
    out: list[ExamRecord] = []
    for i in range(spec.n_patients):
        out.extend(_patient_exams(spec, i))
    return out
