"""Text generation: label templates, eye-diagnosis summaries, clinical-temporal context.

All text comes from an editable template file and an augmentation map, both
JSON. The packaged defaults live in ``ctxvlf/resources``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Mapping, Optional, Protocol

from .data import FINDING_PHRASES, EyeDiagnosis

QUALITY_TOKENS = {"gradable": "gradable", "ungradable": "poor quality"}


class TextGenerator(Protocol):
    """Hook for an external summariser; must return a deterministic string."""

    def __call__(self, kind: str, **fields) -> str: ...


@dataclass(frozen=True)
class PromptBundle:
    primary_text: str
    variants: tuple = ()
    context_text: Optional[str] = None

    def __post_init__(self):
        if not self.primary_text:
            raise ValueError("primary_text must be non-empty")
        variants = tuple(dict.fromkeys(self.variants or (self.primary_text,)))
        object.__setattr__(self, "variants", variants)


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@lru_cache(maxsize=None)
def _default(name: str) -> dict:
    return json.loads(resources.files("ctxvlf.resources").joinpath(name).read_text(encoding="utf-8"))


def load_templates(path: Optional[os.PathLike | str] = None) -> dict:
    templates = dict(_default("templates.json"))
    if path is not None:
        templates.update(_read_json(path))
    return templates


def load_augmentations(path: Optional[os.PathLike | str] = None) -> dict:
    if path is None:
        return {k: list(v) for k, v in _default("augmentations.json").items()}
    return {k: list(v) for k, v in _read_json(path).items()}


@dataclass
class Prompter:
    """Bundles templates and augmentations so callers don't thread them everywhere."""

    templates: dict = field(default_factory=load_templates)
    augmentations: dict = field(default_factory=load_augmentations)
    generator: Optional[TextGenerator] = None

    @classmethod
    def from_files(cls, templates: Optional[str] = None, augmentations: Optional[str] = None) -> "Prompter":
        return cls(load_templates(templates), load_augmentations(augmentations))

    def label_prompt(self, label: str, quality: str = "gradable") -> PromptBundle:
        return label_prompt(label, quality, self.augmentations, self.templates)

    def eye_diagnosis_summary(self, diag: EyeDiagnosis, conclusion: str = "") -> str:
        if self.generator is not None:
            return self.generator("eye_summary", diagnosis=diag, conclusion=conclusion)
        return eye_diagnosis_summary(diag, conclusion, self.templates)

    def clinical_summary(self, clinical: Mapping) -> str:
        if self.generator is not None:
            return self.generator("clinical", clinical=clinical)
        return clinical_summary(clinical, self.templates)

    def clinical_temporal_text(self, clinical: Mapping, prior_result: Optional[str]) -> str:
        return clinical_temporal_text(self.clinical_summary(clinical), prior_result, self.templates)


def label_prompt(label: str, quality: str = "gradable", augmentations: Optional[Mapping] = None,
                 templates: Optional[Mapping] = None) -> PromptBundle:
    """Fill the quality-aware label template, one variant per augmentation phrase.

    ``quality`` may be a record quality ("gradable"/"ungradable") or the
    token placed in the template ("poor quality").
    """
    label = label.strip()
    if not label:
        raise ValueError("empty label")
    templates = templates if templates is not None else load_templates()
    augmentations = augmentations if augmentations is not None else load_augmentations()
    token = QUALITY_TOKENS.get(quality, quality)
    fill = templates["label"].format
    primary = fill(quality=token, label=label)
    variants = [primary] + [fill(quality=token, label=phrase) for phrase in augmentations.get(label, ())]
    return PromptBundle(primary_text=primary, variants=tuple(variants))


def eye_diagnosis_summary(diag: EyeDiagnosis, conclusion: str = "",
                          templates: Optional[Mapping] = None) -> str:
    t = templates if templates is not None else load_templates()
    summary = diag.dr_grade.phrase
    if diag.findings:
        summary = t["eye_summary_findings"].format(
            grade=summary, findings=" and ".join(FINDING_PHRASES[f] for f in diag.findings))
    if diag.other_text.strip():
        summary = t["eye_summary_other"].format(summary=summary, other=diag.other_text.strip())
    if conclusion.strip():
        summary = t["eye_summary_conclusion"].format(summary=summary, conclusion=conclusion.strip())
    return summary


def clinical_summary(clinical: Mapping, templates: Optional[Mapping] = None) -> str:
    """Render the clinical key-value map; unknown keys are ignored, missing ones skipped."""
    t = templates if templates is not None else load_templates()
    parts = []
    if "diabetes_type" in clinical and "years_diabetic" in clinical:
        parts.append(t["clinical"].format(**clinical))
    if clinical.get("treatment"):
        parts.append(t["clinical_treatment"].format(treatment=clinical["treatment"]))
    if clinical.get("hypertension"):
        parts.append(t["clinical_hypertension"])
    return ", ".join(parts)


def clinical_temporal_text(clinical: str | Mapping, prior_result: Optional[str],
                           templates: Optional[Mapping] = None) -> str:
    """Context string pairing clinical data with the previous exam's result.

    ``clinical`` is either an already rendered summary or a clinical map.
    """
    t = templates if templates is not None else load_templates()
    if not isinstance(clinical, str):
        clinical = clinical_summary(clinical, t)
    clinical = clinical.strip()
    if prior_result:
        text = t["prior_exam"].format(clinical=clinical, prior=prior_result)
    else:
        text = t["first_exam"].format(clinical=clinical)
    if not clinical:
        text = text.lstrip(". ")
        text = text[:1].upper() + text[1:]
    return text


def prior_result_text(left: Optional[EyeDiagnosis], right: Optional[EyeDiagnosis],
                      templates: Optional[Mapping] = None) -> Optional[str]:
    """Describe an exam's per-eye grades as one sentence fragment."""
    t = templates if templates is not None else load_templates()
    if left is None and right is None:
        return None
    if left is None or right is None:
        diag, side = (left, "left") if right is None else (right, "right")
        return f"{diag.dr_grade.phrase} in the {side} eye"
    if left.dr_grade == right.dr_grade:
        return t["prior_both_eyes"].format(left=left.dr_grade.phrase)
    return t["prior_per_eye"].format(left=left.dr_grade.phrase, right=right.dr_grade.phrase)
