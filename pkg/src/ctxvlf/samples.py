"""Model variants and per-variant sample assembly from exam records."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Optional

import torch
from pydantic import BaseModel, Field, model_validator

from .data import FIELDS, LATERALITIES, ExamRecord
from .encoders import image_tensor
from .prompting import Prompter, PromptBundle, prior_result_text

log = logging.getLogger(__name__)

BaseVariant = Literal[
    "unilateral-s", "unilateral-d-labels", "unilateral-d-summary", "bilateral-concl", "clinical-temporal",
]
VariantName = Literal[
    "unilateral-s", "unilateral-d-labels", "unilateral-d-summary", "bilateral-concl", "clinical-temporal",
    "combined",
]

IMAGES_PER_SAMPLE = {
    "unilateral-s": 1,
    "unilateral-d-labels": 2,
    "unilateral-d-summary": 2,
    "clinical-temporal": 2,
    "bilateral-concl": 4,
}
TEXT_SOURCE = {
    "unilateral-s": "label-template",
    "unilateral-d-labels": "label-template",
    "unilateral-d-summary": "eye-summary",
    "clinical-temporal": "label-template",
    "bilateral-concl": "conclusion",
}


class VariantConfig(BaseModel):
    variant: VariantName = "unilateral-d-labels"
    components: tuple[BaseVariant, ...] = ()
    context_fraction: float = Field(0.5, ge=0.0, le=1.0)
    # sub-variant whose samples drive validation/evaluation of a combined model
    eval_variant: Optional[BaseVariant] = None

    model_config = {"frozen": True, "extra": "forbid"}

    @model_validator(mode="after")
    def _check(self):
        if self.variant == "combined":
            if len(self.components) < 2:
                raise ValueError("combined variant needs at least 2 components")
            if len(set(self.components)) != len(self.components):
                raise ValueError("combined components must be distinct")
            if self.eval_variant is not None and self.eval_variant not in self.components:
                raise ValueError("eval_variant must be one of the components")
        elif self.components:
            raise ValueError("components are only valid for the combined variant")
        return self

    @property
    def streams(self) -> tuple[str, ...]:
        return self.components if self.variant == "combined" else (self.variant,)

    @property
    def evaluation_stream(self) -> str:
        return self.eval_variant or self.streams[0]

    @property
    def images_per_sample(self) -> int:
        return IMAGES_PER_SAMPLE[self.evaluation_stream]

    @property
    def text_source(self) -> str:
        return TEXT_SOURCE[self.evaluation_stream]

    @property
    def context_enabled(self) -> bool:
        return "clinical-temporal" in self.streams


@dataclass
class Sample:
    images: torch.Tensor  # (n, 3, H, W)
    prompt: PromptBundle
    category: str  # samples sharing a category are mutual positives
    grade: int
    labels: frozenset
    exam_id: str
    eye: Optional[str] = None

    @property
    def context_text(self) -> Optional[str]:
        return self.prompt.context_text


def prior_lookup(records: Iterable[ExamRecord], prompter: Optional[Prompter] = None) -> dict[str, str]:
    """exam_id -> description of that exam's per-eye DR grades."""
    templates = prompter.templates if prompter is not None else None
    out = {}
    for r in records:
        text = prior_result_text(r.diagnosis_left, r.diagnosis_right, templates)
        if text is not None:
            out[r.exam_id] = text
    return out


def _stack(images) -> torch.Tensor:
    return torch.stack([image_tensor(im.load()) for im in images])


def build_sample(exam: ExamRecord, variant: str, prompter: Prompter,
                 priors: Mapping[str, str] | None = None, skips: Counter | None = None) -> list[Sample]:
    """Assemble the training/evaluation samples a base variant draws from one exam.

    Unilateral variants give one sample per eye (or per image for
    unilateral-s); bilateral gives one per exam. Missing inputs skip the
    sample and increment ``skips[reason]``.
    """
    skips = skips if skips is not None else Counter()
    priors = priors or {}
    out: list[Sample] = []

    def skip(reason: str):
        skips[reason] += 1
        log.debug("skip %s: %s", exam.exam_id, reason)

    if variant == "bilateral-concl":
        images = [exam.image(side, f) for side in LATERALITIES for f in FIELDS]
        if any(im is None for im in images):
            skip("missing image")
        elif not exam.conclusion_text.strip():
            skip("missing conclusion")
        elif exam.diagnosis_left is None or exam.diagnosis_right is None:
            skip("missing diagnosis")
        else:
            text = exam.conclusion_text.strip()
            labels = {exam.diagnosis_left.dr_grade.token, exam.diagnosis_right.dr_grade.token}
            labels.update(exam.diagnosis_left.findings, exam.diagnosis_right.findings)
            out.append(Sample(
                images=_stack(images), prompt=PromptBundle(text), category=text,
                grade=int(max(exam.diagnosis_left.dr_grade, exam.diagnosis_right.dr_grade)),
                labels=frozenset(labels), exam_id=exam.exam_id))
        return out

    context = None
    if variant == "clinical-temporal":
        context = prompter.clinical_temporal_text(exam.clinical, priors.get(exam.prior_exam_id))

    for side in LATERALITIES:
        diag = exam.diagnosis(side)
        eye_images = [im for im in exam.images if im.laterality == side]
        if not eye_images:
            continue
        if diag is None:
            skip("missing diagnosis")
            continue
        labels = frozenset((diag.dr_grade.token, *diag.findings))
        if variant == "unilateral-s":
            groups = [[im] for im in eye_images]
        else:
            pair = [exam.image(side, f) for f in FIELDS]
            if any(im is None for im in pair):
                skip("missing image")
                continue
            groups = [pair]
        for group in groups:
            quality = "gradable" if all(im.gradable for im in group) else "ungradable"
            if variant == "unilateral-d-summary":
                text = prompter.eye_diagnosis_summary(diag, exam.conclusion_text)
                prompt, category = PromptBundle(text), text
            else:
                base = prompter.label_prompt(diag.dr_grade.phrase, quality)
                prompt = PromptBundle(base.primary_text, base.variants, context)
                category = diag.dr_grade.phrase
            out.append(Sample(images=_stack(group), prompt=prompt, category=category,
                              grade=int(diag.dr_grade), labels=labels, exam_id=exam.exam_id, eye=side))
    return out


def build_samples(records: Iterable[ExamRecord], variant: str, prompter: Prompter,
                  priors: Mapping[str, str] | None = None) -> tuple[list[Sample], Counter]:
    skips: Counter = Counter()
    samples = []
    for rec in records:
        samples.extend(build_sample(rec, variant, prompter, priors, skips))
    if skips:
        log.warning("%s: skipped %d samples (%s)", variant, sum(skips.values()), dict(skips))
    return samples, skips
