"""Zero-shot classification, per-class AUC reports and table rendering."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import yaml

from .data import FINDING_PHRASES, FINDINGS, GRADE_PHRASES, GRADE_TOKENS
from .encoders import DualEncoder
from .fusion import fuse_exam
from .metrics import auc
from .prompting import Prompter, PromptBundle
from .partitioning import filter_gradable
from .samples import Sample, VariantConfig, build_samples, prior_lookup

DR_CLASSES = GRADE_TOKENS


def class_phrase(name: str) -> str:
    if name in GRADE_TOKENS:
        return GRADE_PHRASES[GRADE_TOKENS.index(name)]
    if name in FINDINGS:
        return FINDING_PHRASES[name]
    raise ValueError(f"unknown class {name!r}; expected a DR grade token or a finding")


def class_prompts(classes: Sequence[str], prompter: Prompter) -> list[PromptBundle]:
    # evaluation sets are curated gradable images
    return [prompter.label_prompt(class_phrase(c), "gradable") for c in classes]


@torch.no_grad()
def class_embeddings(model: DualEncoder, prompts: Sequence[PromptBundle]) -> torch.Tensor:
    if not prompts:
        raise ValueError("need at least one class prompt")
    return torch.stack([model.ensemble_text(p.variants) for p in prompts])


@torch.no_grad()
def zero_shot_classify(model: DualEncoder, images: torch.Tensor, prompts: Sequence[PromptBundle],
                       context_text: Optional[str] = None) -> np.ndarray:
    """Cosine similarity between one fused exam embedding and each class prompt ensemble."""
    model.eval()
    emb = model.encode_image(images)
    ctx = model.encode_text(context_text) if context_text else None
    fused = fuse_exam(emb, ctx)
    return (class_embeddings(model, prompts) @ fused).cpu().numpy()


@torch.no_grad()
def zero_shot_scores(model: DualEncoder, samples: Sequence[Sample], prompts: Sequence[PromptBundle],
                     use_context: bool = False, batch_size: int = 256) -> np.ndarray:
    """(N, C) cosine scores for a list of samples with equal image counts."""
    model.eval()
    classes = class_embeddings(model, prompts)
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        emb = model.encode_image(torch.stack([s.images for s in chunk]))
        ctx = None
        if use_context and all(s.context_text for s in chunk):
            ctx = model.encode_text([s.context_text for s in chunk])
        out.append((fuse_exam(emb, ctx) @ classes.T).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, len(prompts)))


def per_class_auc(scores: np.ndarray, samples: Sequence[Sample], classes: Sequence[str]) -> dict:
    """One-vs-rest AUC per class; None where a class has no positives or no negatives."""
    result = {}
    for c_idx, name in enumerate(classes):
        is_pos = np.array([name in s.labels for s in samples], dtype=bool)
        if is_pos.all() or not is_pos.any():
            result[name] = None
        else:
            result[name] = auc(scores[is_pos, c_idx], scores[~is_pos, c_idx])
    return result


def evaluate_records(model: DualEncoder, variant: VariantConfig, records: Sequence, classes: Sequence[str],
                     prompter: Prompter, include_ungradable: bool = False) -> dict:
    """Per-class zero-shot AUC of ``model`` on exam records, using the variant's evaluation samples.

    Prior-exam context is looked up before quality filtering, so an exam
    whose predecessor had only ungradable images still gets its history.
    """
    priors = prior_lookup(records, prompter)
    if not include_ungradable:
        records = filter_gradable(records)
    samples, _ = build_samples(records, variant.evaluation_stream, prompter, priors)
    if not samples:
        return {c: None for c in classes}
    scores = zero_shot_scores(model, samples, class_prompts(classes, prompter), use_context=variant.context_enabled)
    return per_class_auc(scores, samples, classes)


def macro_auc(aucs: Mapping[str, Optional[float]]) -> float:
    vals = [v for v in aucs.values() if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    model_id: str
    config_hash: str
    results: dict = field(default_factory=dict)  # dataset -> class -> auc | None
    headline: dict = field(default_factory=dict)  # dataset -> designated class
    source: str = "computed"

    def __post_init__(self):
        for ds, cells in self.results.items():
            for c, v in cells.items():
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"AUC out of range for {ds}/{c}: {v}")

    def macro(self, dataset: str) -> float:
        return macro_auc(self.results[dataset])

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "config_hash": self.config_hash, "results": self.results,
                "headline": self.headline, "source": self.source}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(model_id=obj["model_id"], config_hash=obj.get("config_hash", ""),
                   results={d: dict(c) for d, c in obj["results"].items()},
                   headline=dict(obj.get("headline", {})), source=obj.get("source", "computed"))

    def save(self, path: os.PathLike | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: os.PathLike | str) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def load_baselines(path: os.PathLike | str) -> list[EvalReport]:
    """Static comparison rows supplied by the user (e.g. published numbers).

    Accepts JSON or YAML: a list of {name, results: {dataset: {class: auc}}}.
    """
    with open(path, encoding="utf-8") as fh:
        rows = yaml.safe_load(fh) or []
    return [EvalReport(model_id=r["name"], config_hash="", results=r["results"],
                       headline=r.get("headline", {}), source="paper-reported") for r in rows]


def render_table(reports: Iterable[EvalReport], columns: Optional[Sequence[tuple[str, str]]] = None) -> str:
    """Plain-text grid: one row per model, one column per (dataset, class), 3 decimals."""
    reports = list(reports)
    if columns is None:
        columns = []
        for rep in reports:
            for ds, cells in rep.results.items():
                for c in cells:
                    if (ds, c) not in columns:
                        columns.append((ds, c))
    names = [r.model_id + (" (paper-reported)" if r.source == "paper-reported" else "") for r in reports]
    width0 = max([len("Model")] + [len(n) for n in names])
    heads = [f"{ds}:{c}" for ds, c in columns]
    widths = [max(len(h), 5) for h in heads]
    lines = [" | ".join(["Model".ljust(width0)] + [h.rjust(w) for h, w in zip(heads, widths)])]
    lines.append("-+-".join(["-" * width0] + ["-" * w for w in widths]))
    for name, rep in zip(names, reports):
        cells = []
        for (ds, c), w in zip(columns, widths):
            v = rep.results.get(ds, {}).get(c)
            cells.append(("n/a" if v is None else f"{v:.3f}").rjust(w))
        lines.append(" | ".join([name.ljust(width0)] + cells))
    return "\n".join(lines) + "\n"
