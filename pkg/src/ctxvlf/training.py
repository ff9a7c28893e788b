"""Training loop, checkpoint selection and checkpoint files."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field

from .data import ExamRecord, patients_of
from .encoders import DualEncoder, EncoderConfig, normalize
from .evaluation import DR_CLASSES, class_prompts, macro_auc, per_class_auc, zero_shot_scores
from .fusion import fuse_exam
from .objective import LossValue, category_targets, combined_loss, contrastive_loss, similarity
from .partitioning import filter_gradable
from .prompting import Prompter
from .samples import Sample, VariantConfig, build_samples, prior_lookup
from .schedule import warmup_cosine_lr

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ctxvlf-checkpoint/1"


class TrainConfig(BaseModel):
    epochs: int = Field(15, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    batch_size: int = Field(16, ge=2)
    seed: int = 0

    model_config = {"frozen": True, "extra": "forbid"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    val_macro_auc: float
    val_auc: dict


@dataclass
class TrainResult:
    model: DualEncoder
    best_epoch: int
    best_val_auc: float
    history: list = field(default_factory=list)
    skips: Counter = field(default_factory=Counter)
    context_draws: list = field(default_factory=list)  # per-epoch (n_with_context, n_total)


def config_hash(header: dict) -> str:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def variant_loss(model: DualEncoder, batch: Sequence[Sample], texts: Sequence[str],
                 context_mask: Optional[torch.Tensor] = None) -> LossValue:
    """Contrastive loss for one batch of a single variant stream.

    ``texts`` are the (possibly augmented) label texts, one per sample;
    ``context_mask`` gates which samples get their context embedding added.
    """
    images = torch.stack([s.images for s in batch]).to(model.log_tau.dtype)
    img_emb = model.encode_image(images)
    ctx = None
    if context_mask is not None and bool(context_mask.any()):
        ctx = model.encode_text([s.context_text for s in batch])
    fused = fuse_exam(img_emb, ctx, context_mask if ctx is not None else False)
    txt = normalize(model.encode_text(list(texts)))
    scores = similarity(txt, fused, model.tau)
    targets = category_targets([s.category for s in batch], dtype=scores.dtype)
    return contrastive_loss(scores, targets)


def step_loss(model: DualEncoder, batches: dict) -> LossValue:
    """Sum of per-stream losses for one optimiser step.

    ``batches`` maps stream name -> (samples, texts, context_mask or None).
    """
    return combined_loss([variant_loss(model, b, t, m) for b, t, m in batches.values()])


def _variant_texts(batch: Sequence[Sample], rng: np.random.Generator) -> list[str]:
    return [s.prompt.variants[int(rng.integers(len(s.prompt.variants)))] for s in batch]


def _evaluate_samples(model: DualEncoder, samples: Sequence[Sample], prompter: Prompter,
                      use_context: bool, classes: Sequence[str] = DR_CLASSES) -> dict:
    scores = zero_shot_scores(model, samples, class_prompts(classes, prompter), use_context=use_context)
    return per_class_auc(scores, samples, classes)


def train(variant: VariantConfig, cfg: TrainConfig, train_records: Sequence[ExamRecord],
          val_records: Sequence[ExamRecord], encoder: EncoderConfig | None = None,
          prompter: Prompter | None = None, dtype: torch.dtype = torch.float32,
          on_event: Callable[[dict], None] | None = None) -> TrainResult:
    """Train one model variant and return the weights of the best validation epoch.

    Validation uses only gradable images and scores zero-shot DR grading by
    the unweighted mean of the six one-vs-rest AUCs; ties keep the earlier epoch.
    ``on_event`` receives plain dicts ("skips", then one "epoch" per epoch)
    suitable for a line-delimited run log.
    """
    emit = on_event or (lambda event: None)
    if not train_records or not val_records:
        raise ValueError("training and validation manifests must be non-empty")
    shared = patients_of(train_records) & patients_of(val_records)
    if shared:
        raise ValueError(f"train and validation share {len(shared)} patients, e.g. {sorted(shared)[0]}")
    prompter = prompter or Prompter()
    encoder = encoder or EncoderConfig()
    val_records = filter_gradable(val_records)

    skips: Counter = Counter()
    streams = {}
    priors = prior_lookup(train_records, prompter)
    for name in variant.streams:
        samples, sk = build_samples(train_records, name, prompter, priors)
        skips.update(sk)
        if len(samples) < 2:
            raise ValueError(f"variant stream {name!r} produced fewer than 2 training samples")
        streams[name] = samples
    val_samples, sk = build_samples(val_records, variant.evaluation_stream, prompter,
                                    prior_lookup(val_records, prompter))
    skips.update({f"validation {k}": v for k, v in sk.items()})
    emit({"event": "skips", "total": sum(skips.values()), "reasons": dict(sorted(skips.items()))})
    if not val_samples:
        raise ValueError("validation manifest produced no samples")

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = DualEncoder(encoder).to(dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    bs = cfg.batch_size
    n_batches = {k: math.ceil(len(v) / bs) for k, v in streams.items()}
    steps_per_epoch = max(n_batches.values())
    total_steps = steps_per_epoch * cfg.epochs
    use_ctx = variant.context_enabled

    best_state, best_auc, best_epoch = None, -math.inf, -1
    history, context_draws = [], []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        orders = {k: rng.permutation(len(v)) for k, v in streams.items()}
        n_ctx = n_seen = 0
        losses = []
        for b in range(steps_per_epoch):
            lr = warmup_cosine_lr(step, cfg.lr, steps_per_epoch, total_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            batches = {}
            for name, samples in streams.items():
                k = b % n_batches[name]
                batch = [samples[i] for i in orders[name][k * bs:(k + 1) * bs]]
                if len(batch) < 2:
                    continue
                texts = _variant_texts(batch, rng)
                mask = None
                if name == "clinical-temporal":
                    mask = torch.from_numpy(rng.uniform(size=len(batch)) < variant.context_fraction)
                    n_ctx += int(mask.sum())
                    n_seen += len(batch)
                batches[name] = (batch, texts, mask)
            if not batches:
                continue
            loss = step_loss(model, batches)
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            losses.append(loss.total.item())
            step += 1

        val = _evaluate_samples(model, val_samples, prompter, use_ctx)
        val_macro = macro_auc(val)
        entry = EpochLog(epoch=epoch + 1, loss=float(np.mean(losses)), lr=lr, val_macro_auc=val_macro, val_auc=val)
        history.append(entry)
        context_draws.append((n_ctx, n_seen))
        log.info("epoch %d loss %.4f lr %.2e val macro AUC %.4f", entry.epoch, entry.loss, lr, val_macro)
        emit({"event": "epoch", **dataclasses.asdict(entry)})
        if val_macro > best_auc:
            best_auc, best_epoch = val_macro, epoch + 1
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, best_epoch=best_epoch, best_val_auc=best_auc, history=history,
                       skips=skips, context_draws=context_draws)


def checkpoint_header(model: DualEncoder, variant: VariantConfig, cfg: TrainConfig | None = None,
                      **extra) -> dict:
    header = {
        "format": CHECKPOINT_FORMAT,
        "encoder": model.config.model_dump(mode="json"),
        "variant": variant.model_dump(mode="json"),
        "temperature": model.tau.item(),
    }
    if cfg is not None:
        header["train"] = cfg.model_dump(mode="json")
    header.update(extra)
    return header


def save_checkpoint(path: os.PathLike | str, model: DualEncoder, variant: VariantConfig,
                    cfg: TrainConfig | None = None, **extra) -> dict:
    """Write {header, flat named parameters} with torch.save; returns the header."""
    header = checkpoint_header(model, variant, cfg, **extra)
    state = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    # an in-memory archive keeps the file name out of the bytes
    buf = io.BytesIO()
    torch.save({"header": header, "state": state}, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return header


@dataclass
class Checkpoint:
    model: DualEncoder
    variant: VariantConfig
    header: dict

    @property
    def config_hash(self) -> str:
        return config_hash({k: self.header[k] for k in ("encoder", "variant", "train") if k in self.header})


def load_checkpoint(path: os.PathLike | str) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    header = blob["header"]
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    model = DualEncoder(EncoderConfig(**header["encoder"]))
    state = blob["state"]
    model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model=model, variant=VariantConfig(**header["variant"]), header=header)
