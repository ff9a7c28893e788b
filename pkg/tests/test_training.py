import dataclasses
import math

import numpy as np
import pytest
import torch

import ctxvlf.training as training
from ctxvlf.encoders import EncoderConfig
from ctxvlf.samples import VariantConfig
from ctxvlf.training import (
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
)

SMALL = EncoderConfig(embed_dim=16, vision_channels=(8, 8, 16, 16), text_width=16)
UD = VariantConfig(variant="unilateral-d-labels")
CT = VariantConfig(variant="clinical-temporal")


def run(split, variant=UD, **kw):
    cfg = TrainConfig(**{"epochs": 2, **kw})
    return train(variant, cfg, *split, encoder=SMALL)


def states_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_deterministic(tiny_split):
    a, b = run(tiny_split, seed=3), run(tiny_split, seed=3)
    assert states_equal(a.model, b.model)
    assert [h.loss for h in a.history] == [h.loss for h in b.history]
    c = run(tiny_split, seed=4)
    assert not states_equal(a.model, c.model)


def test_selection_is_first_argmax(tiny_split):
    res = run(tiny_split, epochs=4)
    vals = [h.val_macro_auc for h in res.history]
    assert res.best_epoch == int(np.argmax(vals)) + 1
    assert res.best_val_auc == max(vals)
    assert [h.epoch for h in res.history] == [1, 2, 3, 4]


def test_loss_decreases(tiny_split):
    res = run(tiny_split, epochs=5)
    assert res.history[-1].loss < res.history[0].loss


def test_lr_trace(tiny_split, monkeypatch):
    calls = []
    real = training.warmup_cosine_lr

    def spy(step, base, warmup, total):
        calls.append((step, warmup, total))
        return real(step, base, warmup, total)

    monkeypatch.setattr(training, "warmup_cosine_lr", spy)
    run(tiny_split, epochs=3, lr=1e-3)
    steps = [c[0] for c in calls]
    warmup, total = calls[0][1], calls[0][2]
    assert steps == list(range(total))
    assert total == 3 * warmup
    # the warm-up spans exactly one pass over the largest stream
    train_recs = tiny_split[0]
    n_samples = sum(1 for r in train_recs for side in ("left", "right") if r.diagnosis(side))
    assert warmup == math.ceil(n_samples / 16)


def test_context_draws(tiny_split):
    res = run(tiny_split, CT, epochs=3)
    for n_ctx, n_seen in res.context_draws:
        assert n_seen > 0 and 0 < n_ctx < n_seen
    assert res.context_draws[0] != res.context_draws[1] or res.context_draws[1] != res.context_draws[2]


def test_context_fraction_zero_and_one(tiny_split):
    none = run(tiny_split, CT.model_copy(update={"context_fraction": 0.0}), epochs=1)
    assert none.context_draws[0][0] == 0
    full = run(tiny_split, CT.model_copy(update={"context_fraction": 1.0}), epochs=1)
    assert full.context_draws[0][0] == full.context_draws[0][1]


def test_combined_variant_trains(tiny_split):
    combo = VariantConfig(variant="combined", components=("unilateral-d-labels", "bilateral-concl"))
    res = run(tiny_split, combo, epochs=1)
    assert math.isfinite(res.history[0].loss)


def test_overlap_and_empty_rejected(tiny_split):
    train_recs, val_recs = tiny_split
    with pytest.raises(ValueError, match="share"):
        train(UD, TrainConfig(epochs=1), train_recs, train_recs[:3], encoder=SMALL)
    with pytest.raises(ValueError):
        train(UD, TrainConfig(epochs=1), [], val_recs, encoder=SMALL)


def test_nan_aborts(tiny_split, monkeypatch):
    real = training.step_loss

    def poisoned(model, batches):
        loss = real(model, batches)
        return dataclasses.replace(loss, total=loss.total * float("nan"))

    monkeypatch.setattr(training, "step_loss", poisoned)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        run(tiny_split, epochs=1)


def test_checkpoint_round_trip(tiny_split, tmp_path):
    res = run(tiny_split, epochs=1)
    cfg = TrainConfig(epochs=1)
    header = save_checkpoint(tmp_path / "c.pt", res.model, UD, cfg, best_epoch=res.best_epoch)
    ck = load_checkpoint(tmp_path / "c.pt")
    assert states_equal(ck.model, res.model)
    assert ck.variant == UD and ck.header == header
    assert header["temperature"] == pytest.approx(res.model.tau.item())
    assert header["format"] == "ctxvlf-checkpoint/1"
    assert len(ck.config_hash) == 16
    save_checkpoint(tmp_path / "d.pt", res.model, UD, cfg, best_epoch=res.best_epoch)
    assert (tmp_path / "c.pt").read_bytes() == (tmp_path / "d.pt").read_bytes()


def test_bad_checkpoint_format(tmp_path):
    torch.save({"header": {"format": "other"}, "state": {}}, tmp_path / "x.pt")
    with pytest.raises(ValueError, match="unsupported"):
        load_checkpoint(tmp_path / "x.pt")
