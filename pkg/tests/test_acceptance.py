"""Exit criteria for the package, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines as
they happen; they are also collected in the terminal summary.
"""

import hashlib
import math
import time

import numpy as np
import pytest
import torch

from ctxvlf.cli import main
from ctxvlf.data import DRGrade, EyeDiagnosis
from ctxvlf.encoders import DualEncoder, EncoderConfig, normalize
from ctxvlf.evaluation import DR_CLASSES, evaluate_records, macro_auc
from ctxvlf.fusion import rms_fuse
from ctxvlf.metrics import auc
from ctxvlf.objective import category_targets, contrastive_loss, similarity
from ctxvlf.partitioning import split_patients
from ctxvlf.prompting import Prompter, clinical_temporal_text, prior_result_text
from ctxvlf.samples import VariantConfig, build_samples, prior_lookup
from ctxvlf.schedule import warmup_cosine_lr
from ctxvlf.synthetic import SyntheticSpec, generate_synthetic
from ctxvlf.training import TrainConfig, step_loss, train

from conftest import brute_force_auc, central_diff

UD = VariantConfig(variant="unilateral-d-labels")
CT = VariantConfig(variant="clinical-temporal")


def held_out_split(seed: int, **spec_kw):
    """500-patient synthetic set: 20% test patients, the rest split 80/20 train/validation."""
    recs = generate_synthetic(SyntheticSpec(seed=seed, n_patients=500, **spec_kw))
    plan = split_patients(recs, 0.8, seed=seed, test_ratio=0.2)
    return [plan.select(recs, k) for k in ("train", "validation", "test")]


def test_criterion_01_auc_oracle(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n_pos, n_neg = rng.integers(1, 51, size=2)
        # coarse grid forces ties within and across the lists
        pos = (rng.integers(0, 8, size=n_pos) / 4).tolist()
        neg = (rng.integers(0, 8, size=n_neg) / 4).tolist()
        mismatches += auc(pos, neg) != brute_force_auc(pos, neg)
    elapsed = time.perf_counter() - start
    verdict(1, "AUC equals pairwise-count oracle", mismatches == 0 and elapsed < 10,
            f"{mismatches} mismatches in 1000 pairs, {elapsed:.2f}s")


def test_criterion_02_contrastive_loss(verdict):
    uniform = contrastive_loss(torch.zeros(4, 4, dtype=torch.float64)).total.item()
    diag = contrastive_loss(torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)).total.item()
    err_uniform = abs(uniform - math.log(4))
    err_diag = abs(diag - math.log(1 + math.exp(-2)))

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(2, 7)), int(rng.integers(3, 9))
        texts = torch.tensor(rng.normal(size=(n, d)))
        images = torch.tensor(rng.normal(size=(n, d)))
        targets = category_targets(rng.integers(0, 3, size=n).tolist(), dtype=torch.float64)
        tau = 0.1

        def f():
            return contrastive_loss(similarity(normalize(texts), normalize(images), tau), targets).total

        for x in (texts, images):
            x.requires_grad_(True)
            (g,) = torch.autograd.grad(f(), x)
            x.requires_grad_(False)
            fd = central_diff(f, x)
            worst = max(worst, ((g - fd).norm() / fd.norm()).item())
    ok = err_uniform <= 1e-9 and err_diag <= 1e-9 and worst <= 1e-4
    verdict(2, "contrastive loss values and gradients", ok,
            f"|ln4 err| {err_uniform:.1e}, |ln(1+e^-2) err| {err_diag:.1e}, worst FD rel err {worst:.1e}")


def test_criterion_03_rms_fusion(verdict):
    rng = np.random.default_rng(3)
    worst = perm_fail = sign_fail = 0
    for _ in range(1000):
        n, d = int(rng.integers(2, 5)), int(rng.integers(1, 17))
        vs = rng.normal(size=(n, d)) * 10 ** rng.uniform(-3, 3)
        oracle = [math.sqrt(sum(vs[i, k] ** 2 for i in range(n)) / n) for k in range(d)]
        out = rms_fuse(torch.tensor(vs))
        worst = max(worst, float(np.max(np.abs(out.numpy() - oracle) / np.maximum(np.abs(oracle), 1e-300))))
        perm_fail += not torch.equal(out, rms_fuse(torch.tensor(vs[rng.permutation(n)])))
        flips = rng.choice([-1.0, 1.0], size=vs.shape)
        sign_fail += not torch.equal(out, rms_fuse(torch.tensor(vs * flips)))
    ok = worst <= 1e-12 and perm_fail == 0 and sign_fail == 0
    verdict(3, "RMS fusion oracle, permutation and sign invariance", ok,
            f"max rel err {worst:.1e}, perm failures {perm_fail}, sign failures {sign_fail}")


def test_criterion_04_combined_update(verdict):
    prompter = Prompter()
    recs = generate_synthetic(SyntheticSpec(seed=4, n_patients=12, image_size=(16, 16)))
    priors = prior_lookup(recs, prompter)
    streams = {name: build_samples(recs, name, prompter, priors)[0]
               for name in ("unilateral-d-labels", "bilateral-concl", "clinical-temporal")}
    tiny = EncoderConfig(embed_dim=8, vision_channels=(4, 4, 4, 4), text_vocab=64, text_width=8)
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(10):
        torch.manual_seed(trial)
        model = DualEncoder(tiny).double()
        batches = {}
        for name, samples in streams.items():
            batch = [samples[i] for i in rng.choice(len(samples), size=2, replace=False)]
            mask = torch.tensor([True, False]) if name == "clinical-temporal" else None
            batches[name] = (batch, [s.prompt.primary_text for s in batch], mask)
        params = list(model.parameters())

        per_loss = [torch.autograd.grad(step_loss(model, {k: v}).total, params, allow_unused=True)
                    for k, v in batches.items()]
        manual = [sum(torch.zeros_like(p) if g[i] is None else g[i] for g in per_loss)
                  for i, p in enumerate(params)]
        before = [p.detach().clone() for p in params]

        opt = torch.optim.SGD(params, lr=0.5)
        opt.zero_grad()
        step_loss(model, batches).total.backward()
        opt.step()
        for p, p0, g in zip(params, before, manual):
            expected = p0 - 0.5 * g
            worst = max(worst, (p.detach() - expected).abs().max().item())
    verdict(4, "summed-loss update equals sum of per-loss gradients", worst <= 1e-10,
            f"10 trials, 3 streams, max abs diff {worst:.1e}")


def test_criterion_05_clinical_temporal(verdict):
    clinical = {"diabetes_type": 2, "years_diabetic": 12, "treatment": "insulin", "hypertension": False}
    prior = prior_result_text(EyeDiagnosis(DRGrade.modDR), EyeDiagnosis(DRGrade.modDR))
    with_prior = clinical_temporal_text(clinical, prior)
    first = clinical_temporal_text(clinical, None)
    strings_ok = (
        with_prior == "type 2 diabetes for 12 years, treated with insulin. "
                      "The previous exam showed moderate diabetic retinopathy in both eyes"
        and first == "type 2 diabetes for 12 years, treated with insulin. It is the first exam."
    )

    recs = generate_synthetic(SyntheticSpec(seed=5, n_patients=350, image_size=(16, 16)))
    plan = split_patients(recs, 0.8, seed=5)
    small = EncoderConfig(embed_dim=16, vision_channels=(8, 8, 16, 16), text_width=16)
    res = train(CT, TrainConfig(epochs=2), plan.select(recs, "train"), plan.select(recs, "validation"),
                encoder=small)
    fractions = [n_ctx / n_seen for n_ctx, n_seen in res.context_draws]
    seen = [n_seen for _, n_seen in res.context_draws]
    frac_ok = all(n >= 1000 for n in seen) and all(0.45 <= f <= 0.55 for f in fractions)
    verdict(5, "clinical-temporal strings verbatim and context fraction", strings_ok and frac_ok,
            f"strings {'match' if strings_ok else 'differ'}; per-epoch fractions "
            + ", ".join(f"{f:.3f} of {n}" for f, n in zip(fractions, seen)))


def test_criterion_06_patient_disjointness(verdict):
    from test_partitioning import dataset

    rng = np.random.default_rng(6)
    overlaps = nondeterministic = 0
    for _ in range(200):
        n, exams = int(rng.integers(2, 80)), int(rng.integers(1, 4))
        recs = dataset(n, exams)
        ratio, seed = float(rng.uniform(0.1, 0.9)), int(rng.integers(2**31))
        test_ratio = float(rng.choice([0.0, 0.2]))
        if n - round(test_ratio * n) < 2:
            test_ratio = 0.0
        plan = split_patients(recs, ratio, seed=seed, test_ratio=test_ratio)
        parts = [plan.train, plan.validation, plan.test]
        overlaps += any(a & b for i, a in enumerate(parts) for b in parts[i + 1:])
        overlaps += (plan.train | plan.validation | plan.test) != {r.patient_id for r in recs}
        shuffled = [recs[i] for i in rng.permutation(len(recs))]
        nondeterministic += split_patients(shuffled, ratio, seed=seed, test_ratio=test_ratio) != plan
    verdict(6, "patient-disjoint, deterministic splits", overlaps == 0 and nondeterministic == 0,
            f"200 datasets, {overlaps} overlap/coverage failures, {nondeterministic} determinism failures")


@pytest.mark.slow
def test_criterion_07_learnability(verdict):
    start = time.perf_counter()
    tr, va, te = held_out_split(0, grade_signal_strength=1.0)
    prompter = Prompter()
    with torch.random.fork_rng():
        torch.manual_seed(0)
        untrained = DualEncoder(EncoderConfig()).eval()
    null = macro_auc(evaluate_records(untrained, UD, te, DR_CLASSES, prompter))
    res = train(UD, TrainConfig(), tr, va)
    trained = evaluate_records(res.model, UD, te, DR_CLASSES, prompter)
    score = macro_auc(trained)
    elapsed = time.perf_counter() - start
    ok = score >= 0.90 and abs(null - 0.5) <= 0.1 and len(res.history) == 15
    verdict(7, "Unilateral-D learns the synthetic grade signal", ok,
            f"test macro AUC {score:.3f} (>= 0.90), untrained {null:.3f} (0.5 +/- 0.1), "
            f"best epoch {res.best_epoch}/15, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_08_context_benefit(verdict):
    prompter = Prompter()
    deltas, rows = [], []
    for seed in (0, 1, 2):
        tr, va, te = held_out_split(seed, grade_signal_strength=0.5, prior_correlation=0.9)
        cfg = TrainConfig(seed=seed)
        ud = macro_auc(evaluate_records(train(UD, cfg, tr, va).model, UD, te, DR_CLASSES, prompter))
        ct = macro_auc(evaluate_records(train(CT, cfg, tr, va).model, CT, te, DR_CLASSES, prompter))
        deltas.append(ct - ud)
        rows.append(f"seed {seed}: CT {ct:.3f} UD {ud:.3f}")
    median = float(np.median(deltas))
    verdict(8, "clinical-temporal >= unilateral-D - 0.01 (3-seed median)", median >= -0.01,
            f"median CT-UD {median:+.3f}; " + "; ".join(rows))


def test_criterion_09_scheduler(verdict, monkeypatch):
    def closed_form(t, base, w, total):
        # written independently of the implementation: warm-up ramp, then half-cosine
        if t < w:
            return base * t / w
        phase = (t - w) / (total - w)
        return base * 0.5 * (1.0 + math.cos(math.pi * phase))

    worst = 0.0
    for w, epochs in [(1, 1), (1, 15), (7, 15), (25, 3), (13, 2)]:
        total = w * epochs
        for t in range(total):
            worst = max(worst, abs(warmup_cosine_lr(t, 1e-4, w, total) - closed_form(t, 1e-4, w, total)))

    # the lr the optimiser actually used in a real run
    trace = []
    real_step = torch.optim.AdamW.step

    def spy(self, *a, **k):
        trace.append(self.param_groups[0]["lr"])
        return real_step(self, *a, **k)

    monkeypatch.setattr(torch.optim.AdamW, "step", spy)
    recs = generate_synthetic(SyntheticSpec(seed=9, n_patients=40, image_size=(16, 16)))
    plan = split_patients(recs, 0.8, seed=9)
    train_recs = plan.select(recs, "train")
    small = EncoderConfig(embed_dim=8, vision_channels=(4, 4, 4, 4), text_width=8)
    train(UD, TrainConfig(epochs=3, batch_size=8), train_recs, plan.select(recs, "validation"), encoder=small)
    n_samples = len(build_samples(train_recs, UD.variant, Prompter())[0])
    w = math.ceil(n_samples / 8)
    expected = [closed_form(t, 1e-4, w, 3 * w) for t in range(3 * w)]
    trace_err = max(abs(a - b) for a, b in zip(trace, expected)) if len(trace) == len(expected) else math.inf
    ok = worst <= 1e-12 and trace_err <= 1e-12 and trace[w] == 1e-4 and trace[0] <= 1e-5
    verdict(9, "warm-up over one epoch then cosine decay", ok,
            f"max abs err {worst:.1e} on grids, {trace_err:.1e} on a {len(trace)}-step training trace, warm-up {w} steps")


def test_criterion_10_determinism(verdict, tmp_path, capsys):
    assert main(["generate", "--seed", "10", "--patients", "30", "--out", str(tmp_path / "data")]) == 0
    assert main(["split", "--manifest", str(tmp_path / "data" / "manifest.jsonl"), "--out", str(tmp_path / "split")]) == 0
    digests = []
    for run in ("a", "b"):
        code = main(["train", "--seed", "3", "--epochs", "3", "--train-manifest", str(tmp_path / "split" / "train.jsonl"),
                     "--val-manifest", str(tmp_path / "split" / "validation.jsonl"), "--out", str(tmp_path / run)])
        assert code == 0
        digests.append(hashlib.sha256((tmp_path / run / "checkpoint.pt").read_bytes()).hexdigest())
    capsys.readouterr()
    verdict(10, "cmd_train checkpoints are hash-identical across runs", digests[0] == digests[1],
            f"sha256 {digests[0][:16]} vs {digests[1][:16]}")
