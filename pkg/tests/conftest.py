import numpy as np
import pytest
import torch

from ctxvlf.encoders import DualEncoder, EncoderConfig
from ctxvlf.synthetic import SyntheticSpec, generate_synthetic

TINY = EncoderConfig(embed_dim=8, vision_channels=(4, 4, 4, 4), text_vocab=64, text_width=8)


def brute_force_auc(pos, neg):
    """Pairwise-count oracle for AUC."""
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


@torch.no_grad()
def central_diff(f, x, eps=1e-6):
    """Finite-difference gradient of scalar f at x (float64 tensor), one coordinate at a time."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f())
        flat[i] = old - eps
        lo = float(f())
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return DualEncoder(TINY).double()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticSpec(seed=3, n_patients=40, image_size=(16, 16)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_split():
    """Patient-disjoint (train, validation) records at 16 px."""
    from ctxvlf.partitioning import split_patients

    recs = generate_synthetic(SyntheticSpec(seed=0, n_patients=40, image_size=(16, 16)))
    plan = split_patients(recs, 0.75, seed=0)
    return plan.select(recs, "train"), plan.select(recs, "validation")


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        print(line)
        request.config.stash.setdefault(ACCEPTANCE_KEY, []).append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
