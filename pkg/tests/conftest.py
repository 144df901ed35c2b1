import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diffgate import tensor as T

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FD_EPS = 1e-5


def numeric_grad(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Norm-relative error. Gradients that vanish identically (e.g. attention key
    biases, which softmax ignores) are compared absolutely below ``floor``."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_grads(build, inputs: list[T.Tensor], tol: float = 1e-4) -> None:
    """Analytic gradients of the scalar ``build()`` against central differences for every input."""
    for x in inputs:
        x.grad = None
    out = build()
    out.backward()
    for k, x in enumerate(inputs):
        fd = numeric_grad(lambda: float(build().data), x.data)
        err = rel_err(x.grad, fd)
        assert err < tol, f"input {k}: relative error {err:.2e}"


@pytest.fixture(scope="session")
def desk_pretrained():
    from diffgate.config import TrainPlan
    from diffgate.pipeline import obtain_pretrained

    return obtain_pretrained(TrainPlan())


@pytest.fixture(scope="session")
def correlated_plan():
    from diffgate.config import TrainPlan, debias_phases
    from diffgate.data import SynthSpec

    return TrainPlan(synth=SynthSpec(task_attr_correlation=0.6, attr_signal_strength=0.9), phases=debias_phases())


@pytest.fixture(scope="session")
def correlated_pretrained(correlated_plan):
    from diffgate.pipeline import obtain_pretrained

    return obtain_pretrained(correlated_plan)


@pytest.fixture(scope="session")
def tiny_plan():
    """A seconds-scale plan for plumbing tests."""
    from diffgate.config import TrainPlan, debias_phases
    from diffgate.data import SynthSpec
    from diffgate.encoder import EncoderConfig

    enc = EncoderConfig(vocab_size=32, max_seq_len=8, num_layers=1, hidden_dim=16, num_heads=2, ffn_dim=32)
    synth = SynthSpec(vocab_size=32, seq_len=8, n_train=96, n_dev=32, n_test=64, task_attr_correlation=0.6)
    return TrainPlan(encoder=enc, synth=synth, phases=debias_phases((1, 1), (1, 1), pretrain_epochs=1),
                     probe_epochs=20)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
