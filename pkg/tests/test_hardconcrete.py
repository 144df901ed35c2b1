import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate
from scipy.special import expit, logit

from diffgate import tensor as T
from diffgate.errors import ContractError
from diffgate.hardconcrete import (DETERMINISTIC, HardConcreteGate, cdf_sbar, deterministic_gate, gate_values,
                                   l0_penalty, open_probability, sample_gate, sample_gate_from_uniform)
from diffgate.rng import RngState

GAMMA, ZETA = -0.1, 1.1


def gate(log_alpha, **kw):
    return HardConcreteGate(T.Tensor(np.asarray(log_alpha, dtype=float), requires_grad=True), **kw)


def draws(log_alpha, n, seed=0, **kw):
    g = gate(np.full(n, float(log_alpha)), **kw)
    return sample_gate(g, RngState(seed, "mc")).data


def sbar_samples(log_alpha, n, beta=1.0, seed=0):
    """Pre-rectification samples straight from the generative definition."""
    u = np.random.default_rng(seed).uniform(size=n)
    s = expit((np.log(u) - np.log1p(-u) + log_alpha) / beta)
    return s * (ZETA - GAMMA) + GAMMA


def quadrature_mean_z(log_alpha, beta=1.0):
    """E[z] = integral over u of the rectified, stretched sigmoid."""
    def z(u):
        s = expit((logit(u) + log_alpha) / beta)
        return min(1.0, max(0.0, s * (ZETA - GAMMA) + GAMMA))
    # split at the rectification kinks so quad sees smooth pieces
    lo = expit(beta * logit(-GAMMA / (ZETA - GAMMA)) - log_alpha)
    hi = expit(beta * logit((1 - GAMMA) / (ZETA - GAMMA)) - log_alpha)
    mid, _ = integrate.quad(z, lo, hi, epsabs=1e-12)
    return mid + (1.0 - hi)


# -- sampling -------------------------------------------------------------------

def test_sample_at_half_uniform():
    g = gate(0.0)
    assert sample_gate_from_uniform(g, 0.5).item() == 0.5
    assert sample_gate_from_uniform(gate(20.0), 0.5).item() == 1.0


def test_mean_z_matches_quadrature():
    mc = draws(0.0, 100_000).mean()
    assert abs(mc - quadrature_mean_z(0.0)) < 5e-3


def test_rectification_mass_at_both_ends():
    z = draws(0.0, 100_000, seed=3)
    assert np.mean(z == 0.0) > 0 and np.mean(z == 1.0) > 0


@given(st.floats(-8, 8), st.floats(0.2, 3.0), st.floats(1e-15, 1 - 1e-15))
def test_samples_lie_in_unit_interval(la, beta, u):
    z = sample_gate_from_uniform(gate(la, beta=beta), u).item()
    assert 0.0 <= z <= 1.0


def test_extreme_uniforms_stay_finite():
    z = sample_gate_from_uniform(gate([0.0, 0.0]), np.array([0.0, 1.0]))
    assert np.array_equal(z.data, [0.0, 1.0])


def test_sample_gate_refuses_deterministic_mode():
    with pytest.raises(ContractError):
        sample_gate(gate(0.0, mode=DETERMINISTIC), RngState(0))
    assert gate_values(gate(0.0, mode=DETERMINISTIC), RngState(0)).item() == 0.5


def test_pathwise_gradient_matches_fd_with_common_random_numbers():
    n, la0, eps = 10_000, 0.3, 1e-3
    u = RngState(11, "crn").uniform_open((n,))
    g = gate(np.full(n, la0))
    T.mean(sample_gate_from_uniform(g, u)).backward()
    analytic = g.log_alpha.grad.sum()
    mean_z = lambda la: sample_gate_from_uniform(gate(np.full(n, la)), u).data.mean()
    fd = (mean_z(la0 + eps) - mean_z(la0 - eps)) / (2 * eps)
    assert abs(analytic - fd) / abs(fd) < 5e-2


# -- penalty --------------------------------------------------------------------

def test_penalty_closed_form():
    assert math.isclose(l0_penalty(gate(0.0)).item(), 11 / 12, rel_tol=1e-14)
    assert l0_penalty(gate(-60.0)).item() < 1e-25


@pytest.mark.parametrize("la", [-2.0, 0.0, 2.0])
def test_penalty_matches_monte_carlo(la):
    z = draws(la, 1_000_000, seed=int(la) + 5)
    assert abs(l0_penalty(gate(la)).item() - np.mean(z > 0)) < 2e-3


@given(st.floats(-10, 10), st.floats(1e-3, 2.0))
def test_penalty_strictly_increasing(la, step):
    assert open_probability(gate(la + step)).item() > open_probability(gate(la)).item()


# -- CDF ------------------------------------------------------------------------

def test_cdf_at_zero_is_complement_of_penalty():
    assert math.isclose(1 - cdf_sbar(gate(0.0), 0.0), 11 / 12, rel_tol=1e-14)


@given(st.floats(-4, 4), st.floats(0.2, 3.0))
def test_cdf_complement_equals_penalty_for_any_beta(la, beta):
    g = gate(la, beta=beta)
    assert math.isclose(1 - cdf_sbar(g, 0.0), open_probability(g).item(), rel_tol=1e-10, abs_tol=1e-14)


def test_cdf_monotone_on_grid():
    x = np.linspace(GAMMA, ZETA, 1002)[1:-1]
    c = np.array([cdf_sbar(gate(0.7), v) for v in x])
    assert np.all(np.diff(c) >= 0)


@pytest.mark.parametrize("la,beta", [(0.0, 1.0), (1.5, 1.0), (-1.0, 2 / 3), (0.5, 2.0)])
def test_cdf_matches_empirical(la, beta):
    s = np.sort(sbar_samples(la, 100_000, beta=beta, seed=9))
    grid = np.linspace(GAMMA, ZETA, 402)[1:-1]
    emp = np.searchsorted(s, grid, side="right") / s.size
    model = np.array([cdf_sbar(gate(la, beta=beta), v) for v in grid])
    assert np.max(np.abs(emp - model)) < 1e-2


def test_cdf_domain():
    with pytest.raises(ValueError):
        cdf_sbar(gate(0.0), GAMMA)
    with pytest.raises(ValueError):
        cdf_sbar(gate(0.0), 1.2)


# -- deterministic gate ---------------------------------------------------------

def test_deterministic_gate_values():
    assert deterministic_gate(gate(0.0)).item() == 0.5
    assert deterministic_gate(gate(-20.0)).item() == 0.0
    assert deterministic_gate(gate(20.0)).item() == 1.0


@given(st.floats(-50, 50))
def test_deterministic_gate_in_unit_interval(la):
    assert 0.0 <= deterministic_gate(gate(la)).item() <= 1.0


@pytest.mark.parametrize("kw", [dict(gamma=0.1), dict(zeta=0.9), dict(beta=0.0), dict(mode="soft")])
def test_invalid_gate_parameters(kw):
    with pytest.raises(ValueError):
        gate(0.0, **kw)
