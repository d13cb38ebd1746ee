import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptseg.calibration import calibrate, calibrate_loop, generate_pseudo_labels, perturb_feature

from conftest import TINY

P0 = "Segment the bright-ellipse in the ultrasound image."


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def test_identical_members():
    m = torch.rand(5, 5, dtype=torch.float64)
    r = calibrate([m, m.clone()])
    assert torch.equal(r.mu, m)
    assert torch.equal(r.gamma, torch.zeros_like(m))
    assert torch.equal(r.y_hat, m)


@pytest.mark.parametrize(
    "a,b,mu,gamma,y_hat",
    [
        (1.0, 0.0, 0.5, 0.25, 0.38940039153570244),  # 0.5 * exp(-0.25)
        (0.8, 0.6, 0.7, 0.01, 0.6930348836244177),  # 0.7 * exp(-0.01)
    ],
)
def test_hand_values(a, b, mu, gamma, y_hat):
    r = calibrate([t64([a]), t64([b])])
    assert abs(r.mu.item() - mu) < 1e-12
    assert abs(r.gamma.item() - gamma) < 1e-12
    assert abs(r.y_hat.item() - y_hat) < 1e-12


def test_population_variance():
    r = calibrate([t64([0.0]), t64([1.0]), t64([1.0])])
    assert abs(r.gamma.item() - 2.0 / 9.0) < 1e-15


def test_errors():
    with pytest.raises(ValueError, match="two"):
        calibrate([t64([0.5])])
    with pytest.raises(ValueError, match="shape"):
        calibrate([t64([0.5, 0.1]), t64([0.5])])


@pytest.mark.parametrize("n", [2, 3, 4])
def test_matches_scalar_loop(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        masks = rng.random((n, 8, 8))
        r = calibrate(torch.from_numpy(masks))
        mu, gamma, y_hat = calibrate_loop(masks)
        assert np.max(np.abs(r.mu.numpy() - mu)) < 1e-12
        assert np.max(np.abs(r.gamma.numpy() - gamma)) < 1e-12
        assert np.max(np.abs(r.y_hat.numpy() - y_hat)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(1, 4), st.integers(1, 4)), elements=st.floats(0, 1)))
def test_bounds_and_permutation(masks):
    r = calibrate(torch.from_numpy(masks))
    assert (r.gamma >= 0).all() and (r.gamma <= 0.25).all()
    assert (r.y_hat >= 0).all() and (r.y_hat <= r.mu).all() and (r.mu <= 1).all()
    rev = calibrate(torch.from_numpy(masks[::-1].copy()))
    assert torch.equal(rev.y_hat, r.y_hat) and torch.equal(rev.gamma, r.gamma)


def test_damping_monotone_in_gamma():
    mu = np.linspace(0.05, 1.0, 20)[:, None]
    gamma = np.linspace(0.0, 0.25, 30)[None, :]
    y = np.exp(-gamma) * mu
    assert np.all(np.diff(y, axis=1) < 0)


def test_dropout_rate_zero_is_identity():
    v = torch.randn(4, 8)
    assert torch.equal(perturb_feature(v, "dropout", 0.0), v)


def test_dropout_statistics():
    v = torch.ones(400, 400, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    out = perturb_feature(v, "dropout", 0.3, g)
    zero_frac = (out == 0).double().mean().item()
    assert abs(zero_frac - 0.3) < 0.02
    survivors = out[out != 0]
    assert torch.allclose(survivors, torch.full_like(survivors, 1 / 0.7))


def test_dropout_preserves_expectation():
    # Monte-Carlo oracle: each element's mean over K draws has std sqrt(p/(1-p)/K)*|v|
    g = torch.Generator().manual_seed(1)
    v = torch.randn(64, dtype=torch.float64)
    draws = torch.stack([perturb_feature(v, "dropout", 0.3, g) for _ in range(1000)])
    se = math.sqrt(0.3 / 0.7 / 1000) * v.abs()
    assert ((draws.mean(0) - v).abs() <= 5 * se + 1e-12).all()


def test_gaussian_noise_scale():
    g = torch.Generator().manual_seed(2)
    v = torch.randn(200, 200, dtype=torch.float64) * 3
    out = perturb_feature(v, "gaussian", 0.1, g)
    assert abs((out - v).std().item() - 0.1 * v.std().item()) < 0.01 * v.std().item()


def test_perturb_errors():
    v = torch.zeros(3)
    with pytest.raises(ValueError):
        perturb_feature(v, "dropout", 1.0)
    with pytest.raises(ValueError):
        perturb_feature(v, "gaussian", 0.0)
    with pytest.raises(ValueError):
        perturb_feature(v, "salt", 0.1)


def test_perturb_deterministic_with_generator():
    v = torch.randn(10, 10)
    a = perturb_feature(v, "dropout", 0.3, torch.Generator().manual_seed(5))
    b = perturb_feature(v, "dropout", 0.3, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def _model():
    from promptseg.model import build_model

    return build_model(TINY, seed=3)


def test_generate_rate_zero_degenerates_to_sd():
    m = _model()
    x = torch.rand(2, 3, 32, 32)
    r = generate_pseudo_labels(m, x, P0, n=3, kind="dropout", rate=0.0)
    with torch.no_grad():
        sd = m(x, [P0, P0], "sd")
    assert torch.equal(r.gamma, torch.zeros_like(r.gamma))
    assert torch.equal(r.y_hat, r.mu)
    assert torch.equal(r.mu, sd)


def test_generate_deterministic_and_detached():
    m = _model()
    x = torch.rand(1, 3, 32, 32)
    a = generate_pseudo_labels(m, x, P0, 2, generator=torch.Generator().manual_seed(9))
    b = generate_pseudo_labels(m, x, P0, 2, generator=torch.Generator().manual_seed(9))
    assert torch.equal(a.y_hat, b.y_hat) and torch.equal(a.gamma, b.gamma)
    assert not a.y_hat.requires_grad


def test_generate_only_perturbs_deepest_feature(monkeypatch):
    import promptseg.calibration as cal

    m = _model()
    x = torch.rand(1, 3, 32, 32)
    seen = []
    orig = cal.perturb_feature

    def spy(v, *a, **k):
        seen.append(tuple(v.shape))
        return orig(v, *a, **k)

    monkeypatch.setattr(cal, "perturb_feature", spy)
    generate_pseudo_labels(m, x, P0, 3)
    assert seen == [(1, TINY.widths[3], 1, 1)] * 3


def test_generate_n2_vs_n4_both_valid():
    m = _model()
    with torch.no_grad():
        for d in m.decoders.values():
            for blk in d.pud:
                blk.alpha.fill_(1.0)
    x = torch.rand(2, 3, 32, 32)
    r2 = generate_pseudo_labels(m, x, P0, 2, generator=torch.Generator().manual_seed(0))
    r4 = generate_pseudo_labels(m, x, P0, 4, generator=torch.Generator().manual_seed(0))
    for r in (r2, r4):
        assert (r.gamma >= 0).all() and (r.gamma <= 0.25).all() and (r.y_hat <= r.mu).all()
    assert r2.n_passes == 2 and r4.n_passes == 4
    assert not torch.equal(r2.gamma, r4.gamma)
