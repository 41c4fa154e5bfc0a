"""Schedule and parameterization algebra against hand-derived oracles.

Frozen expected values below were derived independently (closed-form
trigonometry evaluated by hand / mpmath) before the implementation existed.
"""

import math

import pytest
import torch

from snaplab.schedule import (
    ENDPOINT_MARGIN,
    CosineSchedule,
    LatentState,
    Prediction,
    PredictionKind,
    SingularityError,
    convert,
    diffuse,
    make_schedule,
    v_from_x_eps,
    x_eps_from_prediction,
)

SCHED = CosineSchedule()

# cos(pi/4) = sin(pi/4) = sqrt(2)/2
SQRT_HALF = 0.7071067811865476


def test_alpha_sigma_frozen_values():
    a, s = SCHED.alpha_sigma(0.5)
    assert float(a) == pytest.approx(SQRT_HALF, abs=1e-12)
    assert float(s) == pytest.approx(SQRT_HALF, abs=1e-12)
    a0, s0 = SCHED.alpha_sigma(0.0)
    assert float(a0) == 1.0 and float(s0) == 0.0
    a1, s1 = SCHED.alpha_sigma(1.0)
    assert float(s1) == pytest.approx(1.0, abs=1e-15)
    assert abs(float(a1)) < 1e-15


def test_alpha_sigma_variance_preserving():
    t = torch.linspace(0, 1, 1001, dtype=torch.float64)
    a, s = SCHED.alpha_sigma(t)
    assert torch.allclose(a**2 + s**2, torch.ones_like(t), atol=1e-12)
    # alpha monotone decreasing, sigma monotone increasing
    assert torch.all(a[1:] <= a[:-1])
    assert torch.all(s[1:] >= s[:-1])


def test_alpha_sigma_rejects_out_of_range():
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            SCHED.alpha_sigma(bad)


def test_diffuse_frozen_value():
    # x=1, eps=2, t=0.5: z = (1 + 2) / sqrt(2) = 2.1213203435596424
    x = torch.tensor([1.0], dtype=torch.float64)
    eps = torch.tensor([2.0], dtype=torch.float64)
    state = diffuse(SCHED, x, eps, 0.5)
    assert float(state.z) == pytest.approx(2.1213203435596424, abs=1e-12)
    assert state.t == 0.5


def test_v_frozen_value():
    # x=1, eps=2, t=0.5: v = (2 - 1) / sqrt(2) = 0.7071067811865476
    x = torch.tensor([1.0], dtype=torch.float64)
    eps = torch.tensor([2.0], dtype=torch.float64)
    v = v_from_x_eps(SCHED, x, eps, 0.5)
    assert v.kind is PredictionKind.V
    assert float(v.value) == pytest.approx(SQRT_HALF, abs=1e-12)


def test_conversions_recover_ground_truth():
    # With exact (x, eps) the derived v converts back to both of them.
    g = torch.Generator().manual_seed(7)
    x = torch.randn(64, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(64, 3, generator=g, dtype=torch.float64)
    for t in (0.05, 0.3, 0.5, 0.77, 0.95):
        state = diffuse(SCHED, x, eps, t)
        v = v_from_x_eps(SCHED, x, eps, t)
        x_hat = convert(SCHED, v, state, PredictionKind.X).value
        eps_hat = convert(SCHED, v, state, PredictionKind.EPSILON).value
        assert torch.allclose(x_hat, x, atol=1e-12)
        assert torch.allclose(eps_hat, eps, atol=1e-12)
        # and from x / eps back to v
        v_from_x = convert(SCHED, Prediction(PredictionKind.X, x), state, PredictionKind.V)
        v_from_e = convert(SCHED, Prediction(PredictionKind.EPSILON, eps), state, PredictionKind.V)
        assert torch.allclose(v_from_x.value, v.value, atol=1e-12)
        assert torch.allclose(v_from_e.value, v.value, atol=1e-12)


def test_conversion_cycles_return_original():
    # Any cycle of conversions is the identity where nothing is singular.
    g = torch.Generator().manual_seed(11)
    kinds = [PredictionKind.V, PredictionKind.X, PredictionKind.EPSILON]
    for trial in range(50):
        t = 0.02 + 0.96 * torch.rand(1, generator=g, dtype=torch.float64).item()
        z = torch.randn(8, 2, generator=g, dtype=torch.float64)
        y = torch.randn(8, 2, generator=g, dtype=torch.float64)
        state = LatentState(z=z, t=t)
        start = kinds[trial % 3]
        pred = Prediction(start, y)
        cycle = [kinds[(trial + 1) % 3], kinds[(trial + 2) % 3], start]
        out = pred
        for k in cycle:
            out = convert(SCHED, out, state, k)
        assert out.kind is start
        assert torch.allclose(out.value, y, atol=1e-9)


def test_per_sample_time_broadcasts():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(16, 2, generator=g, dtype=torch.float64)
    eps = torch.randn(16, 2, generator=g, dtype=torch.float64)
    t = 0.1 + 0.8 * torch.rand(16, generator=g, dtype=torch.float64)
    state = diffuse(SCHED, x, eps, t)
    assert state.z.shape == (16, 2)
    v = v_from_x_eps(SCHED, x, eps, t)
    x_hat = convert(SCHED, v, state, PredictionKind.X).value
    assert torch.allclose(x_hat, x, atol=1e-12)
    # rows agree with scalar-t evaluation
    row_state = diffuse(SCHED, x[3:4], eps[3:4], float(t[3]))
    assert torch.allclose(row_state.z, state.z[3:4], atol=1e-12)


def test_singularity_rejection_at_endpoints():
    z = torch.ones(1, dtype=torch.float64)
    near0 = LatentState(z=z, t=ENDPOINT_MARGIN / 2)
    near1 = LatentState(z=z, t=1.0 - ENDPOINT_MARGIN / 2)
    x_pred = Prediction(PredictionKind.X, z.clone())
    e_pred = Prediction(PredictionKind.EPSILON, z.clone())
    with pytest.raises(SingularityError):
        convert(SCHED, x_pred, near0, PredictionKind.EPSILON)
    with pytest.raises(SingularityError):
        convert(SCHED, e_pred, near1, PredictionKind.X)
    # v conversions never divide, so both endpoints are fine
    v_pred = Prediction(PredictionKind.V, z.clone())
    for state in (LatentState(z=z, t=0.0), LatentState(z=z, t=1.0)):
        convert(SCHED, v_pred, state, PredictionKind.X)
        convert(SCHED, v_pred, state, PredictionKind.EPSILON)
    # just past the margin both directions work
    ok0 = LatentState(z=z, t=ENDPOINT_MARGIN * 2)
    ok1 = LatentState(z=z, t=1.0 - ENDPOINT_MARGIN * 2)
    convert(SCHED, x_pred, ok0, PredictionKind.EPSILON)
    convert(SCHED, e_pred, ok1, PredictionKind.X)


def test_identity_conversion_is_noop():
    z = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
    pred = Prediction(PredictionKind.V, z)
    out = convert(SCHED, pred, LatentState(z=z, t=0.4), PredictionKind.V)
    assert out is pred


def test_x_eps_reconstruction_identity():
    # alpha * x_hat + sigma * eps_hat == z for any prediction, any kind.
    g = torch.Generator().manual_seed(5)
    for kind in PredictionKind:
        z = torch.randn(32, 2, generator=g, dtype=torch.float64)
        y = torch.randn(32, 2, generator=g, dtype=torch.float64)
        state = LatentState(z=z, t=0.37)
        x_hat, eps_hat = x_eps_from_prediction(SCHED, Prediction(kind, y), state)
        a, s = SCHED.alpha_sigma(0.37)
        assert torch.allclose(float(a) * x_hat + float(s) * eps_hat, z, atol=1e-9)


def test_make_schedule():
    assert isinstance(make_schedule({"type": "cosine"}), CosineSchedule)
    assert isinstance(make_schedule(None), CosineSchedule)
    with pytest.raises(ValueError):
        make_schedule({"type": "linear"})
