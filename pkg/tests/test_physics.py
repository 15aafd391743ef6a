import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pidimt.numeric import ParameterError
from pidimt.physics import (CANONICAL_J, AccelEstimator, GuidanceConfig, HistoryError, PHState, accel_history,
                            guide, hamiltonian, inject_refined, refine_from_current, symplectic_refine,
                            weighted_avg_accel)

f64 = dict(dtype=torch.float64)


def hand_recurrence(q0, p0, q_nc, m, dt, S):
    """Plain-python oracle of the explicit update."""
    q, p, out = q0, p0, []
    for _ in range(S):
        q, p = q + dt * p / m, p + dt * q_nc
        out.append((q, p))
    return out


def test_weighted_average_examples():
    ones = torch.tensor([[1.0, 0.0]] * 5, **f64)
    assert weighted_avg_accel(ones, 5)[0].item() == 1.0
    ramp = torch.stack([torch.arange(5, **f64), torch.zeros(5, **f64)], -1)
    assert weighted_avg_accel(ramp, 5)[0].item() == 2.0
    assert torch.equal(weighted_avg_accel(ramp, 1), ramp[-1])
    with pytest.raises(HistoryError):
        weighted_avg_accel(ramp, 0)
    with pytest.raises(HistoryError):
        weighted_avg_accel(ramp, 6)


def test_weighted_average_respects_validity():
    hist = torch.tensor([[9.0, 9.0], [1.0, 2.0], [3.0, 4.0]], **f64)
    valid = torch.tensor([False, True, True])
    torch.testing.assert_close(weighted_avg_accel(hist, 3, valid), torch.tensor([2.0, 3.0], **f64))


def test_accel_history_backward_difference():
    v = torch.tensor([[0.0, 0.0], [1.0, 0.0], [3.0, 0.5]], **f64)
    acc, ok = accel_history(v, torch.tensor([True, True, True]), 0.5)
    torch.testing.assert_close(acc, torch.tensor([[2.0, 0.0], [4.0, 1.0]], **f64))
    acc, ok = accel_history(v, torch.tensor([False, True, True]), 0.5)
    assert ok.tolist() == [False, True] and torch.all(acc[0] == 0)


def test_estimator_zero_weights_and_bound():
    est = AccelEstimator(6, hidden=5).double()
    with torch.no_grad():
        for p in est.parameters():
            p.zero_()
    assert torch.all(est(torch.ones(3, 2, **f64), torch.ones(3, 6, **f64)) == 0)
    torch.manual_seed(0)
    est = AccelEstimator(6, hidden=5, a_max=8.0).double()
    with torch.no_grad():
        est.out.weight.mul_(1e3)
    out = est(1e3 * torch.randn(50, 2, **f64), 1e3 * torch.randn(50, 6, **f64))
    assert out.abs().max() <= 8.0


def test_estimator_matches_direct_formula():
    torch.manual_seed(2)
    est = AccelEstimator(4, hidden=7).double()
    a, y = torch.randn(3, 2, **f64), torch.randn(3, 4, **f64)
    W1, b1 = est.hidden.weight.detach().numpy(), est.hidden.bias.detach().numpy()
    W2, b2 = est.out.weight.detach().numpy(), est.out.bias.detach().numpy()
    z = np.concatenate([a.numpy(), y.numpy()], 1)
    expected = 8.0 * np.tanh(np.tanh(z @ W1.T + b1) @ W2.T + b2)
    np.testing.assert_allclose(est(a, y).detach().numpy(), expected, rtol=1e-12)


def test_phstate_validation():
    q = torch.zeros(2, **f64)
    for kw in (dict(mass=0.0), dict(steps=0), dict(dt=0.0), dict(dt=-0.1)):
        with pytest.raises(ParameterError):
            PHState(q, q, **kw)
    st_ = PHState(q, q)
    assert torch.all(st_.q_mask == 1) and torch.all(st_.p_mask == 1)


def test_free_particle_example():
    st_ = PHState(torch.zeros(1, **f64), torch.full((1,), 2.0, **f64), mass=1.0, dt=0.1, steps=3)
    q, p = symplectic_refine(st_, torch.zeros(1, **f64))
    np.testing.assert_allclose(q.flatten(), [0.2, 0.4, 0.6], rtol=1e-15)
    assert torch.all(p == 2.0)
    assert torch.all(hamiltonian(p, 1.0) == 2.0)


def test_constant_force_example_matches_hand_recurrence():
    st_ = PHState(torch.zeros(1, **f64), torch.full((1,), 2.0, **f64), mass=1.0, dt=0.1, steps=3)
    q, p = symplectic_refine(st_, torch.full((1,), 0.5, **f64))
    np.testing.assert_allclose(p.flatten(), [2.05, 2.10, 2.15], atol=1e-14)
    np.testing.assert_allclose(q.flatten(), [0.2, 0.405, 0.615], atol=1e-14)
    oracle = hand_recurrence(0.0, 2.0, 0.5, 1.0, 0.1, 3)
    assert q.flatten().tolist() == [o[0] for o in oracle]
    assert p.flatten().tolist() == [o[1] for o in oracle]


def test_literal_impulse_and_semi_implicit_variants():
    st_ = PHState(torch.zeros(1, **f64), torch.ones(1, **f64), dt=0.1, steps=2)
    q, p = symplectic_refine(st_, torch.full((1,), 0.5, **f64), impulse="literal")
    np.testing.assert_allclose(p.flatten(), [1.5, 2.0])
    np.testing.assert_allclose(q.flatten(), [0.1, 0.25])
    q, p = symplectic_refine(st_, torch.full((1,), 0.5, **f64), semi_implicit=True)
    np.testing.assert_allclose(q.flatten(), [0.105, 0.215])
    with pytest.raises(ParameterError):
        symplectic_refine(st_, torch.zeros(1, **f64), impulse="half")


def test_masks_freeze_channels():
    q0, p0 = torch.tensor([1.0, -2.0], **f64), torch.tensor([3.0, 4.0], **f64)
    st_ = PHState(q0, p0, steps=5, q_mask=torch.tensor([0.0, 1.0], **f64), p_mask=torch.zeros(2, **f64))
    q, p = symplectic_refine(st_, torch.tensor([1.0, 1.0], **f64))
    assert torch.all(q[:, 0] == 1.0) and torch.all(p == p0)
    assert not torch.all(q[:, 1] == -2.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(1e-3, 0.5), st.integers(1, 100),
       st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_energy_conservation_free(mass, dt, S, p0):
    p0 = torch.tensor(p0, **f64)
    st_ = PHState(torch.zeros(2, **f64), p0, mass=mass, dt=dt, steps=S)
    _, p = symplectic_refine(st_, torch.zeros(2, **f64))
    H0 = hamiltonian(p0, mass)
    assert torch.all(hamiltonian(p, mass) == H0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(1e-3, 0.5), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_discrete_work_energy_identity(mass, dt, vals):
    p0, qnc = torch.tensor(vals[:2], **f64), torch.tensor(vals[2:], **f64)
    st_ = PHState(torch.zeros(2, **f64), p0, mass=mass, dt=dt, steps=20)
    _, p = symplectic_refine(st_, qnc)
    ps = torch.cat([p0[None], p])
    H = hamiltonian(ps, mass)
    dH = H[1:] - H[:-1]
    work = dt * (qnc * ps[:-1]).sum(-1) / mass + (dt * qnc).pow(2).sum() / (2 * mass)
    scale = H.abs().max().clamp_min(1.0)
    assert ((dH - work).abs() / scale).max() <= 1e-12


def test_canonical_structure_matrix():
    assert torch.equal(CANONICAL_J + CANONICAL_J.T, torch.zeros(2, 2))
    # J grad H with H = p^2/2: (dq, dp) = (p, 0)
    assert CANONICAL_J @ torch.tensor([0.0, 3.0]) @ torch.tensor([1.0, 0.0]) == 3.0


def _traj(B=2, A=3, T=12, seed=0):
    return torch.randn(B, A, T, 4, generator=torch.Generator().manual_seed(seed), **f64)


def test_inject_locality_and_identities():
    traj = _traj()
    q = torch.randn(6, 2, 2, **f64)
    v = torch.randn(6, 2, 2, **f64)
    assert torch.equal(inject_refined(traj, q, v, 0), traj)
    out = inject_refined(traj, q, v, 4)
    changed = torch.zeros_like(traj, dtype=torch.bool)
    changed[:, 0, 1:5] = True
    assert torch.equal(out[~changed], traj[~changed])
    assert torch.equal(out[:, 0, 1:5, :2], q[:4].permute(1, 0, 2))
    same_q = traj[:, 0, 1:7, :2].permute(1, 0, 2)
    same_v = traj[:, 0, 1:7, 2:].permute(1, 0, 2)
    assert torch.equal(inject_refined(traj, same_q, same_v, 6), traj)
    with pytest.raises(ParameterError):
        inject_refined(traj, q, v, 12)
    with pytest.raises(ParameterError):
        inject_refined(traj, q, v, 7)


class FixedAccel(torch.nn.Module):
    def __init__(self, a):
        super().__init__()
        self.a = torch.as_tensor(a, **f64)

    def forward(self, a_wavg, y):
        return self.a.expand(a_wavg.shape[0], 2)


def _history(B, V=6, v=(5.0, 0.0)):
    feats = torch.zeros(B, 2, V, 8, **f64)
    feats[:, 0, :, 4] = v[0]
    feats[:, 0, :, 5] = v[1]
    return feats, torch.ones(B, 2, V, dtype=torch.bool)


def test_guide_reproduces_free_motion():
    T, dt = 15, 0.1
    t = torch.arange(T, **f64) * dt
    traj = torch.zeros(1, 2, T, 4, **f64)
    traj[0, 0, :, 0] = 5.0 * t
    traj[0, 0, :, 2] = 5.0
    feats, fm = _history(1)
    cfg = GuidanceConfig(steps=10, anchor_len=10, dt=dt)
    out = guide(traj, feats, fm, torch.zeros(1, 3, **f64), FixedAccel([0.0, 0.0]), cfg)
    assert (out - traj).abs().max() <= 1e-6


def test_guide_first_update_and_braking_acceleration():
    traj = _traj(B=1, T=16)
    feats, fm = _history(1)
    a = torch.tensor([-2.0, 0.5], **f64)
    cfg = GuidanceConfig(steps=10, anchor_len=10, dt=0.1)
    out = guide(traj, feats, fm, torch.zeros(1, 3, **f64), FixedAccel(a), cfg)
    cur = traj[0, 0, 0]
    torch.testing.assert_close(out[0, 0, 1, :2] - cur[:2], 0.1 * cur[2:4])
    q = out[0, 0, :11, :2]
    acc = (q[2:] - 2 * q[1:-1] + q[:-2]) / 0.01
    torch.testing.assert_close(acc, a.expand_as(acc), atol=1e-9, rtol=0)
    assert torch.equal(out[:, :, 11:], traj[:, :, 11:])
    assert torch.equal(out[:, 1:], traj[:, 1:])


def test_guide_q_nc_is_mass_times_estimate():
    cur = torch.tensor([[0.0, 0.0, 1.0, 0.0]], **f64)
    a = torch.tensor([[0.7, -0.2]], **f64)
    for m in (0.5, 1.0, 3.0):
        q, v = refine_from_current(cur, a, GuidanceConfig(mass=m, steps=4))
        ref = hand_recurrence(0.0, 1.0 * m, 0.7 * m, m, 0.1, 4)
        np.testing.assert_allclose(q[:, 0, 0], [r[0] for r in ref], rtol=1e-13)
        np.testing.assert_allclose(v[:, 0, 0] * m, [r[1] for r in ref], rtol=1e-13)


def test_guide_disabled_and_validation():
    traj = _traj(B=1, T=8)
    feats, fm = _history(1)
    est = FixedAccel([1.0, 1.0])
    y = torch.zeros(1, 3, **f64)
    assert guide(traj, feats, fm, y, est, GuidanceConfig(enabled=False)) is traj
    with pytest.raises(ParameterError):
        guide(traj, feats, fm, y, est, GuidanceConfig(steps=10, anchor_len=10))
    with pytest.raises(ParameterError):
        guide(traj, feats, fm, y, est, GuidanceConfig(steps=3, anchor_len=5))
