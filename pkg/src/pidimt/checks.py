"""Fast invariant suite run by ``pidimt check``; each check returns (passed, detail)."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np
import torch

from .backbone import GateNoiseSchedule, MixtureOfExperts, mamba_scan
from .config import SampleConfig, desk_config
from .diffusion import Anchor, NoiseSchedule, lambda_grid
from .model import PiDiMT
from .physics import PHState, hamiltonian, inject_refined, symplectic_refine
from .planner import sample
from .scenarios import KINDS, batch_targets, generate_scenario

f64 = torch.float64


def variance_preservation():
    a, s = NoiseSchedule().marginal(np.linspace(0, 1, 1000))
    err = float(np.abs(a**2 + s**2 - 1).max())
    return err <= 1e-12, f"max |a^2+s^2-1| = {err:.2e}"


def lambda_monotone():
    sched = NoiseSchedule()
    lams = sched.lam(lambda_grid(40, sched))
    return bool(np.all(np.diff(lams) > 0)), "log-SNR increases along the solver grid"


def clamp_idempotent():
    g = torch.Generator().manual_seed(0)
    mask = torch.rand(3, 5, generator=g) > 0.5
    anchor = Anchor(mask, torch.randn(3, 5, generator=g))
    x = torch.randn(3, 5, generator=g)
    once = anchor.apply(x)
    return torch.equal(anchor.apply(once), once), "apply(apply(x)) == apply(x)"


def scan_equivalence():
    g = torch.Generator().manual_seed(0)
    L, d, n = 64, 4, 3
    x = torch.randn(1, L, d, generator=g, dtype=f64)
    delta = torch.rand(1, L, d, generator=g, dtype=f64) * 0.3
    A = -torch.rand(d, n, generator=g, dtype=f64) - 0.1
    B, C = torch.randn(1, L, n, generator=g, dtype=f64), torch.randn(1, L, n, generator=g, dtype=f64)
    h = torch.zeros(d, n, dtype=f64)
    ref = []
    for t in range(L):
        a_bar = torch.exp(delta[0, t, :, None] * A)
        h = a_bar * h + (a_bar - 1) / A * B[0, t] * x[0, t, :, None]
        ref.append(h @ C[0, t])
    err = float((mamba_scan(x, delta, A, B, C)[0] - torch.stack(ref)).abs().max())
    return err <= 1e-10, f"max |scan - loop| = {err:.2e}"


@torch.no_grad()
def moe_routing():
    moe = MixtureOfExperts(8, n_shallow=4, top_k=2, noise=GateNoiseSchedule(1.0, 50)).eval()
    w = moe.route(torch.randn(32, 8, generator=torch.Generator().manual_seed(0)))
    sums = float((w.sum(-1) - 1).abs().max())
    active = bool(torch.all((w > 0).sum(-1) == 2))
    sched = [moe.noise(s) for s in range(60)]
    ok = sums <= 1e-6 and active and all(a >= b for a, b in zip(sched, sched[1:])) and moe.noise(50) == 0
    return ok, f"|sum-1| = {sums:.1e}, exactly k active: {active}"


def energy_identities():
    st = PHState(torch.zeros(2, dtype=f64), torch.tensor([2.0, -1.0], dtype=f64), steps=100)
    _, p = symplectic_refine(st, torch.zeros(2, dtype=f64))
    drift = float((hamiltonian(p, 1.0) - hamiltonian(st.p, 1.0)).abs().max())
    q_nc = torch.tensor([0.5, -0.3], dtype=f64)
    _, p = symplectic_refine(st, q_nc)
    ps = torch.cat([st.p[None], p])
    H = hamiltonian(ps, 1.0)
    work = st.dt * (q_nc * ps[:-1]).sum(-1) + (st.dt * q_nc).pow(2).sum() / 2
    gap = float((H[1:] - H[:-1] - work).abs().max())
    return drift == 0.0 and gap <= 1e-12, f"free drift {drift:.1e}, work-energy gap {gap:.1e}"


def injection_locality():
    traj = torch.randn(2, 3, 12, 4, generator=torch.Generator().manual_seed(0))
    out = inject_refined(traj, torch.zeros(5, 2, 2), torch.zeros(5, 2, 2), 5)
    keep = torch.ones_like(traj, dtype=torch.bool)
    keep[:, 0, 1:6] = False
    return torch.equal(out[keep], traj[keep]), "only ego frames 1..T_anchor change"


@torch.no_grad()
def identity_and_anchor():
    cfg = desk_config().model
    torch.manual_seed(0)
    model = PiDiMT(cfg).eval()
    scen = [generate_scenario(k, i, model.limits, cfg.future) for i, k in enumerate(KINDS)]
    batch, target = batch_targets(scen, model.limits)
    den = model.denoiser
    mem = model.encode(batch)
    x = model.to_model_units(target)
    tok = den.embed(x, mem, batch.agent_valid)
    mask = batch.agent_valid.unsqueeze(-1).expand(-1, -1, x.shape[2]).reshape(tok.shape[:2])
    dev = float((den.run_blocks(tok, mask, den.condition(mem.y, torch.full((len(scen),), 0.5)), mem) - tok)
                .abs().max())
    traj = sample(model, batch, SampleConfig(steps=3))
    v = batch.agent_valid
    anchored = torch.equal(traj[:, :, 0][v], batch.current[v])
    return dev == 0.0 and anchored, f"block-stack deviation {dev}, anchored frame 0: {anchored}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "variance_preservation": variance_preservation,
    "lambda_monotone": lambda_monotone,
    "clamp_idempotent": clamp_idempotent,
    "scan_equivalence": scan_equivalence,
    "moe_routing": moe_routing,
    "energy_identities": energy_identities,
    "injection_locality": injection_locality,
    "identity_and_anchor": identity_and_anchor,
}


def run_checks(names: list[str] | None = None) -> list[tuple[str, bool, str, float]]:
    out = []
    for name in names or list(CHECKS):
        start = time.perf_counter()
        ok, detail = CHECKS[name]()
        out.append((name, bool(ok), detail, time.perf_counter() - start))
    return out
