import numpy as np
import pytest
from dataclasses import replace

import moelab as m
from moelab.errors import ConfigurationError, KernelConditioningError
from moelab.meanfield import (DmftConfig, _flat, _unflat, _zero_state,
                              cholesky_with_jitter, quantile_threshold,
                              sample_expert_site, sample_within_site,
                              solve_dmft)


def _probe(P=3, D=4, steps=4, dt=0.1, seed=0, **kw):
    data = m.make_probe_dataset(P=P, D=D, seed=seed)
    defaults = dict(M_res=256, M_exp=64, M_within=8, M_sens_exp=8,
                    M_sens_within=2, damping=0.7, max_iter=8, tol=5e-3,
                    seed=3, expert_chunk=64)
    defaults.update(kw)
    return DmftConfig(Kx=data.Kx, y=data.y, D=D, steps=steps, dt=dt, **defaults)


def _static_state(cfg, ch_scale=1.0, cg_scale=1.0):
    """Kernels constant in time: C_h = ch_scale*Kx/D, C_g = cg_scale*(I-ish)."""
    P, T = cfg.P, cfg.T
    state = _zero_state(cfg)
    base_g = 0.5 * np.eye(P) + 0.5
    state.C_g = cg_scale * np.tile(base_g[:, :, None, None], (1, 1, T, T))
    state.C_h = ch_scale * state.C_h
    return state


# ----------------------------------------------------------------- plumbing

def test_flat_roundtrip():
    rng = np.random.default_rng(0)
    K = rng.standard_normal((3, 3, 4, 4))
    K = K + K.transpose(1, 0, 3, 2)
    assert np.array_equal(_unflat(_flat(K), 3, 4), K)


def test_cholesky_jitter_ladder():
    A = np.eye(4)
    A[0, 0] = 0.0   # singular but PSD: jitter rescues it
    L = cholesky_with_jitter(A)
    assert np.all(np.isfinite(L))
    B = -np.eye(3)  # negative definite: must fail loudly
    with pytest.raises(KernelConditioningError):
        cholesky_with_jitter(B)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        _probe(M_res=1).validate()
    with pytest.raises(ConfigurationError):
        _probe(damping=0.0).validate()
    with pytest.raises(ConfigurationError):
        _probe(M_exp=1024, M_within=1024, mw_cap=4096).validate()


# ----------------------------------------------------------------- quantile

def test_quantile_top1():
    assert quantile_threshold([0.1, 0.2, 0.3, 0.4], 0.25) == 0.4


def test_quantile_all_active():
    assert quantile_threshold([0.4, 0.1, 0.3], 1.0) == 0.1


def test_quantile_uniform_order_statistics():
    rng = np.random.default_rng(1)
    M = 20_000
    q = rng.uniform(0, 1, M)
    assert abs(quantile_threshold(q, 0.3) - 0.7) <= 3 / np.sqrt(M)


def test_quantile_empty():
    with pytest.raises(ConfigurationError):
        quantile_threshold([], 0.5)


# ----------------------------------------------------- GP sampler / within

def test_gp_sampler_covariance():
    """Empirical covariance of chi matches C_h within 5/sqrt(M) on a 3x3 grid
    (P=1, T=3 -> 3x3 flattened covariance)."""
    cfg = _probe(P=1, D=1, steps=2)
    T = cfg.T
    base = np.array([[1.0, 0.6, 0.3], [0.6, 1.0, 0.6], [0.3, 0.6, 1.0]])
    C_h = _unflat(base, 1, T)
    M = 20_000
    kernels = type("K", (), {"C_h": C_h, "C_g": C_h,
                             "Delta": np.zeros((1, T))})
    pop, phi1, psi, sens = sample_within_site(kernels, np.zeros((1, T)),
                                              M, seed=5, cfg=cfg)
    chi = pop.paths["chi"]            # (M, P, T)
    emp = np.einsum("mpt,mqs->ptqs", chi, chi)[0, :, 0, :] / M
    assert np.max(np.abs(emp - base)) < 5 / np.sqrt(M)


def test_within_frozen_process_matches_driver():
    """gamma0 = 0 (no drive): h1 = chi, so with phi=identity the empirical
    Phi1 matches C_h within MC error 3/sqrt(M)."""
    cfg = _probe(P=2, steps=2, phi="identity", gamma0=0.0)
    state = _static_state(cfg)
    M = 10_000
    kernels = type("K", (), {"C_h": state.C_h, "C_g": state.C_g,
                             "Delta": np.ones((2, cfg.T))})
    pop, phi1, psi, sens = sample_within_site(
        kernels, np.ones((2, cfg.T)), M, seed=7, cfg=cfg,
        with_sensitivities=False)
    assert np.array_equal(pop.paths["h1"], pop.paths["chi"])
    assert np.max(np.abs(phi1.values - state.C_h)) < 3 / np.sqrt(M)


def test_within_no_feedback_sensitivities_vanish():
    """gamma0 = 0, phi = identity: d phi(h1)/d xi == 0 and d g1/d chi has no
    history terms (only the dropped equal-time part)."""
    cfg = _probe(P=2, steps=2, phi="identity", gamma0=0.0)
    state = _static_state(cfg)
    kernels = type("K", (), {"C_h": state.C_h, "C_g": state.C_g,
                             "Delta": np.ones((2, cfg.T))})
    _, _, _, sens = sample_within_site(kernels, np.ones((2, cfg.T)), 64,
                                       seed=2, cfg=cfg)
    assert np.max(np.abs(sens["dphi_dxi"])) == 0.0
    assert np.max(np.abs(sens["dg1_dchi"])) == 0.0


def test_within_one_step_hand_unroll():
    """L_t = 1 grid: h1(1) = chi(1) + a1*dt*mean_mu(Delta w C_h g1)(0) with
    g1(0) = phi'(chi(0)) xi(0); verified on the sampled noise."""
    cfg = _probe(P=2, steps=1, dt=0.25)
    state = _static_state(cfg)
    Delta = np.array([[0.7, 0.0], [-0.3, 0.0]])
    w = np.array([[1.5, 2.0], [0.5, 1.0]])
    kernels = type("K", (), {"C_h": state.C_h, "C_g": state.C_g,
                             "Delta": Delta})
    M = 16
    pop, _, _, _ = sample_within_site(kernels, w, M, seed=9, cfg=cfg,
                                      with_sensitivities=False)
    act = m.make_activation(cfg.phi, cfg.sigma)
    chi, xi = pop.paths["chi"], pop.paths["xi"]
    h1, z1 = pop.paths["h1"], pop.paths["z1"]
    assert np.array_equal(h1[:, :, 0], chi[:, :, 0])
    g10 = act.dphi(chi[:, :, 0]) * xi[:, :, 0]
    for nu in range(2):
        hist = sum(Delta[mu, 0] * w[mu, 0] * state.C_h[mu, nu, 0, 1] * g10[:, mu]
                   for mu in range(2)) * cfg.dt / cfg.P
        assert np.allclose(h1[:, nu, 1], chi[:, nu, 1] + cfg.gamma0 * hist,
                           atol=1e-12)
        zhist = sum(Delta[mu, 0] * w[mu, 0] * state.C_g[mu, nu, 0, 1]
                    * act.phi(chi[:, mu, 0]) for mu in range(2)) * cfg.dt / cfg.P
        assert np.allclose(z1[:, nu, 1], xi[:, nu, 1] + cfg.gamma0 * zhist,
                           atol=1e-12)


def test_sensitivities_match_finite_differences():
    """Forward-accumulated response entries against central differences of the
    recursion w.r.t. injected noise."""
    cfg = _probe(P=2, steps=3, dt=0.3)
    state = _static_state(cfg)
    Delta = np.linspace(0.5, -0.4, 2 * cfg.T).reshape(2, cfg.T)
    w = np.linspace(0.5, 1.5, 2 * cfg.T).reshape(2, cfg.T)
    kernels = type("K", (), {"C_h": state.C_h, "C_g": state.C_g,
                             "Delta": Delta})
    M = 4
    pop, _, _, sens = sample_within_site(kernels, w, M, seed=13, cfg=cfg)
    act = m.make_activation(cfg.phi, cfg.sigma)
    P, T = 2, cfg.T
    a1 = a2 = cfg.gamma0
    dwt = Delta * cfg.dt / cfg.P

    def march(chi, xi):
        h1 = np.zeros((M, P, T))
        z = np.zeros((M, P, T))
        for n in range(T):
            hh = chi[:, :, n].copy()
            zz = xi[:, :, n].copy()
            for mm in range(n):
                for mu in range(P):
                    g1 = act.dphi(h1[:, mu, mm]) * z[:, mu, mm]
                    hh += a1 * dwt[mu, mm] * state.C_h[mu, :, mm, n][None, :] \
                        * g1[:, None] * w[mu, mm]
                    zz += a2 * dwt[mu, mm] * state.C_g[mu, :, mm, n][None, :] \
                        * act.phi(h1[:, mu, mm])[:, None] * w[mu, mm]
            h1[:, :, n] = hh
            z[:, :, n] = zz
        return h1, z

    chi, xi = pop.paths["chi"].copy(), pop.paths["xi"].copy()
    h1_ref, _ = march(chi, xi)
    assert np.max(np.abs(h1_ref - pop.paths["h1"])) < 1e-10

    h = 1e-6
    # d phi(h1_nu(n)) / d xi_mu(m), population averaged
    mu, mm, nu, nn = 1, 0, 0, 2
    xp = xi.copy()
    xp[:, mu, mm] += h
    xm = xi.copy()
    xm[:, mu, mm] -= h
    hp, _ = march(chi, xp)
    hm, _ = march(chi, xm)
    fd = np.mean((act.phi(hp[:, nu, nn]) - act.phi(hm[:, nu, nn])) / (2 * h))
    an = sens["dphi_dxi"][nu, nn, mu, mm]
    assert abs(fd - an) < 1e-5 * max(abs(fd), 1e-3)

    cp = chi.copy()
    cp[:, mu, mm] += h
    cm = chi.copy()
    cm[:, mu, mm] -= h
    hp, zp = march(cp, xi)
    hm, zm = march(cm, xi)
    g1p = act.dphi(hp[:, nu, nn]) * zp[:, nu, nn]
    g1m = act.dphi(hm[:, nu, nn]) * zm[:, nu, nn]
    fd = np.mean((g1p - g1m) / (2 * h))
    an = sens["dg1_dchi"][nu, nn, mu, mm]
    assert abs(fd - an) < 1e-5 * max(abs(fd), 1e-3)


# ------------------------------------------------------------- expert level

def test_expert_site_p_starts_at_zero():
    cfg = _probe(steps=3)
    state = _static_state(cfg)
    state.Delta = np.ones((cfg.P, cfg.T))
    pop = sample_expert_site(state, 32, seed=4, cfg=cfg)
    assert np.all(pop.paths["p"][:, :, 0] == 0.0)


def test_expert_site_frozen_without_drive():
    """Delta == 0 freezes p exactly and A up to the factorization jitter (the
    time-constant kernel makes the driving paths constant in time, broken only
    at the ~sqrt(jitter) level)."""
    cfg = _probe(steps=3)
    state = _static_state(cfg)
    state.Delta = np.zeros((cfg.P, cfg.T))
    pop = sample_expert_site(state, 32, seed=4, cfg=cfg)
    assert np.all(pop.paths["p"] == 0.0)
    A = pop.paths["A"]
    assert np.max(np.abs(A - A[:, :, :1])) < 1e-5


def test_topk_gate_fraction_exact():
    cfg = _probe(steps=2, gate_mode="topk", kappa=0.25, M_exp=64,
                 M_within=4, M_sens_exp=4)
    state = _static_state(cfg)
    state.Delta = np.ones((cfg.P, cfg.T))
    pop = sample_expert_site(state, 64, seed=6, cfg=cfg)
    frac = pop.paths["active"].mean(axis=0)   # (P, T)
    assert np.max(np.abs(frac - 0.25)) <= 1.0 / 64


def test_causality_bitwise():
    """Perturbing future kernel entries leaves earlier path values unchanged
    bitwise (time-major Cholesky is causal on a well-conditioned kernel)."""
    cfg = _probe(P=2, steps=3)
    base = np.array([[1.0, 0.4], [0.4, 1.0]])
    rho = 0.8 ** np.abs(np.subtract.outer(np.arange(cfg.T), np.arange(cfg.T)))
    C_h = np.einsum("pq,ns->pqns", base, rho)
    C_g = 0.7 * C_h
    Delta = 0.3 * np.ones((2, cfg.T))
    kernels1 = type("K", (), {"C_h": C_h.copy(), "C_g": C_g.copy(),
                              "Delta": Delta})
    C_h2 = C_h.copy()
    C_g2 = C_g.copy()
    C_h2[:, :, -1, -1] *= 2.0        # future-time block only (stays PSD)
    C_g2[:, :, -1, -1] *= 1.5
    kernels2 = type("K", (), {"C_h": C_h2, "C_g": C_g2, "Delta": Delta})
    w = np.ones((2, cfg.T))
    p1, _, _, _ = sample_within_site(kernels1, w, 16, seed=8, cfg=cfg,
                                     with_sensitivities=False)
    p2, _, _, _ = sample_within_site(kernels2, w, 16, seed=8, cfg=cfg,
                                     with_sensitivities=False)
    n_cut = cfg.T - 1
    assert np.array_equal(p1.paths["h1"][:, :, :n_cut],
                          p2.paths["h1"][:, :, :n_cut])
    assert not np.array_equal(p1.paths["h1"][:, :, n_cut],
                              p2.paths["h1"][:, :, n_cut])


# -------------------------------------------------------------- fixed point

def test_static_limit_no_drive():
    """gamma0 = 0: all kernels constant in time, C_h = Kx/D up to MC error."""
    cfg = _probe(steps=3, gamma0=0.0, M_res=4096, max_iter=3, responses=False)
    sol = solve_dmft(cfg)
    KxD = cfg.Kx / cfg.D
    for n in range(cfg.T):
        for npr in range(cfg.T):
            assert np.max(np.abs(sol.C_h[:, :, n, npr] - KxD)) \
                < 5 / np.sqrt(cfg.M_res)
    # time-constancy of C_phi3
    assert np.max(np.abs(sol.C_phi3 - sol.C_phi3[:, :, :1, :1])) < 1e-12


def test_init_slice_identity_readout():
    """t = 0 slice with phi = identity: C_phi3[0,0] = C_h[0,0] + mixture
    correction that shrinks with population size."""
    cfg = _probe(steps=2, phi="identity", M_res=8192, max_iter=2,
                 responses=False)
    sol = solve_dmft(cfg)
    gap = np.max(np.abs(sol.C_phi3[:, :, 0, 0] - sol.C_h[:, :, 0, 0]))
    assert gap < 0.05


def test_solver_deterministic_frozen_noise():
    cfg = _probe(steps=3, max_iter=3)
    a = solve_dmft(cfg)
    b = solve_dmft(cfg)
    assert np.array_equal(a.C_h, b.C_h)
    assert np.array_equal(a.loss, b.loss)
    assert a.change_history == b.change_history


def test_monotone_damping():
    """Halving rho halves the first-iteration kernel change within 20%."""
    base = _probe(steps=3, max_iter=1, responses=False)
    c_full = solve_dmft(replace(base, damping=0.8)).change_history[0]
    c_half = solve_dmft(replace(base, damping=0.4)).change_history[0]
    # the change metric is |F(K0) - K0| scaled by rho
    assert abs(c_half / c_full - 0.5) < 0.2 * 0.5


def test_solver_converges_and_reports():
    cfg = _probe(steps=3, max_iter=15, tol=2e-3)
    sol = solve_dmft(cfg)
    assert sol.converged
    assert sol.change_history[-1] < 2e-3
    assert sol.residual == pytest.approx(sol.change_history[-1] / cfg.damping)
    assert len(sol.change_history) == sol.iterations
    assert sol.loss.shape == (cfg.T,)
    # responses strictly lower triangular in time
    for n in range(cfg.T):
        assert np.all(sol.R_phixi[:, n, :, n:] == 0.0)
        assert np.all(sol.R_gchi[:, n, :, n:] == 0.0)


def test_nonconvergence_flagged():
    cfg = _probe(steps=3, max_iter=1, tol=1e-12)
    sol = solve_dmft(cfg)
    assert not sol.converged
    assert sol.residual > 1e-12
