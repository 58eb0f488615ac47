"""Monte-Carlo fixed point for the closed discrete-time single-site equations.

Three coupled site populations on the (datum, step) grid:

residual site (one coordinate of the width-N stream), driven by u0 ~ N(0, Kx/D)
and a readout coordinate r3 ~ N(0,1):
    z3(n)  = r3 + a3*dt*sum_{m<n} <Delta(m) phi(h3(m))>
    h0(n)  = u0 + a0*dt*sum_{m<n} <Delta(m) (Kx/D) qt(m)>
    h3(n)  = h0(n) + sum_{m<n} Rphixi[n,m] gt(m)
                   + a2*dt*sum_{m<n} <Delta(m) MPhi[n,m] gt(m)>   (+ u3 noise)
    gt(n)  = phi'(h3(n)) z3(n)
    qt(n)  = gt(n) + sum_{m<n} Rgchi[n,m] h0(m)
                   + a1*dt*sum <Delta MPsi h0> + ar*dt*sum <Delta MAA h0>
    f(mu,n) = population mean of z3 * phi(h3_mu(n));  Delta from the loss.

expert site: b(0) ~ N(0,1) and
    p(n) = ar*dt*sum_{m<n} <Delta(m) A(m) sigma'_eff(m) C_h[m,n]>
    A(n) = C_phixi(n,n) + a2*dt*sum_{m<n} <Delta(m) w(m) C_g[m,n] Phi1[m,n]>
    gate: soft w = sigma(p)+b; top-K w = 1[q >= q_star] sigma(p), q = sigma(p)+b.

within-expert site (conditional on the expert's gate path):
    h1 = chi + a1*dt*sum <Delta w C_h g1>,   chi ~ GP(0, C_h)
    z  = xi  + a2*dt*sum <Delta w C_g phi(h1)>,  xi ~ GP(0, C_g)
    g1 = phi'(h1) z

Here C_h, C_g, C_phi3 play the H0, Gtilde, H3 roles of the finite model, w is
the gate value, A the order-one alignment, and the a_* are the effective
rates left by the mean-field parameterization (all equal to gamma0 under the
table scheme). Response kernels are estimated pathwise by forward-accumulated
sensitivities on a subset of the population (same frozen noise, so the
fixed-point map stays deterministic).

All two-time kernels are (P, P, T, T); the flattened index used for Gaussian
draws and history sums is time-major (q = n*P + mu), which makes Cholesky
factors causal: a path value at step n is bitwise independent of kernel
entries at later times.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .errors import ConfigurationError, KernelConditioningError
from .model import LossHook, make_activation, loss_and_delta
from .recordio import stream


# --------------------------------------------------------------------------
# configuration and results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DmftConfig:
    Kx: np.ndarray                # (P, P) input Gram
    y: np.ndarray                 # (P,)
    D: int                        # input dimension (embedding noise has cov Kx/D)
    steps: int
    dt: float
    phi: str = "tanh"
    sigma: str = "tanh"
    gamma0: float = 1.0
    rates: dict | None = None     # optional per-path overrides a0,a1,a2,a3,ar,ab
    gate_mode: str = "soft"
    kappa: float = 1.0
    bias_mode: str = "grad"
    eta_bias: float = 1.0
    loss: str | LossHook = "half-mse"
    M_res: int = 2048
    M_exp: int = 1024
    M_within: int = 32
    M_sens_exp: int = 128         # experts used for response estimation
    M_sens_within: int = 4        # within samples per expert for responses
    damping: float = 0.5
    max_iter: int = 30
    tol: float = 1e-4
    seed: int = 0
    alpha_star: float = 0.0       # forward-fluctuation variance multiplier
    frozen_noise: bool = True
    expert_chunk: int = 512
    mw_cap: int = 1 << 18         # budget cap on M_exp * M_within
    responses: bool = True

    @property
    def P(self) -> int:
        return self.Kx.shape[0]

    @property
    def T(self) -> int:
        return self.steps + 1

    def rate(self, name: str) -> float:
        if self.rates and name in self.rates:
            return float(self.rates[name])
        return float(self.gamma0)

    def validate(self) -> "DmftConfig":
        if self.M_res < 2 or self.M_exp < 2 or self.M_within < 2:
            raise ConfigurationError("population sizes must be >= 2")
        if not (0 < self.damping <= 1):
            raise ConfigurationError("damping must lie in (0, 1]")
        if self.M_exp * self.M_within > self.mw_cap:
            raise ConfigurationError(
                f"M_exp*M_within = {self.M_exp * self.M_within} exceeds the cap "
                f"{self.mw_cap}; lower the populations or raise mw_cap")
        if self.gate_mode not in ("soft", "topk"):
            raise ConfigurationError(f"unknown gate mode '{self.gate_mode}'")
        if self.gate_mode == "topk" and not (0 < self.kappa <= 1):
            raise ConfigurationError("topk needs kappa in (0, 1]")
        chunk0 = self.M_exp if self.gate_mode == "topk" else min(self.expert_chunk, self.M_exp)
        if self.responses and (self.M_sens_exp > chunk0
                               or self.M_sens_within > self.M_within):
            raise ConfigurationError(
                "sensitivity subset must fit inside the first expert chunk")
        return self


@dataclass
class SitePopulation:
    """Sampled paths of one level; arrays are keyed by field name."""

    level: str                    # 'residual' | 'expert' | 'within'
    M: int
    paths: dict[str, np.ndarray]


@dataclass
class DmftKernels:
    """Fixed-point state: correlation kernels, mixtures, responses, and the
    output/error paths, plus convergence metadata."""

    C_h: np.ndarray               # (P,P,T,T)
    C_phi3: np.ndarray
    C_g: np.ndarray
    M_phi: np.ndarray
    M_psi: np.ndarray
    M_aa: np.ndarray
    M_a: np.ndarray               # (P,T)
    R_phixi: np.ndarray           # (P,T,P,T) target-first, strictly lower in time
    R_gchi: np.ndarray
    Delta: np.ndarray             # (P,T)
    f: np.ndarray                 # (P,T)
    loss: np.ndarray              # (T,)
    q_star: np.ndarray | None = None   # (P,T) top-K thresholds
    loads: np.ndarray | None = None    # (T,) mean active fraction
    converged: bool = False
    iterations: int = 0
    residual: float = np.inf
    change_history: list = dc_field(default_factory=list)

    def kernel_dict(self) -> dict[str, np.ndarray]:
        return {"C_h": self.C_h, "C_phi3": self.C_phi3, "C_g": self.C_g,
                "M_phi": self.M_phi, "M_psi": self.M_psi, "M_aa": self.M_aa,
                "M_a": self.M_a, "R_phixi": self.R_phixi, "R_gchi": self.R_gchi,
                "Delta": self.Delta, "f": self.f}


# --------------------------------------------------------------------------
# small utilities
# --------------------------------------------------------------------------

def _flat(K: np.ndarray) -> np.ndarray:
    """(P,P,T,T)[mu,nu,n,n'] -> (TP,TP)[(n mu),(n' nu)] time-major."""
    P, T = K.shape[0], K.shape[2]
    return np.ascontiguousarray(K.transpose(2, 0, 3, 1)).reshape(T * P, T * P)


def _unflat(Kf: np.ndarray, P: int, T: int) -> np.ndarray:
    return np.ascontiguousarray(Kf.reshape(T, P, T, P).transpose(1, 3, 0, 2))


def _paths_flat(X: np.ndarray) -> np.ndarray:
    """(M, P, T) site paths -> (M, T*P) time-major flattening."""
    return np.ascontiguousarray(X.transpose(0, 2, 1)).reshape(X.shape[0], -1)


def _second_moment(X: np.ndarray) -> np.ndarray:
    """(M,P,T) -> (P,P,T,T) empirical two-time kernel."""
    M, P, T = X.shape
    V = _paths_flat(X)
    return _unflat(V.T @ V / M, P, T)


def cholesky_with_jitter(Kf: np.ndarray, jitter0: float = 1e-12,
                         jitter_max: float = 1e-8) -> np.ndarray:
    """Lower Cholesky factor with a multiplicative jitter ladder.

    The jitter is proportional to the local diagonal entry (not a global
    scale), so factor rows for early grid points stay bitwise independent of
    later-time kernel entries whenever the ladder level itself is stable.
    Beyond jitter_max (relative) the kernel is declared ill conditioned.
    """
    d = np.maximum(np.diag(Kf), 1e-30)
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(Kf + np.diag(jitter * d))
        except np.linalg.LinAlgError:
            jitter = jitter0 if jitter == 0.0 else jitter * 10.0
            if jitter > jitter_max:
                raise KernelConditioningError(
                    f"covariance factorization failed at relative jitter {jitter:.1e}")


def quantile_threshold(q_samples: np.ndarray, kappa: float) -> float:
    """The ceil(kappa*M)-th largest sample value: the smallest activated gate
    value when exactly that many samples are active (index ties go low)."""
    q = np.asarray(q_samples, dtype=np.float64).ravel()
    if q.size == 0:
        raise ConfigurationError("empty sample set")
    if not (0 < kappa <= 1):
        raise ConfigurationError("kappa must lie in (0, 1]")
    k = int(np.ceil(kappa * q.size))
    return float(np.sort(q)[::-1][k - 1])


def _topk_mask(q: np.ndarray, kappa: float) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise top-K selection over axis 0 with lowest-index tie break.
    q is (M, P); returns (mask, q_star[P])."""
    M, P = q.shape
    k = int(np.ceil(kappa * M))
    order = np.argsort(-q, axis=0, kind="stable")
    mask = np.zeros_like(q)
    cols = np.arange(P)
    for rank in range(k):
        mask[order[rank], cols] = 1.0
    q_star = q[order[k - 1], cols]
    return mask, q_star


# --------------------------------------------------------------------------
# residual pass
# --------------------------------------------------------------------------

def _residual_pass(cfg: DmftConfig, act, state: DmftKernels):
    """Sample the residual population under the current mixtures/responses.

    Returns (C_h, C_phi3, C_g, f, Delta, loss, population dict).
    """
    P, T, dt = cfg.P, cfg.T, cfg.dt
    M = cfg.M_res
    a0, a2r, a1r, ar = cfg.rate("a0"), cfg.rate("a2"), cfg.rate("a1"), cfg.rate("ar")
    a3 = cfg.rate("a3")

    L_x = cholesky_with_jitter(cfg.Kx / cfg.D)
    u0 = stream(cfg.seed, "dmft/res-u0").standard_normal((M, P)) @ L_x.T
    r3 = stream(cfg.seed, "dmft/res-r3").standard_normal(M)

    mphi_f = _flat(state.M_phi)            # [(m mu),(n nu)]
    mpsi_f = _flat(state.M_psi)
    maa_f = _flat(state.M_aa)
    # responses (P,T,P,T) target-first -> [(m mu), nu, n] with time-major rows
    rphixi_f = np.ascontiguousarray(
        state.R_phixi.transpose(3, 2, 0, 1)).reshape(T * P, P, T)
    rgchi_f = np.ascontiguousarray(
        state.R_gchi.transpose(3, 2, 0, 1)).reshape(T * P, P, T)

    noise_h3 = noise_q = None
    if cfg.alpha_star > 0:
        Lp = cholesky_with_jitter(cfg.alpha_star * mphi_f + 1e-14 * np.eye(T * P))
        Lq = cholesky_with_jitter(cfg.alpha_star * mpsi_f + 1e-14 * np.eye(T * P))
        noise_h3 = stream(cfg.seed, "dmft/res-u3").standard_normal((M, T * P)) @ Lp.T
        noise_q = stream(cfg.seed, "dmft/res-r0").standard_normal((M, T * P)) @ Lq.T

    h0 = np.zeros((M, P, T))
    h3 = np.zeros((M, P, T))
    gt = np.zeros((M, P, T))
    qt = np.zeros((M, P, T))
    z3 = np.zeros((M, T))
    f = np.zeros((P, T))
    Delta = np.zeros((P, T))
    loss = np.zeros(T)

    acc_h0 = np.zeros((M, P))
    acc_z3 = np.zeros(M)
    KxD = cfg.Kx / cfg.D

    for n in range(T):
        h0[:, :, n] = u0 + a0 * acc_h0
        z3[:, n] = r3 + a3 * acc_z3

        hist = slice(0, n * P)
        gt_flat = _paths_flat(gt[:, :, :n]) if n else np.zeros((M, 0))
        h0_flat = _paths_flat(h0[:, :, :n]) if n else np.zeros((M, 0))
        dw = (Delta[:, :n].T.reshape(-1) * dt / P) if n else np.zeros(0)

        resp = gt_flat @ rphixi_f[hist, :, n] if n else 0.0
        drive = gt_flat @ (dw[:, None] * mphi_f[hist, n * P:(n + 1) * P]) if n else 0.0
        h3[:, :, n] = h0[:, :, n] + resp + a2r * drive
        if noise_h3 is not None:
            h3[:, :, n] += noise_h3[:, n * P:(n + 1) * P]

        ph3 = act.phi(h3[:, :, n])
        gt[:, :, n] = act.dphi(h3[:, :, n]) * z3[:, n][:, None]
        f[:, n] = (z3[:, n][:, None] * ph3).mean(axis=0)
        loss[n], Delta[:, n] = loss_and_delta(f[:, n], cfg.y, cfg.loss)

        respq = h0_flat @ rgchi_f[hist, :, n] if n else 0.0
        driveq = h0_flat @ (dw[:, None] * (a1r * mpsi_f[hist, n * P:(n + 1) * P]
                                           + ar * maa_f[hist, n * P:(n + 1) * P])) \
            if n else 0.0
        qt[:, :, n] = gt[:, :, n] + respq + driveq
        if noise_q is not None:
            qt[:, :, n] += noise_q[:, n * P:(n + 1) * P]

        if n < T - 1:
            acc_h0 += dt * (Delta[:, n][None, :] * qt[:, :, n] / P) @ KxD
            acc_z3 += dt * (act.phi(h3[:, :, n]) @ (Delta[:, n] / P))

    C_h = _second_moment(h0)
    C_phi3 = _second_moment(act.phi(h3))
    C_g = _second_moment(gt)
    pop = {"h0": h0, "h3": h3, "gtilde3": gt, "qtilde": qt, "z3": z3,
           "u0": u0, "r3": r3}
    return C_h, C_phi3, C_g, f, Delta, loss, pop


# --------------------------------------------------------------------------
# expert + within-expert pass
# --------------------------------------------------------------------------

def _chunk_ranges(total: int, chunk: int):
    chunk = max(1, min(chunk, total))
    return [(k0, min(k0 + chunk, total)) for k0 in range(0, total, chunk)]


def _expert_chunk_march(cfg: DmftConfig, act, Delta, Ch_f, Cg_f, chi, xi,
                        C, W, b0=None, gate_paths=None, keep_fields=False):
    """March one chunk of experts (with their within populations) through time.

    chi, xi: (C*W, T*P) Gaussian drivers (time-major flattening); the within
    fields are carried per step in (P, C*W) layout and the running histories
    as (T*P, C*W) flats with the Delta*dt*w/P weight folded in at write time,
    so every history term is a single tall GEMM.

    b0: (C,) initial biases (required unless gate_paths are imposed).
    gate_paths: optional (w, seff) to impose instead of evolving the gate
    (used by the sensitivity re-march, where top-K thresholds of the full
    population must be frozen).
    """
    P, T, dt = cfg.P, cfg.T, cfg.dt
    CW = C * W
    a1, a2, ar, ab = (cfg.rate("a1"), cfg.rate("a2"),
                      cfg.rate("ar"), cfg.rate("ab"))
    dwt = Delta * dt / P                                 # (P, T)

    p = np.zeros((C, P, T))
    Acal = np.zeros((C, P, T))
    b = np.zeros((C, T))
    w = np.zeros((C, P, T))
    seff = np.zeros((C, P, T))
    active = np.ones((C, P, T))
    loads = np.zeros((C, T))
    qstar = np.zeros((P, T))
    cphixi = np.zeros((C, P, T))

    h1 = np.zeros((C, W, P, T)) if keep_fields else None
    z = np.zeros((C, W, P, T)) if keep_fields else None
    TP = T * P
    ph1_flat = np.zeros((TP, CW))     # phi(h1), unweighted (mixtures, Phi1)
    g1_flat = np.zeros((TP, CW))      # g1, unweighted (mixtures)
    ph1w_flat = np.zeros((TP, CW))    # phi(h1) * wdw   (z history)
    g1w_flat = np.zeros((TP, CW))     # g1 * wdw        (h1 history)
    wdw = np.zeros((C, TP))           # gate * Delta * dt / P, time-major
    S_p = np.zeros((C, TP))           # A * seff * Delta * dt / P

    imposed = gate_paths is not None
    if not imposed and b0 is None:
        raise ConfigurationError("expert march needs initial biases b0")

    for n in range(T):
        hi = n * P
        cols = slice(n * P, (n + 1) * P)

        p[:, :, n] = ar * (S_p[:, :hi] @ Ch_f[:hi, cols]) if n else 0.0
        if not imposed:
            if n == 0:
                b[:, 0] = b0
            elif cfg.bias_mode == "grad":
                b[:, n] = b[:, n - 1] + ab * dt * (
                    Acal[:, :, n - 1] @ (Delta[:, n - 1] / P))
            else:
                b[:, n] = b[:, n - 1] - cfg.eta_bias * dt * (
                    loads[:, n - 1] - cfg.kappa)

        # within step n (uses gates at m < n only)
        h1n = chi[:, cols].T.copy()                       # (P, CW)
        zn = xi[:, cols].T.copy()
        if n:
            h1n += a1 * (Ch_f[:hi, cols].T @ g1w_flat[:hi])
            zn += a2 * (Cg_f[:hi, cols].T @ ph1w_flat[:hi])
        ph1n = act.phi(h1n)
        g1n = act.dphi(h1n) * zn
        if keep_fields:
            h1[:, :, :, n] = h1n.reshape(P, C, W).transpose(1, 2, 0)
            z[:, :, :, n] = zn.reshape(P, C, W).transpose(1, 2, 0)

        xin = xi[:, cols].T
        cphixi[:, :, n] = np.mean((ph1n * xin).reshape(P, C, W), axis=2).T
        if n:
            phi1_slice = np.einsum(
                "qcw,vcw->cqv", ph1_flat[:hi].reshape(hi, C, W),
                ph1n.reshape(P, C, W), optimize=True) / W
            Acal[:, :, n] = cphixi[:, :, n] + a2 * np.einsum(
                "cq,qv,cqv->cv", wdw[:, :hi], Cg_f[:hi, cols],
                phi1_slice, optimize=True)
        else:
            Acal[:, :, n] = cphixi[:, :, n]

        if imposed:
            w[:, :, n] = gate_paths[0][:, :, n]
            seff[:, :, n] = gate_paths[1][:, :, n]
        else:
            sp = act.sigma(p[:, :, n])
            q = sp + b[:, n][:, None]
            if cfg.gate_mode == "topk":
                mask, qstar[:, n] = _topk_mask(q, cfg.kappa)
                w[:, :, n] = mask * sp
                loads[:, n] = mask.mean(axis=1)
            else:
                mask = np.ones_like(q)
                w[:, :, n] = q
                loads[:, n] = np.clip(q, 0.0, 1.0).mean(axis=1)
            active[:, :, n] = mask
            seff[:, :, n] = mask * act.dsigma(p[:, :, n])

        wdw_n = w[:, :, n].T * dwt[:, n][:, None]         # (P, C)
        wdw[:, cols] = wdw_n.T
        S_p[:, cols] = Acal[:, :, n] * seff[:, :, n] * dwt[:, n][None, :]
        ph1_flat[cols] = ph1n
        g1_flat[cols] = g1n
        wexp = np.repeat(wdw_n, W, axis=1)                # (P, CW)
        ph1w_flat[cols] = ph1n * wexp
        g1w_flat[cols] = g1n * wexp

    out = {"p": p, "A": Acal, "b": b, "w": w, "seff": seff,
           "active": active, "loads": loads, "qstar": qstar, "cphixi": cphixi,
           "ph1_flat": ph1_flat, "g1_flat": g1_flat}
    if keep_fields:
        out["h1"] = h1
        out["z"] = z
    return out


def _expert_pass(cfg: DmftConfig, act, state: DmftKernels,
                 collect_pop: bool = False):
    """Sample the expert population (nested within populations), returning the
    mixture kernels, gate thresholds/loads, and the gate paths of the leading
    experts (reused by the response pass)."""
    P, T = cfg.P, cfg.T
    Ch_f = _flat(state.C_h)
    Cg_f = _flat(state.C_g)
    Lh = cholesky_with_jitter(Ch_f)
    Lg = cholesky_with_jitter(Cg_f)
    W = cfg.M_within

    if cfg.gate_mode == "topk":
        ranges = [(0, cfg.M_exp)]
    else:
        ranges = _chunk_ranges(cfg.M_exp, cfg.expert_chunk)

    TP = T * P
    acc_mphi = np.zeros((TP, TP))
    acc_mpsi = np.zeros((TP, TP))
    acc_maa = np.zeros((TP, TP))
    acc_ma = np.zeros(TP)
    loads_path = np.zeros(T)
    qstar = None
    keep_gates = None
    pop = {"b0": [], "p": [], "A": [], "b": [], "w": [],
           "active": []} if collect_pop else None

    for ci, (k0, k1) in enumerate(ranges):
        C = k1 - k0
        b0 = stream(cfg.seed, f"dmft/exp-b0/{ci}").standard_normal(C)
        Zc = stream(cfg.seed, f"dmft/within-chi/{ci}").standard_normal((C * W, TP))
        chi = Zc @ Lh.T
        del Zc
        Zx = stream(cfg.seed, f"dmft/within-xi/{ci}").standard_normal((C * W, TP))
        xi = Zx @ Lg.T
        del Zx

        res = _expert_chunk_march(cfg, act, state.Delta, Ch_f, Cg_f, chi, xi,
                                  C, W, b0=b0)
        # gate weights per (sample, grid point): w[c, mu, n] -> (CW, TP)
        wv = np.repeat(np.ascontiguousarray(
            res["w"].transpose(0, 2, 1)).reshape(C, TP), W, axis=0)
        V = wv * res["ph1_flat"].T
        acc_mphi += V.T @ V
        V = wv * res["g1_flat"].T
        acc_mpsi += V.T @ V
        del wv, V
        U = np.ascontiguousarray(
            (res["A"] * res["seff"]).transpose(0, 2, 1)).reshape(C, TP)
        acc_maa += U.T @ U
        acc_ma += U.sum(axis=0)
        loads_path += res["loads"].sum(axis=0)
        if ci == 0:
            n_keep = min(cfg.M_sens_exp, C)
            keep_gates = (res["w"][:n_keep].copy(), res["seff"][:n_keep].copy())
            qstar = res["qstar"]
        if collect_pop:
            pop["b0"].append(b0)
            for key in ("p", "A", "b", "w", "active"):
                pop[key].append(res[key])

    M = cfg.M_exp
    MW = M * W
    M_phi = _unflat(acc_mphi / MW, P, T)
    M_psi = _unflat(acc_mpsi / MW, P, T)
    M_aa = _unflat(acc_maa / M, P, T)
    M_a = np.ascontiguousarray((acc_ma / M).reshape(T, P).T)
    loads_path /= M
    out = {"M_phi": M_phi, "M_psi": M_psi, "M_aa": M_aa, "M_a": M_a,
           "loads": loads_path, "q_star": qstar if cfg.gate_mode == "topk" else None,
           "gates": keep_gates}
    if collect_pop:
        out["pop"] = {k: np.concatenate(v) for k, v in pop.items()}
    return out


# --------------------------------------------------------------------------
# response (pathwise sensitivity) pass
# --------------------------------------------------------------------------

def _sens_core(cfg: DmftConfig, act, Ch_f, Cg_f, Delta, w_sub, chi, xi, Ws,
               gate_weight: bool):
    """Forward-accumulated pathwise sensitivities for imposed gate paths.

    w_sub: (Cs, P, T) gate values; chi, xi: (Cs*Ws, T*P) noise draws. The
    within process is re-marched while the sensitivities of phi(h1) and g1 to
    every (xi, chi) source are propagated in (own-grid, sample, source)
    layout. Returns the (P, T, T*P) accumulators of

        d phi(h1_nu(n)) / d xi_mu(m)   and   d g1_nu(n) / d chi_mu(m),

    averaged over samples, gate-weighted by w(nu, n) when requested, and kept
    strictly lower triangular in time (Step-A causal convention: the
    equal-time g1/chi sensitivity is dropped, an O(dt) ambiguity).
    """
    if act.d2phi is None:
        raise ConfigurationError("response estimation needs a second derivative of phi")
    P, T, dt = cfg.P, cfg.T, cfg.dt
    TP = T * P
    a1, a2 = cfg.rate("a1"), cfg.rate("a2")
    Cs = w_sub.shape[0]
    B = Cs * Ws
    dwt = Delta * dt / P
    # WD[q, b] = w[c, mu(q), n(q)] * dwt[mu(q), n(q)] for b = (c, wsample)
    wdw = (w_sub * dwt[None]).transpose(2, 1, 0).reshape(TP, Cs)
    WD = np.repeat(wdw, Ws, axis=1)                      # (TP, B)

    ph1w_flat = np.zeros((TP, B))
    g1w_flat = np.zeros((TP, B))
    # histories stored pre-weighted by WD (the row weight is fixed at write
    # time), so every step's contraction is a plain GEMM without re-copying
    Sg1w = {x: np.zeros((TP, B, TP)) for x in ("xi", "chi")}
    Sphw = {x: np.zeros((TP, B, TP)) for x in ("xi", "chi")}
    acc_phixi = np.zeros((P, T, TP))
    acc_gchi = np.zeros((P, T, TP))

    for n in range(T):
        hi = n * P
        cols = slice(n * P, (n + 1) * P)
        h1n = chi[:, cols].T.copy()                      # (P, B)
        zn = xi[:, cols].T.copy()
        if n:
            h1n += a1 * (Ch_f[:hi, cols].T @ g1w_flat[:hi])
            zn += a2 * (Cg_f[:hi, cols].T @ ph1w_flat[:hi])
        ph1n = act.phi(h1n)
        d1 = act.dphi(h1n)
        d2 = act.d2phi(h1n)
        g1n = d1 * zn

        for x in ("xi", "chi"):
            if n:
                Sh_n = a1 * np.tensordot(Ch_f[:hi, cols], Sg1w[x][:hi],
                                         axes=(0, 0))
                Sz_n = a2 * np.tensordot(Cg_f[:hi, cols], Sphw[x][:hi],
                                         axes=(0, 0))
            else:
                Sh_n = np.zeros((P, B, TP))
                Sz_n = np.zeros((P, B, TP))
            for v in range(P):
                src = n * P + v
                if x == "chi":
                    Sh_n[v, :, src] += 1.0
                else:
                    Sz_n[v, :, src] += 1.0
            Sph_n = d1[:, :, None] * Sh_n
            Sg1_n = (d2 * zn)[:, :, None] * Sh_n + d1[:, :, None] * Sz_n
            Sphw[x][cols] = Sph_n * WD[cols][:, :, None]
            Sg1w[x][cols] = Sg1_n * WD[cols][:, :, None]
            if gate_weight:
                wgt = np.repeat(w_sub[:, :, n].T, Ws, axis=1)   # (P, B)
            else:
                wgt = np.ones((P, B))
            if x == "xi":
                acc_phixi[:, n, :hi] += np.einsum(
                    "vb,vbs->vs", wgt, Sph_n[:, :, :hi], optimize=True)
            else:
                acc_gchi[:, n, :hi] += np.einsum(
                    "vb,vbs->vs", wgt, Sg1_n[:, :, :hi], optimize=True)

        ph1w_flat[cols] = ph1n * WD[cols]
        g1w_flat[cols] = g1n * WD[cols]

    return acc_phixi / B, acc_gchi / B


def _acc_to_kernel(acc: np.ndarray, P: int, T: int) -> np.ndarray:
    """(P, T, T*P) time-major source axis -> (P, T, P, T)."""
    return np.ascontiguousarray(acc.reshape(P, T, T, P).transpose(0, 1, 3, 2))


def _sensitivity_pass(cfg: DmftConfig, act, state: DmftKernels, gates):
    """Gate-weighted response kernels on the frozen-gate sensitivity subset
    (identical noise rows as the mixture pass: chunk 0, leading samples)."""
    P, T = cfg.P, cfg.T
    TP = T * P
    Ch_f = _flat(state.C_h)
    Cg_f = _flat(state.C_g)
    Lh = cholesky_with_jitter(Ch_f)
    Lg = cholesky_with_jitter(Cg_f)
    w_sub, _ = gates
    Cs = w_sub.shape[0]
    Ws = cfg.M_sens_within
    W = cfg.M_within
    C0 = cfg.M_exp if cfg.gate_mode == "topk" else min(cfg.expert_chunk, cfg.M_exp)
    Zc = stream(cfg.seed, "dmft/within-chi/0").standard_normal((C0 * W, TP))
    Zx = stream(cfg.seed, "dmft/within-xi/0").standard_normal((C0 * W, TP))
    pick = (np.arange(Cs)[:, None] * W + np.arange(Ws)[None, :]).reshape(-1)
    chi_all = Zc[pick] @ Lh.T
    xi_all = Zx[pick] @ Lg.T
    del Zc, Zx

    acc_phixi = np.zeros((P, T, TP))
    acc_gchi = np.zeros((P, T, TP))
    c_chunk = max(1, min(Cs, max(1, 128 // Ws)))
    total = Cs * Ws
    for c0 in range(0, Cs, c_chunk):
        c1 = min(c0 + c_chunk, Cs)
        rows = slice(c0 * Ws, c1 * Ws)
        a_phixi, a_gchi = _sens_core(
            cfg, act, Ch_f, Cg_f, state.Delta, w_sub[c0:c1],
            chi_all[rows], xi_all[rows], Ws, gate_weight=True)
        weight = (c1 - c0) * Ws / total
        acc_phixi += a_phixi * weight
        acc_gchi += a_gchi * weight

    return _acc_to_kernel(acc_phixi, P, T), _acc_to_kernel(acc_gchi, P, T)


# --------------------------------------------------------------------------
# fixed point
# --------------------------------------------------------------------------

def _zero_state(cfg: DmftConfig) -> DmftKernels:
    P, T = cfg.P, cfg.T
    z4 = np.zeros((P, P, T, T))
    return DmftKernels(
        C_h=np.tile((cfg.Kx / cfg.D)[:, :, None, None], (1, 1, T, T)),
        C_phi3=z4.copy(), C_g=z4.copy(),
        M_phi=z4.copy(), M_psi=z4.copy(), M_aa=z4.copy(),
        M_a=np.zeros((P, T)),
        R_phixi=np.zeros((P, T, P, T)), R_gchi=np.zeros((P, T, P, T)),
        Delta=np.zeros((P, T)), f=np.zeros((P, T)), loss=np.zeros(T))


def solve_dmft(cfg: DmftConfig) -> DmftKernels:
    """Damped Monte-Carlo fixed point for the single-site system.

    Each iteration (i) samples residual sites under the current mixtures,
    responses and Delta, (ii) samples expert+within sites under the current
    correlation kernels, then (iii) damps every kernel toward the fresh
    estimate. With frozen noise (default) the iteration map is deterministic,
    so the loop either converges or hits the cap; either way the final
    entrywise change is reported, never hidden.
    """
    cfg = cfg.validate()
    act = make_activation(cfg.phi, cfg.sigma)
    rho = cfg.damping

    state = _zero_state(cfg)
    # warm init: residual statics with no feedback fix C_h = Kx/D and give the
    # init-law C_phi3, C_g, f, Delta
    C_h, C_phi3, C_g, f, Delta, loss, _ = _residual_pass(cfg, act, state)
    state.C_h, state.C_phi3, state.C_g = C_h, C_phi3, C_g
    state.f, state.Delta, state.loss = f, Delta, loss

    history = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        C_h, C_phi3, C_g, f, Delta, loss, _ = _residual_pass(cfg, act, state)
        exp = _expert_pass(cfg, act, state)
        if cfg.responses:
            R_phixi, R_gchi = _sensitivity_pass(cfg, act, state, exp["gates"])
        else:
            R_phixi, R_gchi = state.R_phixi, state.R_gchi

        new = {"C_h": C_h, "C_phi3": C_phi3, "C_g": C_g,
               "M_phi": exp["M_phi"], "M_psi": exp["M_psi"], "M_aa": exp["M_aa"],
               "M_a": exp["M_a"], "R_phixi": R_phixi, "R_gchi": R_gchi,
               "Delta": Delta, "f": f}
        old = state.kernel_dict()
        defect = max(float(np.max(np.abs(new[k] - old[k]))) for k in new)
        change = rho * defect        # applied per-iteration kernel change
        history.append(change)

        for k, v in new.items():
            setattr(state, k, (1.0 - rho) * old[k] + rho * v)
        state.loss = (1.0 - rho) * state.loss + rho * loss
        state.q_star = exp["q_star"]
        state.loads = exp["loads"]
        state.residual = defect      # undamped fixed-point defect, never hidden

        if change < cfg.tol:
            converged = True
            break

    state.converged = converged
    state.iterations = it
    state.change_history = history
    return state


# --------------------------------------------------------------------------
# public single-level sampling operations
# --------------------------------------------------------------------------

def sample_within_site(kernels, expert_path: np.ndarray, n_samples: int,
                       seed: int, cfg: DmftConfig | None = None,
                       with_sensitivities: bool = True):
    """Sample the within-expert site process for one expert gate path.

    kernels: object with C_h, C_g (P,P,T,T) and Delta (P,T) arrays.
    expert_path: gate values sigma~ on the (P, T) grid.
    Returns (SitePopulation, Phi1, Psi, sensitivities) where Phi1/Psi are the
    empirical within kernels (P,P,T,T) and sensitivities holds the population
    averaged d phi(h1(n))/d xi(m) and d g1(n)/d chi(m) arrays (P,T,P,T).
    """
    C_h, C_g, Delta = kernels.C_h, kernels.C_g, kernels.Delta
    P, T = Delta.shape
    if cfg is None:
        cfg = DmftConfig(Kx=np.eye(P), y=np.zeros(P), D=1, steps=T - 1, dt=1.0)
    act = make_activation(cfg.phi, cfg.sigma)
    Ch_f, Cg_f = _flat(C_h), _flat(C_g)
    Lh = cholesky_with_jitter(Ch_f)
    Lg = cholesky_with_jitter(Cg_f)
    TP = T * P
    Zc = stream(seed, "within-site/chi").standard_normal((n_samples, TP))
    Zx = stream(seed, "within-site/xi").standard_normal((n_samples, TP))
    chi = Zc @ Lh.T                             # (M, TP), one expert
    xi = Zx @ Lg.T
    w = expert_path[None]                       # (1, P, T)
    res = _expert_chunk_march(cfg, act, Delta, Ch_f, Cg_f, chi, xi,
                              C=1, W=n_samples,
                              gate_paths=(w, np.zeros_like(w)),
                              keep_fields=True)
    h1 = res["h1"][0]                           # (M, P, T)
    z = res["z"][0]
    phi1 = _second_moment(act.phi(h1))
    g1 = act.dphi(h1) * z
    psi = _second_moment(g1)
    pop = SitePopulation("within", n_samples,
                         {"h1": h1, "z1": z, "g1": g1,
                          "chi": chi.reshape(n_samples, T, P).transpose(0, 2, 1),
                          "xi": xi.reshape(n_samples, T, P).transpose(0, 2, 1)})
    sens = None
    if with_sensitivities:
        # same noise draws, unweighted population averages
        a_phixi, a_gchi = _sens_core(cfg, act, Ch_f, Cg_f, Delta, w, chi, xi,
                                     Ws=n_samples, gate_weight=False)
        sens = {"dphi_dxi": _acc_to_kernel(a_phixi, P, T),
                "dg1_dchi": _acc_to_kernel(a_gchi, P, T)}
    return pop, TwoTime(phi1), TwoTime(psi), sens


class TwoTime:
    """Minimal two-time kernel wrapper (values only)."""

    def __init__(self, values):
        self.values = values


def sample_expert_site(kernels, n_samples: int, seed: int,
                       cfg: DmftConfig) -> SitePopulation:
    """Sample the expert-site population under the given kernels and Delta."""
    cfg = replace(cfg, M_exp=n_samples, seed=seed, responses=False,
                  M_sens_exp=min(cfg.M_sens_exp, n_samples))
    cfg.validate()
    act = make_activation(cfg.phi, cfg.sigma)
    state = _zero_state(cfg)
    state.C_h, state.C_g, state.Delta = kernels.C_h, kernels.C_g, kernels.Delta
    out = _expert_pass(cfg, act, state, collect_pop=True)
    pop = out["pop"]
    return SitePopulation("expert", n_samples,
                          {"b0": pop["b0"], "p": pop["p"], "A": pop["A"],
                           "b": pop["b"], "w": pop["w"], "active": pop["active"],
                           "q_star": out["q_star"], "loads": out["loads"]})
