"""Three-level particle states, two-time correlation and mixture kernels, and
the bounded-Lipschitz distance estimator.

Normalization notes (both stored where relevant, tags say which):
  * G uses the raw backprop feature g (which carries 1/N), so G = Theta(N^-2);
    Gtilde uses gtilde = N*g and is the order-one object the mean-field
    equations see. Gtilde = N^2 * G entrywise.
  * Mixture kernels over the alignment come in the same two flavours: the raw
    A = <g,m>/N is Theta(1/N); Atilde = N*A is the order-one router signal
    (the same object that multiplies r_k in the backprop field q). MA/MAA are
    computed with Atilde by default; pass atilde=False for the raw ones.
  * In top-K traces the gate derivative entering MA/MAA is the masked
    sigma'(p) (no-grad active sets), matching the gradients actually applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ConfigurationError
from .dynamics import Trace


# --------------------------------------------------------------------------
# particle states
# --------------------------------------------------------------------------

@dataclass
class LevelStates:
    """Per-step particle records of the three populations.

    S[t] has shape (N, 2P+1): rows ((h0_{mu,i})_mu, (h3_{mu,i})_mu, w3_i).
    X[t] has shape (E, P+1): rows (b_k, (p_{k,mu})_mu).
    Y[t] has shape (E, Ne, 2P): records ((u_{k,mu,a})_mu, (z_{k,mu,a})_mu).
    """

    steps: list[int]
    S: list[np.ndarray]
    X: list[np.ndarray]
    Y: list[np.ndarray]


def extract_states(trace: Trace) -> LevelStates:
    """Exact coordinate projections of the recorded snapshots; no aggregation."""
    _require_snapshots(trace)
    S, X, Y = [], [], []
    for params, fields in zip(trace.params, trace.fields):
        if fields.z is None:
            raise CapabilityError("trace snapshots lack backward fields")
        S.append(np.concatenate(
            [fields.h0.T, fields.h3.T, params.w3[:, None]], axis=1))
        X.append(np.concatenate([params.b[:, None], fields.p], axis=1))
        Y.append(np.concatenate(
            [fields.u.transpose(0, 2, 1), fields.z.transpose(0, 2, 1)], axis=2))
    return LevelStates(steps=list(trace.recorded_steps), S=S, X=X, Y=Y)


def _require_snapshots(trace: Trace) -> None:
    if trace.params is None or trace.fields is None:
        raise CapabilityError(
            "trace was recorded without snapshots (retention 'light')")


# --------------------------------------------------------------------------
# two-time kernels
# --------------------------------------------------------------------------

@dataclass
class TwoTimeKernel:
    """Symmetric array K[mu, nu, n, n'] on the recorded time grid."""

    tag: str
    values: np.ndarray          # (P, P, T, T)
    steps: list[int]

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(
            self.values - self.values.transpose(1, 0, 3, 2))))

    def equal_time_min_eig(self) -> float:
        """Smallest eigenvalue over all equal-time P x P slices."""
        T = self.values.shape[2]
        mins = [np.linalg.eigvalsh(self.values[:, :, t, t]).min() for t in range(T)]
        return float(min(mins))

    def equal_time(self, t_index: int) -> np.ndarray:
        return self.values[:, :, t_index, t_index]


@dataclass
class OneTimeMixture:
    tag: str
    values: np.ndarray          # (P, T)
    steps: list[int]


@dataclass
class GammaFields:
    """The concentrating global-field collection of one run."""

    H0: TwoTimeKernel
    H3: TwoTimeKernel
    G: TwoTimeKernel
    MPhi: TwoTimeKernel
    MA: OneTimeMixture
    MAA: TwoTimeKernel
    Delta: np.ndarray           # (P, T)
    steps: list[int]


def _stack_gram(series: list[np.ndarray], norm: float, tag: str,
                steps: list[int]) -> TwoTimeKernel:
    """K[mu,nu,a,b] = sum_i X[a][mu,i] X[b][nu,i] / norm from stacked (P, N)
    snapshots; the einsum ordering makes the symmetry exact in floating point."""
    H = np.stack(series)                      # (T, P, N)
    K = np.einsum("apn,bqn->pqab", H, H, optimize=True) / norm
    return TwoTimeKernel(tag=tag, values=K, steps=list(steps))


def global_kernels(trace: Trace, use_gtilde: bool = False,
                   act=None) -> tuple[TwoTimeKernel, TwoTimeKernel, TwoTimeKernel]:
    """H0, H3 and G (or Gtilde when flagged) from the recorded snapshots."""
    _require_snapshots(trace)
    act = act or trace.config.activations()
    N = trace.config.dims.N
    steps = trace.recorded_steps
    h0s = [fs.h0 for fs in trace.fields]
    h3s = [act.phi(fs.h3) for fs in trace.fields]
    if use_gtilde:
        gs = [fs.gtilde for fs in trace.fields]
        gtag = "Gtilde"
    else:
        gs = [fs.g for fs in trace.fields]
        gtag = "G"
    if any(g is None for g in gs):
        raise CapabilityError("snapshots lack backward fields")
    return (_stack_gram(h0s, N, "H0", steps),
            _stack_gram(h3s, N, "H3", steps),
            _stack_gram(gs, N, gtag, steps))


def expert_kernels(trace: Trace, k: int, act=None) -> tuple[TwoTimeKernel, TwoTimeKernel]:
    """Within-expert kernels Phi1k (on phi(u_k)) and Psik (on delta_k)."""
    _require_snapshots(trace)
    dims = trace.config.dims
    if not (0 <= k < dims.E):
        raise ConfigurationError(f"expert index {k} out of range (E={dims.E})")
    act = act or trace.config.activations()
    steps = trace.recorded_steps
    phius = [act.phi(fs.u[k]) for fs in trace.fields]
    deltas = [fs.delta[k] for fs in trace.fields]
    if any(d is None for d in deltas):
        raise CapabilityError("snapshots lack backward fields")
    return (_stack_gram(phius, dims.Ne, f"Phi1k{k}", steps),
            _stack_gram(deltas, dims.Ne, f"Psik{k}", steps))


def mixture_kernels(trace: Trace, act=None, atilde: bool = True
                    ) -> tuple[TwoTimeKernel, TwoTimeKernel, OneTimeMixture, TwoTimeKernel]:
    """Gated mixtures MPhi, MPsi (two-time), MA (one-time), MAA (two-time).

    MPhi[mu,nu,n,n'] = mean_k w_k,mu(n) w_k,nu(n') Phi1k[mu,nu,n,n'], etc.
    MA/MAA use Atilde = N*A (see module docstring) unless atilde=False.
    """
    _require_snapshots(trace)
    dims = trace.config.dims
    act = act or trace.config.activations()
    steps = trace.recorded_steps
    T, P, E = len(steps), dims.P, dims.E

    W = np.stack([fs.w for fs in trace.fields])          # (T, E, P)
    phiu = np.stack([act.phi(fs.u) for fs in trace.fields])   # (T, E, P, Ne)
    dls = np.stack([fs.delta for fs in trace.fields])
    scale = dims.N if atilde else 1.0
    As = np.stack([fs.A for fs in trace.fields]) * scale      # (T, E, P)
    Seff = np.stack([fs.active * act.dsigma(fs.p) for fs in trace.fields])

    mphi = np.zeros((P, P, T, T))
    mpsi = np.zeros((P, P, T, T))
    maa = np.zeros((P, P, T, T))
    for k in range(E):
        phik = np.einsum("apc,bqc->pqab", phiu[:, k], phiu[:, k], optimize=True) / dims.Ne
        psik = np.einsum("apc,bqc->pqab", dls[:, k], dls[:, k], optimize=True) / dims.Ne
        wk = W[:, k]                                      # (T, P)
        woutk = np.einsum("ap,bq->pqab", wk, wk)
        mphi += woutk * phik
        mpsi += woutk * psik
        ak = As[:, k] * Seff[:, k]                        # (T, P)
        maa += np.einsum("ap,bq->pqab", ak, ak)
    mphi /= E
    mpsi /= E
    maa /= E
    ma = np.einsum("tkp,tkp->pt", As, Seff) / E           # (P, T)

    tagA = "MA" if atilde else "MAraw"
    tagAA = "MAA" if atilde else "MAAraw"
    return (TwoTimeKernel("MPhi", mphi, list(steps)),
            TwoTimeKernel("MPsi", mpsi, list(steps)),
            OneTimeMixture(tagA, ma, list(steps)),
            TwoTimeKernel(tagAA, maa, list(steps)))


def gamma_fields(trace: Trace, act=None) -> GammaFields:
    """The Gamma collection (H0, H3, G, MPhi, MA, MAA, Delta) for one run.

    G is reported in the Gtilde normalization, matching what the concentration
    acceptance checks use.
    """
    H0, H3, G = global_kernels(trace, use_gtilde=True, act=act)
    MPhi, _, MA, MAA = mixture_kernels(trace, act=act, atilde=True)
    Delta = np.stack([fs.Delta for fs in trace.fields]).T
    return GammaFields(H0, H3, G, MPhi, MA, MAA, Delta, list(trace.recorded_steps))


def kernel_rows(kernels) -> list[list]:
    """Flat tabular rows (tag, mu, nu, n, nprime, value); one-time mixtures use
    nu = -1 and nprime = -1."""
    rows = []
    for K in kernels:
        if isinstance(K, OneTimeMixture):
            P, T = K.values.shape
            for mu in range(P):
                for a in range(T):
                    rows.append([K.tag, mu, -1, K.steps[a], -1, K.values[mu, a]])
        else:
            P = K.values.shape[0]
            T = K.values.shape[2]
            for mu in range(P):
                for nu in range(P):
                    for a in range(T):
                        for b in range(T):
                            rows.append([K.tag, mu, nu, K.steps[a], K.steps[b],
                                         K.values[mu, nu, a, b]])
    return rows


KERNEL_HEADER = ["tag", "mu", "nu", "n", "nprime", "value"]


# --------------------------------------------------------------------------
# bounded-Lipschitz distance
# --------------------------------------------------------------------------

def dbl_estimate(samples_a: np.ndarray, samples_b: np.ndarray,
                 n_test: int = 1000, seed: int = 0) -> float:
    """Randomized dual lower bound on the bounded-Lipschitz distance.

    Test functions psi(s) = clamp(<omega, s> + beta, -1, 1) with ||omega|| = 1
    are 1-Lipschitz and bounded by one, so max_j |mean_A psi_j - mean_B psi_j|
    never exceeds d_BL. Deterministic given the seed.
    """
    from .recordio import stream

    A = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ConfigurationError("sample dimensions differ")
    rng = stream(seed, "dbl")
    d = A.shape[1]
    omega = rng.standard_normal((n_test, d))
    norms = np.linalg.norm(omega, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    omega /= norms
    pa = A @ omega.T                       # (nA, n_test)
    pb = B @ omega.T
    radius = np.maximum(np.abs(pa).max(axis=0), np.abs(pb).max(axis=0)) + 1.0
    beta = (2.0 * rng.random(n_test) - 1.0) * radius
    va = np.clip(pa + beta, -1.0, 1.0).mean(axis=0)
    vb = np.clip(pb + beta, -1.0, 1.0).mean(axis=0)
    return float(np.max(np.abs(va - vb)))


def dbl_exact(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Exact d_BL between two small empirical measures by linear programming.

    Variables are the test-function values at the support points; constraints
    are |psi| <= 1 and the pairwise Lipschitz inequalities. Only meant for
    tiny multisets (the LP has O(n^2) rows).
    """
    from scipy.optimize import linprog

    A = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ConfigurationError("sample dimensions differ")
    pts = np.concatenate([A, B])
    uniq, inv = np.unique(pts.round(12), axis=0, return_inverse=True)
    n = uniq.shape[0]
    massa = np.zeros(n)
    massb = np.zeros(n)
    for j in inv[: len(A)]:
        massa[j] += 1.0 / len(A)
    for j in inv[len(A):]:
        massb[j] += 1.0 / len(B)
    c = massa - massb

    rows, rhs = [], []
    for i in range(n):
        for j in range(i + 1, n):
            dij = float(np.linalg.norm(uniq[i] - uniq[j]))
            row = np.zeros(n)
            row[i], row[j] = 1.0, -1.0
            rows.extend([row, -row])
            rhs.extend([dij, dij])
    res = linprog(-c, A_ub=np.array(rows) if rows else None,
                  b_ub=np.array(rhs) if rhs else None,
                  bounds=[(-1.0, 1.0)] * n, method="highs")
    if not res.success:
        raise RuntimeError(f"d_BL LP failed: {res.message}")
    return float(-res.fun)
