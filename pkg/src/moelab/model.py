"""Model definition: dimensions, dataset, activations, parameters, and the
exact forward/backward field maps of the single-block MoE residual network.

Conventions (all arrays are float64):
    x        (P, D)   inputs, rows x_mu
    h0       (P, N)   embedding stream,   h0 = x W0^T / sqrt(D)
    u        (E, P, Ne) expert preactivations, u_k = W1_k h0 / sqrt(N)
    m        (E, P, N)  expert outputs,      m_k = W2_k phi(u_k) / sqrt(Ne)
    p        (E, P)   router logits,        p_k = N^{-gamma} <r_k, h0>
    w        (E, P)   gate values (soft: sigma(p)+b; top-K: masked sigma(p))
    h3       (P, N)   residual stream,      h3 = h0 + mean_k w_k m_k
    f        (P,)     readout,              f = <w3, phi(h3)> / N
    g        (P, N)   backprop feature,     g = w3 * phi'(h3) / N
    gtilde   (P, N)   N * g (order-one normalization used by kernels/meanfield)
    z        (E, P, Ne) expert pregradient, z_k = W2_k^T g / sqrt(Ne)
    delta    (E, P, Ne) z * phi'(u)
    A        (E, P)   alignment,            A_k = <g, m_k> / N
    q        (P, N)   backprop to h0 (router + MLP paths included)

The gate derivative is masked in top-K mode (active set treated as no-grad),
so every formula below uses the effective derivative ``seff = mask * sigma'(p)``
and, in top-K mode, ``dw/db = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericOverflowError, StateError

PARAM_BLOCKS = ("W0", "W1", "W2", "w3", "r", "b")


# --------------------------------------------------------------------------
# dimensions and data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelDims:
    """All integer scale parameters plus the router exponent and sparsity."""

    D: int
    N: int
    E: int
    Ne: int
    P: int
    gamma: float = 1.0
    kappa: float = 1.0
    steps: int = 0
    dt: float = 1.0

    def validate(self, topk: bool = False) -> "ModelDims":
        for name in ("D", "N", "E", "Ne", "P"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigurationError(f"dims.{name} must be an integer >= 1, got {v!r}")
        if self.steps < 0:
            raise ConfigurationError(f"dims.steps must be >= 0, got {self.steps}")
        if not (self.dt > 0):
            raise ConfigurationError(f"dims.dt must be > 0, got {self.dt}")
        if not (0 < self.kappa <= 1):
            raise ConfigurationError(f"dims.kappa must lie in (0, 1], got {self.kappa}")
        if self.gamma < 0:
            raise ConfigurationError(f"dims.gamma must be >= 0, got {self.gamma}")
        if topk:
            ka = self.kappa * self.E
            if abs(ka - round(ka)) > 1e-9 or round(ka) < 1:
                raise ConfigurationError(
                    f"top-K gating needs kappa*E to be a positive integer, got {ka}"
                )
        return self

    @property
    def n_active(self) -> int:
        return int(round(self.kappa * self.E))


@dataclass(frozen=True)
class Dataset:
    """Fixed dataset with precomputed input Gram matrix Kx[mu,nu] = <x_mu, x_nu>."""

    x: np.ndarray  # (P, D)
    y: np.ndarray  # (P,)
    Kx: np.ndarray = field(default=None)  # (P, P)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.Kx is None:
            object.__setattr__(self, "Kx", x @ x.T)

    @property
    def P(self) -> int:
        return self.x.shape[0]


def make_probe_dataset(P: int = 4, D: int = 8, seed: int = 0,
                       teacher: str = "poly2", normalize: bool = True) -> Dataset:
    """Default probe task: P random unit inputs with a degree-2 polynomial teacher."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((P, D))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    if teacher == "poly2":
        v = rng.standard_normal(D)
        v /= np.linalg.norm(v)
        u = rng.standard_normal(D)
        u /= np.linalg.norm(u)
        y = (x @ v) ** 2 + x @ u
    elif teacher == "linear":
        v = rng.standard_normal(D)
        v /= np.linalg.norm(v)
        y = x @ v
    else:
        raise ConfigurationError(f"unknown teacher '{teacher}'")
    if normalize:
        y = y / np.max(np.abs(y))
    return Dataset(x=x, y=y)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Activations:
    """Pointwise activation phi and routing nonlinearity sigma with derivatives.

    Second derivatives are needed only by the mean-field response (pathwise
    sensitivity) accumulation; user hooks without d2 can still train.
    """

    phi: Callable[[np.ndarray], np.ndarray]
    dphi: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    dsigma: Callable[[np.ndarray], np.ndarray]
    d2phi: Callable[[np.ndarray], np.ndarray] | None = None
    phi_name: str = "custom"
    sigma_name: str = "custom"


def _tanh_d(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_d(x):
    from scipy.special import erf
    Phi = 0.5 * (1.0 + erf(x / _SQRT2))
    return Phi + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _gelu_d2(x):
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return pdf * (2.0 - x * x)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


_ACTIVATION_TABLE = {
    "identity": (np.positive, np.ones_like, np.zeros_like),
    "tanh": (np.tanh, _tanh_d, _tanh_d2),
    "gelu": (_gelu, _gelu_d, _gelu_d2),
    "relu-smooth": (_softplus, _sigmoid, _softplus_d2),
}


def make_activation(phi: str = "tanh", sigma: str = "tanh",
                    hooks: dict | None = None) -> Activations:
    """Build an Activations pair from registry names or user hooks.

    ``hooks`` may supply {'phi': fn, 'dphi': fn, ...} overriding either slot;
    supplied derivatives are checked against central finite differences.
    """
    def lookup(name, kind):
        if name not in _ACTIVATION_TABLE:
            raise ConfigurationError(f"unknown {kind} activation '{name}'")
        return _ACTIVATION_TABLE[name]

    pf, pd, pdd = lookup(phi, "phi")
    sf, sd, _ = lookup(sigma, "sigma")
    if hooks:
        pf = hooks.get("phi", pf)
        pd = hooks.get("dphi", pd)
        pdd = hooks.get("d2phi", pdd if "phi" not in hooks else None)
        sf = hooks.get("sigma", sf)
        sd = hooks.get("dsigma", sd)
        verify_derivative(pf, pd)
        verify_derivative(sf, sd)
    act = Activations(phi=pf, dphi=pd, sigma=sf, dsigma=sd, d2phi=pdd,
                      phi_name=phi if not (hooks and "phi" in hooks) else "custom",
                      sigma_name=sigma if not (hooks and "sigma" in hooks) else "custom")
    return act


def verify_derivative(f, df, grid: np.ndarray | None = None, rtol: float = 1e-6) -> None:
    """Check df against a central difference of f on a probe grid."""
    if grid is None:
        grid = np.linspace(-3.0, 3.0, 41)
    h = 1e-6
    fd = (np.asarray(f(grid + h)) - np.asarray(f(grid - h))) / (2 * h)
    an = np.asarray(df(grid))
    scale = np.maximum(np.abs(an), 1.0)
    if np.max(np.abs(fd - an) / scale) > rtol:
        raise ConfigurationError("supplied derivative does not match finite differences")


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class ParamState:
    """All trainable blocks at one instant."""

    W0: np.ndarray   # (N, D)
    W1: np.ndarray   # (E, Ne, N)
    W2: np.ndarray   # (E, N, Ne)
    w3: np.ndarray   # (N,)
    r: np.ndarray    # (E, N)
    b: np.ndarray    # (E,)

    def copy(self) -> "ParamState":
        return ParamState(self.W0.copy(), self.W1.copy(), self.W2.copy(),
                          self.w3.copy(), self.r.copy(), self.b.copy())

    def blocks(self):
        return {"W0": self.W0, "W1": self.W1, "W2": self.W2,
                "w3": self.w3, "r": self.r, "b": self.b}

    def max_abs(self) -> float:
        return max(np.max(np.abs(v)) if v.size else 0.0 for v in self.blocks().values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.blocks().values())


@dataclass(frozen=True)
class InitScheme:
    """Per-block i.i.d. Gaussian standard deviations.

    The mean-field table scheme sets std_W2 = alpha_ffn^{-1/2} and zero router
    weights; see scaling.apply_parameterization for the size-dependent rules.
    """

    std_W0: float = 1.0
    std_W1: float = 1.0
    std_W2: float = 1.0
    std_w3: float = 1.0
    std_r: float = 1.0
    std_b: float = 1.0
    name: str = "unit"

    @staticmethod
    def unit() -> "InitScheme":
        return InitScheme()

    @staticmethod
    def router_zero() -> "InitScheme":
        """Router weights start at zero; gate diversity comes from b ~ N(0,1)."""
        return InitScheme(std_r=0.0, name="router-zero")

    @staticmethod
    def zeros() -> "InitScheme":
        return InitScheme(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, name="zeros")


def init_params(dims: ModelDims, scheme: InitScheme, seed: int) -> ParamState:
    """Draw i.i.d. Gaussian blocks; deterministic in (dims, scheme, seed).

    Each block uses its own named substream so that e.g. changing E does not
    shift the draws of W0.
    """
    dims.validate()
    from .recordio import stream

    def draw(label, shape, std):
        if std == 0.0:
            return np.zeros(shape)
        return std * stream(seed, f"init/{label}").standard_normal(shape)

    return ParamState(
        W0=draw("W0", (dims.N, dims.D), scheme.std_W0),
        W1=draw("W1", (dims.E, dims.Ne, dims.N), scheme.std_W1),
        W2=draw("W2", (dims.E, dims.N, dims.Ne), scheme.std_W2),
        w3=draw("w3", (dims.N,), scheme.std_w3),
        r=draw("r", (dims.E, dims.N), scheme.std_r),
        b=draw("b", (dims.E,), scheme.std_b),
    )


# --------------------------------------------------------------------------
# field state and forward/backward maps
# --------------------------------------------------------------------------

@dataclass
class FieldState:
    """Per-datum forward and backward fields; backward entries are filled by
    :func:`backward`, Delta by :func:`loss_and_delta`."""

    h0: np.ndarray          # (P, N)
    u: np.ndarray           # (E, P, Ne)
    m: np.ndarray           # (E, P, N)
    p: np.ndarray           # (E, P)
    w: np.ndarray           # (E, P)
    active: np.ndarray      # (E, P) float 0/1 mask (all ones in soft mode)
    h3: np.ndarray          # (P, N)
    f: np.ndarray           # (P,)
    g: np.ndarray | None = None        # (P, N)
    gtilde: np.ndarray | None = None   # (P, N)
    z: np.ndarray | None = None        # (E, P, Ne)
    delta: np.ndarray | None = None    # (E, P, Ne)
    A: np.ndarray | None = None        # (E, P)
    q: np.ndarray | None = None        # (P, N)
    Delta: np.ndarray | None = None    # (P,)

    def has_backward(self) -> bool:
        return self.g is not None and self.q is not None


def _check_finite(name: str, arr: np.ndarray, datum_axis: int) -> None:
    if np.all(np.isfinite(arr)):
        return
    bad = ~np.isfinite(arr)
    idx = np.argwhere(bad)[0]
    raise NumericOverflowError(name, int(idx[datum_axis]))


def forward(params: ParamState, data: Dataset, act: Activations,
            gate_mode: str = "soft", kappa: float | None = None,
            gamma: float = 1.0, check: bool = True) -> FieldState:
    """Exact forward pass; gate_mode in {'soft', 'topk'}."""
    from .dynamics import gate as gate_fn  # circular-free: dynamics imports model lazily

    N = params.W0.shape[0]
    h0 = data.x @ params.W0.T / np.sqrt(params.W0.shape[1])            # (P, N)
    u = np.einsum("kan,pn->kpa", params.W1, h0) / np.sqrt(N)           # (E, P, Ne)
    phiu = act.phi(u)
    m = np.einsum("kia,kpa->kpi", params.W2, phiu) / np.sqrt(params.W2.shape[2])
    p = float(N) ** (-gamma) * params.r @ h0.T                         # (E, P)
    w, active = gate_fn(p, params.b, act, gate_mode, kappa)
    h3 = h0 + np.einsum("kp,kpi->pi", w, m) / params.W1.shape[0]
    f = act.phi(h3) @ params.w3 / N
    if check:
        for name, arr, ax in (("h0", h0, 0), ("u", u, 1), ("m", m, 1),
                              ("p", p, 1), ("w", w, 1), ("h3", h3, 0), ("f", f, 0)):
            _check_finite(name, arr, ax)
    return FieldState(h0=h0, u=u, m=m, p=p, w=w, active=active, h3=h3, f=f)


def backward(params: ParamState, data: Dataset, act: Activations,
             fwd: FieldState, gamma: float = 1.0) -> FieldState:
    """Fill g, gtilde, z, delta, A, q on a forward FieldState (in place; also
    returned).

    q uses the top-K no-grad convention: the router path carries the masked
    gate derivative and the MLP path the masked gate value already stored in w.
    """
    if fwd.h3 is None:
        raise StateError("backward called before forward fields are present")
    N = params.W0.shape[0]
    E = params.W1.shape[0]
    g = params.w3[None, :] * act.dphi(fwd.h3) / N                      # (P, N)
    z = np.einsum("kia,pi->kpa", params.W2, g) / np.sqrt(params.W2.shape[2])
    delta = z * act.dphi(fwd.u)
    A = np.einsum("pi,kpi->kp", g, fwd.m) / N
    seff = fwd.active * act.dsigma(fwd.p)                              # (E, P)
    router = float(N) ** (1.0 - gamma) * np.einsum(
        "kp,kn->pn", seff * A, params.r) / E
    mlp = np.einsum("kp,kan,kpa->pn", fwd.w, params.W1, delta) / (E * np.sqrt(N))
    fwd.g = g
    fwd.gtilde = N * g
    fwd.z = z
    fwd.delta = delta
    fwd.A = A
    fwd.q = g + router + mlp
    return fwd


@dataclass(frozen=True)
class LossHook:
    """User loss: value(f, y) per datum and dvalue = d loss / d f."""

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dvalue: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "user"


def loss_and_delta(f: np.ndarray, y: np.ndarray,
                   loss_kind: str | LossHook = "half-mse") -> tuple[float, np.ndarray]:
    """Empirical risk L = mean_mu loss(f_mu, y_mu) and signal Delta = -dloss/df."""
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if isinstance(loss_kind, LossHook):
        L = float(np.mean(loss_kind.value(f, y)))
        Delta = -np.asarray(loss_kind.dvalue(f, y), dtype=np.float64)
    elif loss_kind == "half-mse":
        d = f - y
        L = 0.5 * float(np.mean(d * d))
        Delta = y - f
    else:
        raise ConfigurationError(f"unknown loss kind '{loss_kind}'")
    return L, Delta


def uniform_bound_warning(y: np.ndarray) -> str | None:
    """Diagnostic only: |y| <= 1 is assumed by some a-priori bounds but never
    enforced here."""
    m = float(np.max(np.abs(y)))
    if m > 1.0:
        return f"labels exceed the unit bound assumed by a-priori estimates (max |y| = {m:.3g})"
    return None


def permute_experts(params: ParamState, perm: np.ndarray) -> ParamState:
    """Reindex the expert axis of every per-expert block."""
    return replace_params(params, W1=params.W1[perm], W2=params.W2[perm],
                          r=params.r[perm], b=params.b[perm])


def replace_params(params: ParamState, **kw) -> ParamState:
    new = params.copy()
    for k, v in kw.items():
        setattr(new, k, v)
    return new
