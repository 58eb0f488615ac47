"""Exact per-block gradients, explicit Euler integration of multi-rate
gradient flow, gating modes, and the auxiliary-loss-free bias balancing update.

Update convention: with Delta = -dloss/df, every block evolves as

    theta^{n+1} = theta^n + eta_theta * dt * <Delta_mu grad_theta f_mu>,

where <.> is the 1/P dataset average. GradState stores grad_theta Loss
(= minus the bracket) so that descent reads theta' = theta - eta*dt*grad.

Only explicit Euler is on the checked path: the Volterra identities of the
``volterra`` module hold to roundoff exactly for trajectories produced here.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .model import (
    Activations,
    Dataset,
    FieldState,
    InitScheme,
    LossHook,
    ModelDims,
    ParamState,
    backward,
    forward,
    init_params,
    loss_and_delta,
    make_activation,
    make_probe_dataset,
)

DIVERGENCE_THRESHOLD = 1e12


@dataclass(frozen=True)
class LearningRates:
    """Per-block nonnegative rates (1/time) plus the global output multiplier."""

    eta0: float = 1.0   # W0
    eta1: float = 1.0   # W1 (expert up)
    eta2: float = 1.0   # W2 (expert down)
    eta3: float = 1.0   # w3 (readout)
    eta_r: float = 1.0  # router weights
    eta_b: float = 1.0  # bias (gradient mode)
    gamma0: float = 1.0

    def validate(self) -> "LearningRates":
        for name in ("eta0", "eta1", "eta2", "eta3", "eta_r", "eta_b"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"learning rate {name} must be finite and >= 0")
        return self

    def as_dict(self) -> dict[str, float]:
        return {"W0": self.eta0, "W1": self.eta1, "W2": self.eta2,
                "w3": self.eta3, "r": self.eta_r, "b": self.eta_b}


@dataclass
class GradState:
    """grad_theta Loss per block, shaped like ParamState."""

    W0: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    w3: np.ndarray
    r: np.ndarray
    b: np.ndarray

    def blocks(self):
        return {"W0": self.W0, "W1": self.W1, "W2": self.W2,
                "w3": self.w3, "r": self.r, "b": self.b}


# --------------------------------------------------------------------------
# gating
# --------------------------------------------------------------------------

def gate(p: np.ndarray, b: np.ndarray, act: Activations, mode: str = "soft",
         kappa: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gate values w (E, P) and the active mask.

    soft: w = sigma(p) + b, everything active.
    topk: per datum, the kappa*E experts with largest q = sigma(p) + b are
    active with w = sigma(p) (the bias participates only in selection); ties
    go to the lowest expert index.
    """
    sp = act.sigma(p)
    E = p.shape[0]
    if mode == "soft":
        return sp + b[:, None], np.ones_like(p)
    if mode != "topk":
        raise ConfigurationError(f"unknown gate mode '{mode}'")
    if kappa is None:
        raise ConfigurationError("topk gating needs kappa")
    ka = kappa * E
    K = int(round(ka))
    if abs(ka - K) > 1e-9 or K < 1:
        raise ConfigurationError(f"kappa*E must be a positive integer, got {ka}")
    q = sp + b[:, None]
    # stable argsort on -q: equal values keep ascending expert index
    order = np.argsort(-q, axis=0, kind="stable")
    mask = np.zeros_like(p)
    cols = np.arange(p.shape[1])
    for rank in range(K):
        mask[order[rank], cols] = 1.0
    return mask * sp, mask


def expert_loads(fields: FieldState, mode: str) -> np.ndarray:
    """Load_k in [0,1]: routed fraction (topk) or mean clipped gate (soft)."""
    if mode == "topk":
        return fields.active.mean(axis=1)
    return np.clip(fields.w, 0.0, 1.0).mean(axis=1)


def bias_balance_step(b: np.ndarray, loads: np.ndarray, kappa: float,
                      eta_bias: float, dt: float) -> np.ndarray:
    """Auxiliary-loss-free balancing: b'_k = b_k - eta_bias*dt*(Load_k - kappa)."""
    return b - eta_bias * dt * (np.asarray(loads) - kappa)


# --------------------------------------------------------------------------
# gradients and the Euler step
# --------------------------------------------------------------------------

def grad_blocks(params: ParamState, data: Dataset, act: Activations,
                fields: FieldState, gamma: float = 1.0,
                gate_mode: str = "soft") -> GradState:
    """Analytic gradient of the empirical risk for every block.

    Requires forward+backward fields and Delta. In top-K mode the active set
    is no-grad: the router path uses the masked sigma'(p) and the bias gets no
    gradient (it only enters the selection).
    """
    if not fields.has_backward() or fields.Delta is None:
        raise ConfigurationError("grad_blocks needs backward fields and Delta")
    N, D = params.W0.shape
    E, Ne = params.W1.shape[0], params.W1.shape[1]
    P = data.P
    Delta = fields.Delta

    s_w3 = act.phi(fields.h3).T @ Delta / (N * P)
    dw = Delta[None, :] * fields.w / (E * P)                       # (E, P)
    s_W2 = np.einsum("kp,pi,kpa->kia", dw, fields.g, act.phi(fields.u)) / np.sqrt(Ne)
    s_W1 = np.einsum("kp,kpa,pn->kan", dw, fields.delta, fields.h0) / np.sqrt(N)
    seff = fields.active * act.dsigma(fields.p)
    da = Delta[None, :] * fields.A * seff * (float(N) ** (1.0 - gamma) / (E * P))
    s_r = da @ fields.h0                                           # (E, N)
    if gate_mode == "topk":
        s_b = np.zeros(E)
    else:
        s_b = (Delta[None, :] * fields.A).sum(axis=1) * (N / (E * P))
    s_W0 = fields.q.T @ (Delta[:, None] * data.x) / (np.sqrt(D) * P)

    return GradState(W0=-s_W0, W1=-s_W1, W2=-s_W2, w3=-s_w3, r=-s_r, b=-s_b)


def euler_step(params: ParamState, grads: GradState, lrs: LearningRates,
               dt: float, update_bias: bool = True) -> ParamState:
    """One explicit Euler step theta' = theta - eta*dt*grad (new ParamState)."""
    if not (dt > 0):
        raise ConfigurationError("dt must be > 0")
    new = params.copy()
    new.W0 -= lrs.eta0 * dt * grads.W0
    new.W1 -= lrs.eta1 * dt * grads.W1
    new.W2 -= lrs.eta2 * dt * grads.W2
    new.w3 -= lrs.eta3 * dt * grads.w3
    new.r -= lrs.eta_r * dt * grads.r
    if update_bias:
        new.b -= lrs.eta_b * dt * grads.b
    return new


# --------------------------------------------------------------------------
# trajectory
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Full configuration of one trajectory run."""

    dims: ModelDims
    phi: str = "tanh"
    sigma: str = "tanh"
    scheme: InitScheme = dc_field(default_factory=InitScheme.router_zero)
    lrs: LearningRates = dc_field(default_factory=LearningRates)
    gate_mode: str = "soft"
    loss: str | LossHook = "half-mse"
    bias_mode: str = "grad"          # 'grad' | 'balance'
    eta_bias: float = 1.0            # balancing rate (bias_mode='balance')
    seed: int = 0
    retention: str = "full"          # 'full' | 'grid' | 'light'
    grid: tuple[int, ...] | None = None  # recorded steps for retention='grid'

    def activations(self) -> Activations:
        return make_activation(self.phi, self.sigma)


@dataclass
class Trace:
    """Trajectory record: per-step observables always, snapshots per retention.

    ``params[j]`` / ``fields[j]`` correspond to step ``recorded_steps[j]``;
    with full retention that is every step 0..steps. The initial ParamState is
    kept separately so init-drive terms of the Volterra identities are exact.
    """

    config: TrainConfig
    data: Dataset
    times: np.ndarray
    losses: np.ndarray
    mean_abs_delta: np.ndarray
    param_norms: dict[str, np.ndarray]
    loads: np.ndarray                 # (steps+1, E)
    ch_diag: np.ndarray               # (steps+1, P) equal-time H0[mu,mu]
    initial_params: ParamState
    recorded_steps: list[int]
    params: list[ParamState] | None
    fields: list[FieldState] | None
    final_params: ParamState
    final_fields: FieldState

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def is_full(self) -> bool:
        return (self.params is not None and self.fields is not None
                and self.recorded_steps == list(range(self.steps + 1)))

    def snapshot_index(self, step: int) -> int:
        try:
            return self.recorded_steps.index(step)
        except ValueError:
            raise KeyError(f"step {step} was not recorded") from None


def _evaluate(params: ParamState, data: Dataset, act: Activations,
              cfg: TrainConfig) -> tuple[FieldState, float]:
    fs = forward(params, data, act, cfg.gate_mode, cfg.dims.kappa, cfg.dims.gamma)
    L, Delta = loss_and_delta(fs.f, data.y, cfg.loss)
    fs.Delta = Delta
    backward(params, data, act, fs, cfg.dims.gamma)
    return fs, L


def run_trajectory(cfg: TrainConfig, data: Dataset | None = None) -> Trace:
    """Run steps Euler updates from the configured init; deterministic in cfg.

    Raises DivergenceError (carrying the partial trace) if any parameter or
    field magnitude exceeds 1e12.
    """
    dims = cfg.dims.validate(topk=cfg.gate_mode == "topk")
    cfg.lrs.validate()
    if cfg.bias_mode not in ("grad", "balance"):
        raise ConfigurationError(f"unknown bias mode '{cfg.bias_mode}'")
    act = cfg.activations()
    if data is None:
        data = make_probe_dataset(P=dims.P, D=dims.D, seed=cfg.seed)
    if data.P != dims.P or data.x.shape[1] != dims.D:
        raise ConfigurationError("dataset shape does not match dims")

    params0 = init_params(dims, cfg.scheme, cfg.seed)
    steps = dims.steps
    if cfg.retention == "full":
        record = set(range(steps + 1))
    elif cfg.retention == "grid":
        record = set(cfg.grid if cfg.grid is not None else default_time_grid(steps))
    elif cfg.retention == "light":
        record = set()
    else:
        raise ConfigurationError(f"unknown retention '{cfg.retention}'")

    times = dims.dt * np.arange(steps + 1)
    losses = np.empty(steps + 1)
    madelta = np.empty(steps + 1)
    loads = np.empty((steps + 1, dims.E))
    ch_diag = np.empty((steps + 1, dims.P))
    norms = {k: np.empty(steps + 1) for k in ("W0", "W1", "W2", "w3", "r", "b")}
    kept_params: list[ParamState] = []
    kept_fields: list[FieldState] = []
    recorded: list[int] = []

    params = params0.copy()
    fields = None
    for n in range(steps + 1):
        fields, losses[n] = _evaluate(params, data, act, cfg)
        if max(np.max(np.abs(fields.h3)), np.max(np.abs(fields.f))) > DIVERGENCE_THRESHOLD:
            partial = Trace(cfg, data, times[:n], losses[:n], madelta[:n],
                            {k: v[:n] for k, v in norms.items()}, loads[:n],
                            ch_diag[:n], params0, recorded, kept_params or None,
                            kept_fields or None, params, fields)
            raise DivergenceError(n, "field magnitude over threshold", partial)
        madelta[n] = np.mean(np.abs(fields.Delta))
        loads[n] = expert_loads(fields, cfg.gate_mode)
        ch_diag[n] = np.sum(fields.h0 * fields.h0, axis=1) / dims.N
        for k, v in params.blocks().items():
            norms[k][n] = np.linalg.norm(v)
        if n in record:
            kept_params.append(params.copy())
            kept_fields.append(fields)
            recorded.append(n)
        if n == steps:
            break
        grads = grad_blocks(params, data, act, fields, dims.gamma, cfg.gate_mode)
        params = euler_step(params, grads, cfg.lrs, dims.dt,
                            update_bias=cfg.bias_mode == "grad")
        if cfg.bias_mode == "balance":
            params.b = bias_balance_step(params.b, loads[n], dims.kappa,
                                         cfg.eta_bias, dims.dt)
        if not params.all_finite() or params.max_abs() > DIVERGENCE_THRESHOLD:
            partial = Trace(cfg, data, times[: n + 1], losses[: n + 1],
                            madelta[: n + 1], {k: v[: n + 1] for k, v in norms.items()},
                            loads[: n + 1], ch_diag[: n + 1], params0, recorded,
                            kept_params or None, kept_fields or None, params, fields)
            raise DivergenceError(n + 1, "parameter magnitude over threshold", partial)

    return Trace(cfg, data, times, losses, madelta, norms, loads, ch_diag, params0,
                 recorded, kept_params or None, kept_fields or None,
                 params, fields)


def default_time_grid(steps: int, dense_until: int = 64) -> list[int]:
    """Every step up to ``dense_until``, then dyadically thinned; always
    includes the final step."""
    if steps <= dense_until:
        return list(range(steps + 1))
    grid = list(range(dense_until + 1))
    stride = 2
    nxt = dense_until + stride
    while nxt < steps:
        grid.append(nxt)
        if len(grid) % 32 == 0:
            stride *= 2
        nxt += stride
    grid.append(steps)
    return sorted(set(grid))


def trace_step_rows(trace: Trace) -> Iterable[list]:
    """Rows of the line-delimited step log (one step per line)."""
    for n in range(trace.steps + 1):
        row = [n, trace.times[n], trace.losses[n], trace.mean_abs_delta[n]]
        row += [trace.param_norms[k][n] for k in ("W0", "W1", "W2", "w3", "r", "b")]
        yield row


TRACE_STEP_HEADER = ["step", "time", "loss", "mean_abs_delta",
                     "norm_W0", "norm_W1", "norm_W2", "norm_w3", "norm_r", "norm_b"]
