"""Machine checks of the discrete telescoping and Volterra identities that an
Euler-trained trajectory satisfies exactly (up to roundoff).

Telescoping: theta^n = theta^0 + dt * sum_{m<n} G^m, with G^m the update
signal recomputed from the step-m snapshot. Field identities: each of
(h0, u, m, p, f) equals an init-drive term (linear in the retained initial
parameters) plus a history sum through Gram kernels; the Gram kernels couple
the source time m to the target time n, so each target step resums its own
history. Everything is recomputed from snapshots, never taken from the
``kernels`` module caches, so a failure isolates integrator bugs from kernel
bugs. History sums use compensated (Kahan) accumulation.

The instantaneous z/delta/q constraints are algebraic consequences of the
step-n snapshot alone and are enforced by the model backward post-conditions;
this module owns only the history-integrated identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ConfigurationError
from .dynamics import Trace, expert_loads, grad_blocks

TELESCOPING_BLOCKS = ("W0", "w3", "W1", "W2", "r", "b")
VOLTERRA_FIELDS = ("h0", "u", "m", "p", "f")


@dataclass
class ResidualReport:
    identity: str
    max_abs: float
    max_rel: float
    where: tuple      # (step, entry indices...) of the worst residual
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tolerance


def default_tolerance(steps: int, base: float = 1e-10) -> float:
    """Absolute per-step roundoff budget scaled by sqrt(steps) accumulation."""
    return base * np.sqrt(max(steps, 1))


class _Kahan:
    """Vectorized compensated accumulator."""

    def __init__(self, shape):
        self.s = np.zeros(shape)
        self.c = np.zeros(shape)

    def add(self, x):
        y = x - self.c
        t = self.s + y
        self.c = (t - self.s) - y
        self.s = t

    @property
    def total(self):
        return self.s


def _require_full(trace: Trace) -> None:
    if not trace.is_full():
        raise CapabilityError("Volterra checks need a trace with full snapshots")


class _Worst:
    def __init__(self, identity: str, tol: float):
        self.rep = ResidualReport(identity, 0.0, 0.0, (0,), tol)

    def update(self, residual: np.ndarray, reference: np.ndarray, step: int):
        absres = np.abs(residual)
        idx = np.unravel_index(np.argmax(absres), absres.shape)
        max_abs = float(absres[idx])
        if max_abs >= self.rep.max_abs:
            ref = float(np.max(np.abs(reference))) + 1e-300
            self.rep = ResidualReport(self.rep.identity, max_abs, max_abs / ref,
                                      (step,) + tuple(int(i) for i in idx),
                                      self.rep.tolerance)


def check_telescoping(trace: Trace, block: str,
                      tolerance: float | None = None) -> ResidualReport:
    """Residual of theta^n - theta^0 - dt*sum_{m<n} G^m for one block; the max
    over n is reported. Block 'b' follows the configured bias mode (gradient
    flow or balancing update)."""
    _require_full(trace)
    if block not in TELESCOPING_BLOCKS:
        raise ConfigurationError(f"unknown parameter block '{block}'")
    cfg = trace.config
    dims = cfg.dims
    act = cfg.activations()
    tol = tolerance if tolerance is not None else default_tolerance(trace.steps)
    eta = cfg.lrs.as_dict()[block]

    theta0 = trace.initial_params.blocks()[block]
    acc = _Kahan(theta0.shape)
    worst = _Worst(f"telescope:{block}", tol)
    for n in range(trace.steps + 1):
        theta_n = trace.params[n].blocks()[block]
        worst.update(theta_n - theta0 - acc.total, theta_n, n)
        if n == trace.steps:
            break
        fields = trace.fields[n]
        if block == "b" and cfg.bias_mode == "balance":
            incr = -cfg.eta_bias * (expert_loads(fields, cfg.gate_mode) - dims.kappa)
        else:
            grads = grad_blocks(trace.params[n], trace.data, act, fields,
                                dims.gamma, cfg.gate_mode)
            incr = -eta * grads.blocks()[block]
        acc.add(dims.dt * incr)
    return worst.rep


def check_volterra_field(trace: Trace, field: str,
                         tolerance: float | None = None) -> ResidualReport:
    """Residual of the boxed history identity for one of {h0, u, m, p, f}.

    At n = 0 the history sum is empty, so the residual is the pure
    init-consistency defect (zero for any run)."""
    _require_full(trace)
    if field not in VOLTERRA_FIELDS:
        raise ConfigurationError(f"unknown Volterra field '{field}'")
    cfg = trace.config
    dims = cfg.dims
    act = cfg.activations()
    lrs = cfg.lrs
    tol = tolerance if tolerance is not None else default_tolerance(trace.steps)
    dt, P, N, E, Ne, D = dims.dt, dims.P, dims.N, dims.E, dims.Ne, dims.D
    p0 = trace.initial_params
    data = trace.data
    worst = _Worst(f"volterra:{field}", tol)

    if field == "h0":
        # Fixed input Gram: the history term can be accumulated once.
        init = data.x @ p0.W0.T / np.sqrt(D)                  # (P, N)
        acc = _Kahan((P, N))
        for n in range(trace.steps + 1):
            fs = trace.fields[n]
            worst.update(fs.h0 - init - acc.total, fs.h0, n)
            if n == trace.steps:
                break
            hist = data.Kx.T @ (fs.Delta[:, None] * fs.q) / (D * P)
            acc.add(dt * lrs.eta0 * hist)
        return worst.rep

    # The remaining identities couple source time m to target time n through
    # trajectory Gram kernels, so each n resums its own history.
    for n in range(trace.steps + 1):
        fn = trace.fields[n]
        if field == "u":
            init = np.einsum("kan,pn->kpa", p0.W1, fn.h0) / np.sqrt(N)
            acc = _Kahan(init.shape)
            target = fn.u
        elif field == "m":
            init = np.einsum("kia,kpa->kpi", p0.W2, act.phi(fn.u)) / np.sqrt(Ne)
            acc = _Kahan(init.shape)
            target = fn.m
        elif field == "p":
            init = float(N) ** (-dims.gamma) * p0.r @ fn.h0.T
            acc = _Kahan(init.shape)
            target = fn.p
        else:  # f
            init = act.phi(fn.h3) @ p0.w3 / N
            acc = _Kahan(init.shape)
            target = fn.f

        for m in range(n):
            fm = trace.fields[m]
            if field == "u":
                H0 = fm.h0 @ fn.h0.T / N                      # (P_src, P_tgt)
                coef = fm.Delta[None, :, None] * fm.w[:, :, None] * fm.delta
                acc.add(dt * lrs.eta1 / (E * P) *
                        np.einsum("kpa,pq->kqa", coef, H0))
            elif field == "m":
                Phi1 = np.einsum("kpa,kqa->kpq", act.phi(fm.u), act.phi(fn.u)) / Ne
                coef = fm.Delta[None, :] * fm.w                # (E, P)
                acc.add(dt * lrs.eta2 / (E * P) *
                        np.einsum("kp,kpq,pi->kqi", coef, Phi1, fm.g))
            elif field == "p":
                H0 = fm.h0 @ fn.h0.T / N
                seff = fm.active * act.dsigma(fm.p)
                coef = fm.Delta[None, :] * fm.A * seff
                acc.add(dt * lrs.eta_r * float(N) ** (2.0 - 2.0 * dims.gamma) / (E * P)
                        * coef @ H0)
            else:  # f
                H3 = act.phi(fm.h3) @ act.phi(fn.h3).T / N
                acc.add(dt * lrs.eta3 / (P * N) * fm.Delta @ H3)
        worst.update(target - init - acc.total, target, n)
    return worst.rep


def check_all(trace: Trace, tolerance: float | None = None) -> list[ResidualReport]:
    """All telescoping and all five Volterra field identities."""
    reports = [check_telescoping(trace, b, tolerance) for b in TELESCOPING_BLOCKS]
    reports += [check_volterra_field(trace, f, tolerance) for f in VOLTERRA_FIELDS]
    return reports


REPORT_HEADER = ["identity", "max_abs", "max_rel", "where", "tolerance", "passed"]


def report_rows(reports: list[ResidualReport]) -> list[list]:
    return [[r.identity, r.max_abs, r.max_rel,
             "/".join(str(i) for i in r.where), r.tolerance, int(r.passed)]
            for r in reports]
