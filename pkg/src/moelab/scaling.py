"""Size-dependent parameterizations, sweep orchestration, and the empirical
rate fits that probe concentration and loss-curve collapse.

Two built-in schemes:

``mf-flow``: the gradient-flow mean-field scheme for this trainer. Init stds
are unit except the expert down-projection (alpha_ffn^{-1/2}, alpha_ffn =
Ne/N) and the router (zero, with b ~ N(0,1)); learning rates carry the
compensating size factors

    eta0 = g0*N, eta3 = g0*N, eta1 = g0*E*Ne, eta2 = g0*E*N,
    eta_r = g0*E*N^(2*gamma-1), eta_b = g0*E,

under which the per-step field updates stay order one and the trajectory
converges to a size-free limit (the one the ``meanfield`` solver integrates,
with every effective rate equal to g0). The expert blocks scale like
eta*E*Ne-type gradient-flow multipliers; the down-block picks up the extra
1/alpha_ffn relative to the up-block, mirroring the published Adam table.

``adam-table``: the literal per-entry Adam exponents of that table (router LR
N^-1, expert up N^-1, expert down N^-1 alpha^-1, bias 1; inits N^-gamma,
N^-1/2, N^-1/2 alpha^-1, 0) translated to this package's normalized forward
conventions for the stds. Provided for reference/comparison; it does not
produce collapsing gradient-flow trajectories.

``fanin-baseline``: mf-flow with the expert-down init std reset to the fan-in
value (unit std in our normalized convention, i.e. missing the alpha^{-1/2}),
the ablation baseline that breaks scale invariance across alpha_ffn.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .model import Dataset, InitScheme, ModelDims, make_probe_dataset
from .dynamics import LearningRates, TrainConfig, Trace, run_trajectory
from .recordio import stream


# --------------------------------------------------------------------------
# parameterizations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockRule:
    """std = std0 * N^std_n * alpha^std_a; lr = lr0 * N^lr_n * E^lr_e * alpha^lr_a."""

    std0: float = 1.0
    std_n: float = 0.0
    std_a: float = 0.0
    lr0: float = 1.0
    lr_n: float = 0.0
    lr_e: float = 0.0
    lr_a: float = 0.0


@dataclass(frozen=True)
class Parameterization:
    name: str
    gamma: float
    blocks: dict = dc_field(default_factory=dict)  # block -> BlockRule


def get_parameterization(name: str, gamma: float = 1.0) -> Parameterization:
    if name == "mf-flow":
        blocks = {
            "W0": BlockRule(lr_n=1.0),
            "w3": BlockRule(lr_n=1.0),
            "W1": BlockRule(lr_n=1.0, lr_e=1.0, lr_a=1.0),        # E*Ne = E*alpha*N
            "W2": BlockRule(std_a=-0.5, lr_n=1.0, lr_e=1.0),
            "r": BlockRule(std0=0.0, lr_n=2.0 * gamma - 1.0, lr_e=1.0),
            "b": BlockRule(lr_e=1.0),
        }
    elif name == "fanin-baseline":
        base = get_parameterization("mf-flow", gamma).blocks
        blocks = dict(base)
        blocks["W2"] = replace(base["W2"], std_a=0.0)
    elif name == "adam-table":
        # literal table exponents; stds converted to the normalized forward
        # (the raw-convention std times the sqrt(fan-in) the forward divides out)
        blocks = {
            "W0": BlockRule(),
            "w3": BlockRule(),
            "W1": BlockRule(lr_n=-1.0),
            "W2": BlockRule(std_a=-0.5, lr_n=-1.0, lr_a=-1.0),
            "r": BlockRule(std0=0.0, lr_n=-1.0),
            "b": BlockRule(std0=0.0),
        }
    else:
        raise ConfigurationError(f"unknown parameterization scheme '{name}'")
    return Parameterization(name=name, gamma=gamma, blocks=blocks)


def apply_parameterization(base: LearningRates, dims: ModelDims,
                           paramzn: Parameterization) -> tuple[InitScheme, LearningRates]:
    """Concrete per-block init stds and learning rates at the given sizes.

    ``base`` carries the size-free multipliers (gamma0 scales every rate)."""
    N, E = float(dims.N), float(dims.E)
    alpha = dims.Ne / dims.N

    def std(block):
        r = paramzn.blocks[block]
        return r.std0 * N ** r.std_n * alpha ** r.std_a

    def lr(block, eta):
        r = paramzn.blocks[block]
        return eta * base.gamma0 * r.lr0 * N ** r.lr_n * E ** r.lr_e * alpha ** r.lr_a

    scheme = InitScheme(std_W0=std("W0"), std_W1=std("W1"), std_W2=std("W2"),
                        std_w3=std("w3"), std_r=std("r"), std_b=1.0,
                        name=paramzn.name)
    lrs = LearningRates(eta0=lr("W0", base.eta0), eta1=lr("W1", base.eta1),
                        eta2=lr("W2", base.eta2), eta3=lr("w3", base.eta3),
                        eta_r=lr("r", base.eta_r), eta_b=lr("b", base.eta_b),
                        gamma0=base.gamma0)
    return scheme, lrs


def classify_limit(dims_sequence: list[ModelDims], L: int = 1,
                   slope_tol: float = 0.2) -> tuple[str, float]:
    """Regime of alpha* = lim N/(L*E*Ne) along a size sequence.

    Fits the log-log slope of the ratio against N: decisively negative means
    ODE (alpha* = 0), near zero means SDE at the terminal ratio, decisively
    positive means unstable. Scale-invariant: multiplying every dimension by
    a common constant shifts all ratios by the same factor, leaving the slope
    (hence the regime) unchanged.
    """
    if len(dims_sequence) < 2:
        raise ConfigurationError("classify_limit needs at least two sizes")
    ratios = np.array([d.N / (L * d.E * d.Ne) for d in dims_sequence], dtype=float)
    ns = np.array([d.N for d in dims_sequence], dtype=float)
    slope = np.polyfit(np.log(ns), np.log(ratios), 1)[0]
    if slope < -slope_tol:
        return "ODE", 0.0
    if slope > slope_tol:
        return "unstable", np.inf
    return "SDE", float(ratios[-1])


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPlan:
    """Size/seed grid around a base configuration.

    scale_factors multiply the dimensions named in dims_scaled (N, E, Ne in
    any combination); every (factor, seed) cell runs independently on its own
    derived stream.
    """

    base: TrainConfig
    scale_factors: tuple = (1, 2)
    dims_scaled: tuple = ("N", "E", "Ne")
    seeds: int = 2
    scheme: str = "mf-flow"
    master_seed: int = 0

    def validate(self) -> "SweepPlan":
        if len(self.scale_factors) < 2 or self.seeds < 2:
            raise ConfigurationError(
                "sweep needs at least 2 sizes and 2 seeds per cell")
        return self

    def cell_dims(self, factor) -> ModelDims:
        d = self.base.dims
        kw = {}
        for name in self.dims_scaled:
            kw[name] = int(round(getattr(d, name) * factor))
        return replace(d, **kw)


@dataclass
class CellResult:
    factor: float
    seed: int
    dims: ModelDims
    loss_curve: np.ndarray | None
    observables: dict
    diverged: bool = False
    diverged_step: int | None = None


@dataclass
class SweepReport:
    plan: SweepPlan
    cells: list


def _final_observables(trace: Trace) -> dict:
    """Scalar concentration probes read off the final step: the (0,0) entry of
    the order-one kernels Gtilde and M_A-tilde, plus the final loss."""
    fs = trace.final_fields
    dims = trace.config.dims
    act = trace.config.activations()
    gt = fs.gtilde
    Gt_final = gt @ gt.T / dims.N                      # (P, P) equal-time slice
    seff = fs.active * act.dsigma(fs.p)
    ma_final = np.mean(dims.N * fs.A * seff, axis=0)   # (P,)
    return {"gtilde00": float(Gt_final[0, 0]),
            "gtilde_mean": float(Gt_final.mean()),
            "ma0": float(ma_final[0]),
            "ma_mean": float(ma_final.mean()),
            "final_loss": float(trace.losses[-1]),
            "S_final": np.concatenate(
                [fs.h0.T, fs.h3.T, trace.final_params.w3[:, None]], axis=1)}


def run_cell(plan: SweepPlan, factor, seed_index: int) -> CellResult:
    """One (size, seed) trajectory with the parameterization applied."""
    dims = plan.cell_dims(factor)
    paramzn = get_parameterization(plan.scheme, dims.gamma)
    scheme, lrs = apply_parameterization(plan.base.lrs, dims, paramzn)
    cell_seed = int(stream(plan.master_seed,
                           f"sweep/{factor}/{seed_index}").integers(0, 2 ** 62))
    cfg = replace(plan.base, dims=dims, scheme=scheme, lrs=lrs,
                  seed=cell_seed, retention="light")
    data = make_probe_dataset(P=dims.P, D=dims.D, seed=plan.master_seed)
    try:
        trace = run_trajectory(cfg, data)
    except DivergenceError as err:
        return CellResult(factor, seed_index, dims, None, {},
                          diverged=True, diverged_step=err.step)
    return CellResult(factor, seed_index, dims, trace.losses.copy(),
                      _final_observables(trace))


def run_sweep(plan: SweepPlan, threads: int = 0) -> SweepReport:
    """All cells, deterministically seeded per (factor, seed); cell divergence
    is recorded, not fatal. Results are ordered by (factor, seed) regardless
    of scheduling."""
    plan.validate()
    jobs = [(f, s) for f in plan.scale_factors for s in range(plan.seeds)]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(lambda fs: run_cell(plan, *fs), jobs))
    else:
        cells = [run_cell(plan, f, s) for f, s in jobs]
    return SweepReport(plan=plan, cells=cells)


# --------------------------------------------------------------------------
# fits
# --------------------------------------------------------------------------

@dataclass
class RateFit:
    observable: str
    slope: float
    intercept: float
    r2: float
    sizes: np.ndarray
    values: np.ndarray


def fit_loglog(sizes, values, observable: str = "") -> RateFit:
    sizes = np.asarray(sizes, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(sizes) < 3:
        raise ConfigurationError("rate fits need at least 3 sizes")
    x, y = np.log(sizes), np.log(values)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(observable, float(slope), float(intercept), r2, sizes, values)


def concentration_fit(report: SweepReport, observable: str) -> RateFit:
    """Across-seed standard deviation of a scalar observable per size, fitted
    as a log-log slope against the size factor.

    The dispersion is a proxy for the mean deviation from the (unavailable)
    limit; only the decay slope is asserted downstream, never the constant.
    """
    sizes, stds = [], []
    for factor in report.plan.scale_factors:
        vals = [c.observables[observable] for c in report.cells
                if c.factor == factor and not c.diverged]
        if len(vals) < 4:
            raise ConfigurationError(
                f"concentration fit needs >= 4 surviving seeds per size, "
                f"got {len(vals)} at factor {factor}")
        sizes.append(factor)
        stds.append(np.std(np.asarray(vals), ddof=1))
    return fit_loglog(sizes, stds, observable)


def collapse_metric(base_curve: np.ndarray, scaled_curve: np.ndarray,
                    horizon: int, eps: float = 1e-8) -> float:
    """max over steps <= horizon of |L_scaled - L_base| / max(|L_base|, eps)."""
    nb = min(len(base_curve), len(scaled_curve), horizon + 1)
    b = np.asarray(base_curve[:nb], dtype=float)
    s = np.asarray(scaled_curve[:nb], dtype=float)
    return float(np.max(np.abs(s - b) / np.maximum(np.abs(b), eps)))


def lr_argmin_probe(plan_cfg: TrainConfig, data: Dataset, factor: float,
                    scheme: str, grid_center: float = 1.0, n_grid: int = 7,
                    seed: int = 0) -> int:
    """Index of the best base-rate multiplier on a half-decade log grid,
    measured by final loss at the given size factor."""
    mults = grid_center * 10.0 ** (0.5 * (np.arange(n_grid) - n_grid // 2))
    finals = []
    for mult in mults:
        dims = replace(plan_cfg.dims,
                       N=int(plan_cfg.dims.N * factor),
                       E=int(plan_cfg.dims.E * factor),
                       Ne=int(plan_cfg.dims.Ne * factor))
        base = replace(plan_cfg.lrs, gamma0=plan_cfg.lrs.gamma0 * mult)
        init, lrs = apply_parameterization(base, dims, get_parameterization(scheme, dims.gamma))
        cfg = replace(plan_cfg, dims=dims, scheme=init, lrs=lrs,
                      seed=seed, retention="light")
        try:
            trace = run_trajectory(cfg, data)
            finals.append(trace.losses[-1])
        except DivergenceError:
            finals.append(np.inf)
    return int(np.argmin(finals))


SWEEP_HEADER = ["factor", "seed", "N", "E", "Ne", "diverged", "step", "loss"]


def sweep_rows(report: SweepReport):
    rows = []
    for c in report.cells:
        if c.diverged:
            rows.append([c.factor, c.seed, c.dims.N, c.dims.E, c.dims.Ne,
                         1, c.diverged_step, ""])
        else:
            for n, L in enumerate(c.loss_curve):
                rows.append([c.factor, c.seed, c.dims.N, c.dims.E, c.dims.Ne,
                             0, n, L])
    return rows


FIT_HEADER = ["observable", "slope", "intercept", "r2", "n_sizes"]


def fit_rows(fits: list[RateFit]):
    return [[f.observable, f.slope, f.intercept, f.r2, len(f.sizes)] for f in fits]
