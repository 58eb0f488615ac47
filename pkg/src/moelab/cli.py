"""Command-line interface: config resolution, deterministic seeding, and
bit-stable emission of every artifact.

Verbs: train, verify, dmft, sweep, compare. Exit codes: 0 success, 1 check
failure, 2 configuration error. Any config key can be overridden from the
environment with the MOELAB_ prefix and '__' as the nesting separator, e.g.
MOELAB_dims__N=256.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError, DivergenceError
from .model import Dataset, InitScheme, ModelDims, make_probe_dataset
from .dynamics import (TRACE_STEP_HEADER, LearningRates, Trace, TrainConfig,
                       run_trajectory, trace_step_rows)
from . import kernels as klib
from . import volterra as vlib
from .meanfield import DmftConfig, solve_dmft
from .scaling import (SweepPlan, apply_parameterization, collapse_metric,
                      concentration_fit, fit_rows, FIT_HEADER,
                      get_parameterization, run_sweep, sweep_rows, SWEEP_HEADER)
from .recordio import (load_snapshots, read_table, save_snapshots,
                       set_thread_count, write_json, write_table)

ENV_PREFIX = "MOELAB_"

# schema: section -> key -> default (None means required has no default but
# still typed by the fallback in DEFAULTS)
DEFAULTS: dict = {
    "run": {"out": "runs/out", "master_seed": 0, "threads": 0, "plots": True},
    "dims": {"D": 8, "N": 64, "E": 8, "Ne": 16, "P": 4, "gamma": 1.0,
             "kappa": 0.25, "steps": 50, "dt": 0.05},
    "data": {"kind": "probe", "teacher": "poly2", "seed": None,
             "normalize": True, "path": None},
    "model": {"phi": "tanh", "sigma": "tanh", "loss": "half-mse"},
    "init": {"scheme": "mf-flow", "stds": None},
    "rates": {"scheme": "mf-flow", "gamma0": 1.0, "eta": None},
    "gate": {"mode": "soft"},
    "bias": {"mode": "grad", "eta_bias": 1.0},
    "trace": {"retention": "full", "grid": None, "snapshots": True,
              "states": False},
    "kernels": {"enable": True, "gtilde": True, "atilde": True},
    "dmft": {"M_res": 2048, "M_exp": 1024, "M_within": 32, "M_sens_exp": 128,
             "M_sens_within": 4, "damping": 0.5, "max_iter": 25, "tol": 1e-3,
             "alpha_star": 0.0, "frozen_noise": True, "expert_chunk": 512,
             "responses": True, "mw_cap": 262144},
    "sweep": {"factors": [1, 2, 4], "dims_scaled": ["N", "E", "Ne"],
              "seeds": 4, "scheme": "mf-flow", "horizon": 50},
}


def resolve_config(doc: dict | None, env: dict | None = None) -> dict:
    """Merge user document over defaults; reject unknown keys; apply
    environment overrides."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a mapping")
    cfg = {sec: dict(defaults) for sec, defaults in DEFAULTS.items()}
    for sec, body in doc.items():
        if sec not in cfg:
            raise ConfigurationError(f"unknown config section '{sec}'")
        if not isinstance(body, dict):
            raise ConfigurationError(f"config section '{sec}' must be a mapping")
        for key, val in body.items():
            if key not in cfg[sec]:
                raise ConfigurationError(f"unknown config key '{sec}.{key}'")
            cfg[sec][key] = val
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].split("__")
        if len(path) != 2 or path[0] not in cfg or path[1] not in cfg[path[0]]:
            raise ConfigurationError(f"unknown config override '{name}'")
        cfg[path[0]][path[1]] = yaml.safe_load(raw)
    return cfg


def load_config(path: str | None) -> dict:
    doc = None
    if path:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    return resolve_config(doc)


# --------------------------------------------------------------------------
# config -> objects
# --------------------------------------------------------------------------

def build_dataset(cfg: dict) -> Dataset:
    d = cfg["data"]
    dims = cfg["dims"]
    if d["kind"] == "probe":
        seed = d["seed"] if d["seed"] is not None else cfg["run"]["master_seed"]
        return make_probe_dataset(P=dims["P"], D=dims["D"], seed=seed,
                                  teacher=d["teacher"], normalize=d["normalize"])
    if d["kind"] == "file":
        with np.load(d["path"]) as zf:
            return Dataset(x=zf["x"], y=zf["y"])
    raise ConfigurationError(f"unknown data kind '{d['kind']}'")


def build_train_config(cfg: dict) -> TrainConfig:
    dims = ModelDims(**cfg["dims"])
    base = LearningRates(gamma0=cfg["rates"]["gamma0"])
    if cfg["rates"]["eta"] is not None:
        lrs = LearningRates(gamma0=cfg["rates"]["gamma0"], **cfg["rates"]["eta"])
        scheme = _init_scheme(cfg, dims, None)
    else:
        paramzn = get_parameterization(cfg["rates"]["scheme"], dims.gamma)
        scheme, lrs = apply_parameterization(base, dims, paramzn)
        scheme = _init_scheme(cfg, dims, scheme)
    grid = cfg["trace"]["grid"]
    return TrainConfig(
        dims=dims, phi=cfg["model"]["phi"], sigma=cfg["model"]["sigma"],
        scheme=scheme, lrs=lrs, gate_mode=cfg["gate"]["mode"],
        loss=cfg["model"]["loss"], bias_mode=cfg["bias"]["mode"],
        eta_bias=cfg["bias"]["eta_bias"], seed=cfg["run"]["master_seed"],
        retention=cfg["trace"]["retention"],
        grid=tuple(grid) if grid else None)


def _init_scheme(cfg: dict, dims: ModelDims, derived: InitScheme | None) -> InitScheme:
    name = cfg["init"]["scheme"]
    if cfg["init"]["stds"] is not None:
        return InitScheme(**{f"std_{k}": v for k, v in cfg["init"]["stds"].items()},
                          name="custom")
    if name in ("mf-flow", "fanin-baseline", "adam-table"):
        scheme, _ = apply_parameterization(
            LearningRates(), dims, get_parameterization(name, dims.gamma))
        return scheme
    if name == "unit":
        return InitScheme.unit()
    if name == "router-zero":
        return InitScheme.router_zero()
    if name == "zeros":
        return InitScheme.zeros()
    if derived is not None:
        return derived
    raise ConfigurationError(f"unknown init scheme '{name}'")


def build_dmft_config(cfg: dict, data: Dataset) -> DmftConfig:
    dims = cfg["dims"]
    d = cfg["dmft"]
    return DmftConfig(
        Kx=data.Kx, y=data.y, D=dims["D"], steps=dims["steps"], dt=dims["dt"],
        phi=cfg["model"]["phi"], sigma=cfg["model"]["sigma"],
        gamma0=cfg["rates"]["gamma0"], gate_mode=cfg["gate"]["mode"],
        kappa=dims["kappa"], bias_mode=cfg["bias"]["mode"],
        eta_bias=cfg["bias"]["eta_bias"], loss=cfg["model"]["loss"],
        M_res=d["M_res"], M_exp=d["M_exp"], M_within=d["M_within"],
        M_sens_exp=d["M_sens_exp"], M_sens_within=d["M_sens_within"],
        damping=d["damping"], max_iter=d["max_iter"], tol=d["tol"],
        seed=cfg["run"]["master_seed"], alpha_star=d["alpha_star"],
        frozen_noise=d["frozen_noise"], expert_chunk=d["expert_chunk"],
        mw_cap=d["mw_cap"], responses=d["responses"])


# --------------------------------------------------------------------------
# trace (de)serialization
# --------------------------------------------------------------------------

_PARAM_KEYS = ("W0", "W1", "W2", "w3", "r", "b")
_FIELD_KEYS = ("h0", "u", "m", "p", "w", "active", "h3", "f", "g", "gtilde",
               "z", "delta", "A", "q", "Delta")


def save_trace(trace: Trace, path) -> None:
    if trace.params is None:
        raise ConfigurationError("trace has no snapshots to save")
    arrays = {"x": trace.data.x, "y": trace.data.y,
              "recorded_steps": np.asarray(trace.recorded_steps)}
    for key in _PARAM_KEYS:
        arrays[f"p0/{key}"] = trace.initial_params.blocks()[key]
        arrays[f"param/{key}"] = np.stack(
            [p.blocks()[key] for p in trace.params])
    for key in _FIELD_KEYS:
        arrays[f"field/{key}"] = np.stack(
            [getattr(fs, key) for fs in trace.fields])
    cfg = trace.config
    meta = {"dims": {k: getattr(cfg.dims, k) for k in
                     ("D", "N", "E", "Ne", "P", "gamma", "kappa", "steps", "dt")},
            "phi": cfg.phi, "sigma": cfg.sigma, "gate_mode": cfg.gate_mode,
            "loss": cfg.loss if isinstance(cfg.loss, str) else "user",
            "bias_mode": cfg.bias_mode, "eta_bias": cfg.eta_bias,
            "seed": cfg.seed,
            "scheme": {f"std_{k}": getattr(cfg.scheme, f"std_{k}")
                       for k in ("W0", "W1", "W2", "w3", "r", "b")},
            "lrs": {k: getattr(cfg.lrs, k) for k in
                    ("eta0", "eta1", "eta2", "eta3", "eta_r", "eta_b", "gamma0")},
            "times": trace.times.tolist(), "losses": trace.losses.tolist()}
    save_snapshots(path, arrays, meta)


def load_trace(path) -> Trace:
    from .model import FieldState, ParamState

    arrays, meta = load_snapshots(path)
    dims = ModelDims(**meta["dims"])
    cfg = TrainConfig(dims=dims, phi=meta["phi"], sigma=meta["sigma"],
                      scheme=InitScheme(**meta["scheme"], name="loaded"),
                      lrs=LearningRates(**meta["lrs"]),
                      gate_mode=meta["gate_mode"], loss=meta["loss"],
                      bias_mode=meta["bias_mode"], eta_bias=meta["eta_bias"],
                      seed=meta["seed"])
    data = Dataset(x=arrays["x"], y=arrays["y"])
    steps = list(int(s) for s in arrays["recorded_steps"])
    n_rec = len(steps)
    params = [ParamState(**{k: arrays[f"param/{k}"][j] for k in _PARAM_KEYS})
              for j in range(n_rec)]
    fields = []
    for j in range(n_rec):
        fields.append(FieldState(**{k: arrays[f"field/{k}"][j]
                                    for k in _FIELD_KEYS}))
    p0 = ParamState(**{k: arrays[f"p0/{k}"] for k in _PARAM_KEYS})
    times = np.asarray(meta["times"])
    losses = np.asarray(meta["losses"])
    zeros = np.zeros_like(losses)
    return Trace(config=cfg, data=data, times=times, losses=losses,
                 mean_abs_delta=zeros,
                 param_norms={k: zeros for k in _PARAM_KEYS},
                 loads=np.zeros((len(times), dims.E)),
                 ch_diag=np.zeros((len(times), dims.P)),
                 initial_params=p0, recorded_steps=steps, params=params,
                 fields=fields, final_params=params[-1], final_fields=fields[-1])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

OBS_HEADER_BASE = ["step", "time"]


def _write_observables(trace: Trace, out: Path) -> None:
    P = trace.config.dims.P
    header = OBS_HEADER_BASE + [f"ch_diag_{mu}" for mu in range(P)]
    rows = [[n, trace.times[n]] + list(trace.ch_diag[n])
            for n in range(trace.steps + 1)]
    write_table(out / "observables.csv", header, rows)


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg)
    data = build_dataset(cfg)
    tcfg = build_train_config(cfg)
    try:
        trace = run_trajectory(tcfg, data)
    except DivergenceError as err:
        print(f"train: {err}", file=sys.stderr)
        if err.trace is not None:
            write_table(out / "steps.csv", TRACE_STEP_HEADER,
                        trace_step_rows(err.trace))
        return 1
    write_table(out / "steps.csv", TRACE_STEP_HEADER, trace_step_rows(trace))
    _write_observables(trace, out)
    if cfg["trace"]["snapshots"] and trace.params is not None:
        save_trace(trace, out / "snapshots.npz")
    if cfg["kernels"]["enable"] and trace.params is not None:
        H0, H3, G = klib.global_kernels(trace, use_gtilde=cfg["kernels"]["gtilde"])
        MPhi, MPsi, MA, MAA = klib.mixture_kernels(trace,
                                                   atilde=cfg["kernels"]["atilde"])
        write_table(out / "kernels.csv", klib.KERNEL_HEADER,
                    klib.kernel_rows([H0, H3, G, MPhi, MPsi, MA, MAA]))
    if cfg["trace"]["states"] and trace.params is not None:
        states = klib.extract_states(trace)
        for level in ("S", "X", "Y"):
            rows = []
            for j, step in enumerate(states.steps):
                recs = getattr(states, level)[j]
                flat = recs.reshape(-1, recs.shape[-1])
                for idx, rec in enumerate(flat):
                    rows.append([level, step, idx] + list(rec))
            dim = len(rows[0]) - 3 if rows else 0
            write_table(out / f"states_{level}.csv",
                        ["level", "step", "index"] + [f"c{i}" for i in range(dim)],
                        rows)
    if cfg["run"]["plots"]:
        from . import plots
        plots.loss_curve(trace.times, trace.losses, out / "figures" / "loss.png")
    return 0


def cmd_verify(cfg: dict, trace_path: str) -> int:
    out = Path(cfg["run"]["out"])
    trace = load_trace(trace_path)
    reports = vlib.check_all(trace)
    write_table(out / "verify_report.csv", vlib.REPORT_HEADER,
                vlib.report_rows(reports))
    bad = [r for r in reports if not r.passed]
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.identity:18s} max_abs={r.max_abs:.3e} "
              f"max_rel={r.max_rel:.3e} [{status}]")
    return 1 if bad else 0


def cmd_dmft(cfg: dict) -> int:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg)
    data = build_dataset(cfg)
    sol = solve_dmft(build_dmft_config(cfg, data))
    P, T = sol.Delta.shape
    steps = list(range(T))

    def ttk(tag, values):
        return klib.TwoTimeKernel(tag, values, steps)

    kernels = [ttk("dmft:C_h", sol.C_h), ttk("dmft:C_phi3", sol.C_phi3),
               ttk("dmft:C_g", sol.C_g), ttk("dmft:M_phi", sol.M_phi),
               ttk("dmft:M_psi", sol.M_psi), ttk("dmft:M_aa", sol.M_aa),
               klib.OneTimeMixture("dmft:M_a", sol.M_a, steps),
               klib.OneTimeMixture("dmft:f", sol.f, steps),
               klib.OneTimeMixture("dmft:Delta", sol.Delta, steps)]
    write_table(out / "dmft_kernels.csv", klib.KERNEL_HEADER,
                klib.kernel_rows(kernels))
    dims = cfg["dims"]
    write_table(out / "dmft_loss.csv", ["step", "time", "loss"],
                [[n, n * dims["dt"], sol.loss[n]] for n in range(T)])
    write_table(out / "convergence.csv", ["iteration", "max_change"],
                [[i + 1, c] for i, c in enumerate(sol.change_history)])
    write_json(out / "dmft_meta.json",
               {"converged": sol.converged, "iterations": sol.iterations,
                "residual": sol.residual})
    if cfg["run"]["plots"]:
        from . import plots
        plots.loss_curve(dims["dt"] * np.arange(T), sol.loss,
                         out / "figures" / "dmft_loss.png", label="mean-field")
        plots.convergence(sol.change_history, out / "figures" / "convergence.png")
    if not sol.converged:
        print(f"dmft: not converged (residual {sol.residual:.3e})", file=sys.stderr)
    return 0


def cmd_sweep(cfg: dict) -> int:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg)
    sw = cfg["sweep"]
    base = build_train_config(cfg)
    plan = SweepPlan(base=base, scale_factors=tuple(sw["factors"]),
                     dims_scaled=tuple(sw["dims_scaled"]), seeds=sw["seeds"],
                     scheme=sw["scheme"], master_seed=cfg["run"]["master_seed"])
    report = run_sweep(plan, threads=cfg["run"]["threads"])
    write_table(out / "sweep.csv", SWEEP_HEADER, sweep_rows(report))

    fits = []
    for obs in ("gtilde00", "ma0"):
        try:
            fits.append(concentration_fit(report, obs))
        except ConfigurationError:
            pass
    write_table(out / "fits.csv", FIT_HEADER, fit_rows(fits))

    # collapse metrics against the smallest size (seed-0 curves)
    base_curve = next(c.loss_curve for c in report.cells
                      if c.factor == plan.scale_factors[0] and not c.diverged)
    rows = []
    curves = {f"s={plan.scale_factors[0]}": base_curve}
    for f in plan.scale_factors[1:]:
        cur = next((c.loss_curve for c in report.cells
                    if c.factor == f and not c.diverged), None)
        if cur is None:
            continue
        rows.append([f, collapse_metric(base_curve, cur, sw["horizon"])])
        curves[f"s={f}"] = cur
    write_table(out / "collapse.csv", ["factor", "collapse_metric"], rows)
    if cfg["run"]["plots"]:
        from . import plots
        dt = cfg["dims"]["dt"]
        plots.curve_overlay(dt * np.arange(len(base_curve)), curves,
                            out / "figures" / "collapse.png")
        for fit in fits:
            plots.loglog_fit(fit.sizes, fit.values, fit.slope, fit.intercept,
                             out / "figures" / f"fit_{fit.observable}.png")
    return 0


def cmd_compare(cfg: dict, finite_dir: str, dmft_dir: str) -> int:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    fin_steps = _read_csv_cols(Path(finite_dir) / "steps.csv")
    dm_loss = _read_csv_cols(Path(dmft_dir) / "dmft_loss.csv")
    n = min(len(fin_steps["loss"]), len(dm_loss["loss"]))
    lf = np.asarray(fin_steps["loss"][:n])
    ld = np.asarray(dm_loss["loss"][:n])
    loss_gap = np.abs(lf - ld) / np.maximum(np.abs(ld), 1e-12)

    fin_obs = _read_csv_cols(Path(finite_dir) / "observables.csv")
    ch_cols = sorted(k for k in fin_obs if k.startswith("ch_diag_"))
    ch_fin = np.stack([np.asarray(fin_obs[k][:n]) for k in ch_cols], axis=1)
    ch_dm = _dmft_ch_diag(Path(dmft_dir) / "dmft_kernels.csv", len(ch_cols))[:n]
    tr_fin = ch_fin.mean(axis=1)
    tr_dm = ch_dm.mean(axis=1)
    ch_gap = np.abs(tr_fin - tr_dm) / np.maximum(np.abs(tr_dm), 1e-12)

    rows = [[i, lf[i], ld[i], loss_gap[i], tr_fin[i], tr_dm[i], ch_gap[i]]
            for i in range(n)]
    write_table(out / "gap_table.csv",
                ["step", "loss_finite", "loss_dmft", "loss_rel_gap",
                 "ch_trace_finite", "ch_trace_dmft", "ch_rel_gap"], rows)
    print(f"compare: max loss gap {loss_gap.max():.4f}, "
          f"max C_h trace gap {ch_gap.max():.4f} over {n} steps")
    if cfg["run"]["plots"]:
        from . import plots
        t = np.arange(n, dtype=float)
        plots.curve_overlay(t, {"finite": lf, "mean-field": ld},
                            out / "figures" / "compare_loss.png")
        plots.curve_overlay(t, {"finite": tr_fin, "mean-field": tr_dm},
                            out / "figures" / "compare_ch.png",
                            ylabel="tr C_h / P", logy=False)
    return 0


def _read_csv_cols(path) -> dict[str, list]:
    header, rows = read_table(path)
    cols = {h: [] for h in header}
    for row in rows:
        for h, v in zip(header, row):
            try:
                cols[h].append(float(v))
            except ValueError:
                cols[h].append(v)
    return cols


def _dmft_ch_diag(path, P: int) -> np.ndarray:
    header, rows = read_table(path)
    vals = {}
    for row in rows:
        rec = dict(zip(header, row))
        if rec["tag"] == "dmft:C_h" and rec["mu"] == rec["nu"] \
                and rec["n"] == rec["nprime"]:
            vals[(int(rec["n"]), int(rec["mu"]))] = float(rec["value"])
    T = 1 + max(k[0] for k in vals)
    out = np.zeros((T, P))
    for (nn, mu), v in vals.items():
        out[nn, mu] = v
    return out


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="moelab")
    ap.add_argument("command",
                    choices=["train", "verify", "dmft", "sweep", "compare"])
    ap.add_argument("--config", default=None, help="YAML config path")
    ap.add_argument("--seed", type=int, default=None, help="master seed override")
    ap.add_argument("--out", default=None, help="output directory override")
    ap.add_argument("--threads", type=int, default=None, help="0 = auto")
    ap.add_argument("--no-plots", action="store_true")
    ap.add_argument("--trace", default=None, help="snapshots.npz for verify")
    ap.add_argument("--finite", default=None, help="finite run dir for compare")
    ap.add_argument("--dmft", default=None, help="dmft run dir for compare")
    args = ap.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["master_seed"] = args.seed
        if args.out is not None:
            cfg["run"]["out"] = args.out
        if args.threads is not None:
            cfg["run"]["threads"] = args.threads
        if args.no_plots:
            cfg["run"]["plots"] = False
        set_thread_count(cfg["run"]["threads"])

        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "verify":
            path = args.trace or str(Path(cfg["run"]["out"]) / "snapshots.npz")
            return cmd_verify(cfg, path)
        if args.command == "dmft":
            return cmd_dmft(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "compare":
            if not (args.finite and args.dmft):
                raise ConfigurationError("compare needs --finite and --dmft")
            return cmd_compare(cfg, args.finite, args.dmft)
        raise ConfigurationError(f"unknown command {args.command}")
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
