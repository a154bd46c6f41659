"""Experiment driver: config parsing, canonical experiments, CSV and figure output.

Exit codes: 0 on pass, 2 when an acceptance-style criterion fails, 1 on
runtime or configuration errors.  Every CSV carries a comment line recording
the config hash, the epsilon list, and the tolerances in force, followed by a
header row; identical config and seed produce byte-identical CSV files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from magpack import egorov as eg
from magpack import fields as fl
from magpack import gridref as gr
from magpack import moments as mo
from magpack import odeint as oi
from magpack import packet as pk

__all__ = ["main", "run", "fit_slope", "SlopeFit", "ConfigError", "load_config"]

# pass bands pinned by the acceptance contract
L2_SLOPE_BAND = (0.45, 1.6)
OBS_SLOPE_BAND = (1.7, 2.6)
EGOROV_SLOPE_BAND = (1.7, 2.3)
EXACTNESS_TOL = 1e-6
EGOROV_QUADRATIC_TOL = 1e-7

EXPERIMENTS = (
    "propagate",
    "exactness",
    "conserve",
    "converge_l2",
    "converge_obs",
    "egorov_check",
    "moments_selftest",
)


class ConfigError(ValueError):
    """Config schema violation; the message names the offending field."""


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares line through log10-log10 data with a pass band check."""

    slope: float
    intercept: float
    residual: float
    npoints: int

    def in_band(self, band):
        return band[0] <= self.slope <= band[1]


def fit_slope(points):
    """Fit a line to (x, y) pairs in log10-log10 scale; requires positive data."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 3:
        raise ValueError("slope fit requires at least 3 points")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("slope fit requires positive data")
    lx, ly = np.log10(x), np.log10(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = float(np.abs(ly - (slope * lx + intercept)).max())
    return SlopeFit(slope=float(slope), intercept=float(intercept), residual=resid, npoints=len(pts))


# ---------------------------------------------------------------------------
# Config schema

_TOP_KEYS = {
    "experiment",
    "field",
    "packet",
    "eps_list",
    "T",
    "integrator",
    "grid",
    "observables",
    "output",
}
_INTEGRATOR_KEYS = {"method", "tol", "step", "quad_order", "rho_min", "form"}
_GRID_KEYS = {"L", "N", "krylov_dim", "dt", "boundary_tol"}
_PACKET_KEYS = {"dim", "eps", "q", "p", "C_re", "C_im", "zeta_re", "zeta_im", "normalize"}
_OBSERVABLE_NAMES = {"q1", "q2", "p1", "p2", "psq", "Lz"}


def _reject_unknown(section, given, allowed):
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}")


def load_config(path):
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("config", cfg, _TOP_KEYS)
    for key in ("experiment", "field", "packet"):
        if key not in cfg:
            raise ConfigError(f"config: missing required key '{key}'")
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(
            f"experiment: must be one of {EXPERIMENTS}, got '{cfg['experiment']}'"
        )
    field = cfg["field"]
    if not isinstance(field, dict) or "name" not in field:
        raise ConfigError("field: must be an object with a 'name' key")
    _reject_unknown("field", field, {"name", "params"})
    _reject_unknown("packet", cfg["packet"], _PACKET_KEYS)
    if "eps_list" in cfg:
        eps = cfg["eps_list"]
        if (
            not isinstance(eps, list)
            or not eps
            or any((not isinstance(e, (int, float))) or e <= 0 for e in eps)
        ):
            raise ConfigError("eps_list: must be a non-empty list of positive numbers")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps_list: must be strictly descending")
    if "integrator" in cfg:
        _reject_unknown("integrator", cfg["integrator"], _INTEGRATOR_KEYS)
    if "grid" in cfg:
        _reject_unknown("grid", cfg["grid"], _GRID_KEYS)
    if "observables" in cfg:
        for name in cfg["observables"]:
            if name not in _OBSERVABLE_NAMES:
                raise ConfigError(
                    f"observables: unknown observable '{name}' (known: {sorted(_OBSERVABLE_NAMES)})"
                )
    if "T" in cfg and cfg["T"] <= 0:
        raise ConfigError("T: must be positive")
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def packet_from_config(pc, eps=None):
    """Build a packet from the flat config record (d, eps, q, p, C row-major, zeta)."""
    d = int(pc["dim"])
    eps = float(pc["eps"]) if eps is None else float(eps)
    q = np.asarray(pc["q"], dtype=float)
    p = np.asarray(pc["p"], dtype=float)
    c_re = np.asarray(pc["C_re"], dtype=float).reshape(d, d)
    c_im = np.asarray(pc["C_im"], dtype=float).reshape(d, d)
    zeta = complex(pc.get("zeta_re", 0.0), pc.get("zeta_im", 0.0))
    packet = pk.GaussianPacket(eps=eps, q=q, p=p, C=c_re + 1j * c_im, zeta=zeta)
    packet.validate()
    if pc.get("normalize", True):
        packet = pk.normalize(packet)
    return packet


def fields_from_config(cfg):
    return fl.builtin(cfg["field"]["name"], cfg["field"].get("params", {}))


_SYMBOLS = {
    "q1": lambda d: fl.coordinate_symbol(d, 0),
    "q2": lambda d: fl.coordinate_symbol(d, 1),
    "p1": lambda d: fl.coordinate_symbol(d, d),
    "p2": lambda d: fl.coordinate_symbol(d, d + 1),
    "psq": lambda d: fl.kinetic_energy_symbol(d),
}


def grid_observable(name, d):
    if name == "q1":
        return gr.GridObservable.position(0, d)
    if name == "q2":
        return gr.GridObservable.position(1, d)
    if name == "p1":
        return gr.GridObservable.momentum(0, d)
    if name == "p2":
        return gr.GridObservable.momentum(1, d)
    if name == "psq":
        return gr.GridObservable.kinetic()
    if name == "Lz":
        return gr.GridObservable.angular_momentum()
    raise ConfigError(f"unknown observable '{name}'")


def packet_observable(name, packet, t=0.0, order=20):
    """Expectation of a named observable in the packet state (exact moments)."""
    d = packet.d
    if name == "Lz":
        # x1 p2 - x2 p1: linear in each factor; Wigner quadrature is exact
        def val(_t, Z):
            return Z[:, 0] * Z[:, d + 1] - Z[:, 1] * Z[:, d]

        return float(mo.wigner_average(packet, val, t=t, order=6))
    sym = _SYMBOLS[name](d)
    return float(mo.wigner_average(packet, sym, t=t, order=order, check_norm=False))


# ---------------------------------------------------------------------------
# Output helpers


def _write_csv(path, header, rows, meta):
    import numbers

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {meta}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(float(v)) if isinstance(v, numbers.Real) and not isinstance(v, int) else v for v in row]
            )


def _loglog_figure(path, xs, ys, fit, band, title, ylabel):
    plt.rcParams["svg.hashsalt"] = "magpack"
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.loglog(xs, ys, "o", color="C0", label="measured")
    xs_f = np.array([min(xs), max(xs)])
    ax.loglog(
        xs_f,
        10 ** (fit.intercept + fit.slope * np.log10(xs_f)),
        "-",
        color="C1",
        label=f"slope {fit.slope:.2f}",
    )
    if band is not None:
        ax.set_title(f"{title} (band [{band[0]}, {band[1]}])")
    else:
        ax.set_title(title)
    ax.set_xlabel("eps")
    ax.set_ylabel(ylabel)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def _drift_figure(path, times, series, title):
    plt.rcParams["svg.hashsalt"] = "magpack"
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for label, vals in series.items():
        ax.semilogy(times, np.maximum(np.abs(vals), 1e-18), label=label)
    ax.set_xlabel("t")
    ax.set_ylabel("|drift|")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Grid sizing

GRID_POINTS_PER_SQRT_EPS = 16.0
SIGMA_MARGIN = 7.0


def _as_gaussian(packet):
    return pk.width_from(packet) if isinstance(packet, pk.HagedornPacket) else packet


def auto_grid(packet0, traj_packets, eps, grid_cfg, T):
    """Box from classical excursion plus width margin; N from the resolution rule.

    L covers the trajectory excursion plus ``SIGMA_MARGIN`` standard deviations
    of the widest sampled state (the stated margin is six; one extra deviation
    plus padding keeps the boundary-mass estimate below the hard 1e-10 gate).
    N per axis is the next power of two >= 16 * (2L) / sqrt(eps).
    """
    packet0 = _as_gaussian(packet0)
    centers = np.zeros(packet0.d)
    l_cfg = grid_cfg.get("L", "auto")
    n_cfg = grid_cfg.get("N", "auto")
    if l_cfg == "auto":
        qmax = np.zeros(packet0.d)
        sig = 0.0
        for packet in map(_as_gaussian, traj_packets):
            qmax = np.maximum(qmax, np.abs(packet.q))
            sig = max(sig, np.sqrt(0.5 * eps / np.linalg.eigvalsh(packet.C_im).min()))
        half = float(np.ceil((qmax.max() + SIGMA_MARGIN * sig + 0.2) * 10.0) / 10.0)
    else:
        half = float(l_cfg)
    n_rule = GRID_POINTS_PER_SQRT_EPS * 2.0 * half / np.sqrt(eps)
    n_auto = 1 << int(np.ceil(np.log2(max(n_rule, 16))))
    if n_cfg == "auto":
        n = n_auto
    else:
        n = int(n_cfg)
        if n < n_rule:
            raise ConfigError(
                f"grid.N = {n} violates the resolution rule (needs >= {n_rule:.0f} at eps = {eps})"
            )
    if n > 2048:
        raise ConfigError(f"grid resolution N = {n} exceeds the supported maximum 2048")
    return gr.Grid(centers=centers, halfwidths=np.full(packet0.d, half), shape=[n] * packet0.d)


# ---------------------------------------------------------------------------
# Experiment implementations


def _integrator_opts(cfg):
    icfg = cfg.get("integrator", {})
    return {
        "method": icfg.get("method", "dp54_adaptive"),
        "tol": float(icfg.get("tol", 1e-10)),
        "step": icfg.get("step"),
        "quad_order": int(icfg.get("quad_order", 20)),
        "rho_min": float(icfg.get("rho_min", 1e-6)),
        "form": icfg.get("form", "variational"),
    }


def _run_packet(cfg, fields, eps, T, sample_times=None, with_energy=False):
    """Integrate the packet ODE system; returns (packer, trajectory)."""
    opts = _integrator_opts(cfg)
    thresholds = oi.MonitorThresholds(rho_min=opts["rho_min"])
    if opts["form"] == "hagedorn":
        packer, rhs, monitor, diag = oi.hagedorn_system(
            fields, eps, opts["quad_order"], thresholds, with_energy=with_energy
        )
        u0 = packet_from_config(cfg["packet"], eps=eps)
        y0 = packer.pack_packet(pk.factor_width(u0))
    else:
        packer, rhs, monitor, diag = oi.variational_system(
            fields, eps, opts["quad_order"], thresholds, with_energy=with_energy
        )
        y0 = packer.pack_packet(packet_from_config(cfg["packet"], eps=eps))
    traj = oi.integrate(
        rhs,
        y0,
        0.0,
        T,
        method=opts["method"],
        tol=opts["tol"],
        step=opts["step"],
        sample_times=sample_times,
        monitor=monitor,
        diagnostics=diag,
    )
    return packer, traj


def _sweep_point(cfg, eps):
    """One epsilon point of a convergence sweep: returns errors and runtime."""
    fields = fields_from_config(cfg)
    T = float(cfg.get("T", 1.0))
    gcfg = cfg.get("grid", {})
    opts = _integrator_opts(cfg)
    t_start = time.perf_counter()

    nsamp = 9
    samples = np.linspace(0.0, T, nsamp)
    packer, traj = _run_packet(cfg, fields, eps, T, sample_times=samples)
    packets = [packer.packet(y, eps) for y in traj.states]
    u_final = packets[-1]

    grid = auto_grid(packets[0], packets, eps, gcfg, T)
    boundary_tol = float(gcfg.get("boundary_tol", 1e-10))
    s0 = gr.sample(packets[0], grid, boundary_tol=boundary_tol)
    s1 = gr.propagate(
        s0,
        fields,
        eps,
        0.0,
        T,
        dt=gcfg.get("dt"),
        krylov_dim=int(gcfg.get("krylov_dim", 64)),
    )
    l2 = gr.pack_vs_grid_error(u_final, s1)

    obs_errors = {}
    for name in cfg.get("observables", []):
        grid_val = gr.observable_expect(s1, grid_observable(name, fields.d), eps)
        pack_val = packet_observable(name, u_final, t=T, order=opts["quad_order"])
        obs_errors[name] = abs(grid_val - pack_val)
    runtime = time.perf_counter() - t_start
    return {
        "eps": eps,
        "l2": l2,
        "obs": obs_errors,
        "runtime": runtime,
        "L": float(grid.halfwidths[0]),
        "N": int(grid.shape[0]),
    }


def _sweep_point_payload(payload):
    cfg, eps = payload
    return _sweep_point(cfg, eps)


def run_sweep(cfg, jobs=1):
    eps_list = [float(e) for e in cfg["eps_list"]]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_point_payload, [(cfg, e) for e in eps_list]))
    else:
        results = [_sweep_point(cfg, e) for e in eps_list]
    return results


def _experiment_converge(cfg, out_dir, jobs, want_obs):
    results = run_sweep(cfg, jobs)
    eps = [r["eps"] for r in results]
    meta = (
        f"config_hash={config_hash(cfg)} eps_list={eps} "
        f"l2_band={L2_SLOPE_BAND} obs_band={OBS_SLOPE_BAND}"
    )
    code = 0
    if not want_obs:
        errs = [r["l2"] for r in results]
        fit = fit_slope(list(zip(eps, errs)))
        rows = [(r["eps"], r["l2"], r["runtime"]) for r in results]
        _write_csv(out_dir / "converge_l2.csv", ["eps", "error", "runtime_s"], rows, meta)
        _loglog_figure(
            out_dir / "converge_l2.svg", eps, errs, fit, L2_SLOPE_BAND, "L2 error vs eps", "L2 error"
        )
        monotone = bool(np.all(np.diff(errs) < 0))
        ok = fit.in_band(L2_SLOPE_BAND) and monotone
        print(
            f"converge_l2: slope={fit.slope:.3f} band={L2_SLOPE_BAND} "
            f"monotone={monotone} -> {'PASS' if ok else 'FAIL'}"
        )
        if not ok:
            code = 2
    else:
        names = cfg.get("observables", ["q1", "p1", "psq"])
        for name in names:
            errs = [r["obs"][name] for r in results]
            fit = fit_slope(list(zip(eps, errs)))
            rows = [(r["eps"], r["obs"][name], r["runtime"]) for r in results]
            _write_csv(
                out_dir / f"converge_obs_{name}.csv", ["eps", "error", "runtime_s"], rows, meta
            )
            _loglog_figure(
                out_dir / f"converge_obs_{name}.svg",
                eps,
                errs,
                fit,
                OBS_SLOPE_BAND,
                f"observable error vs eps ({name})",
                "observable error",
            )
            ok = fit.in_band(OBS_SLOPE_BAND)
            print(
                f"converge_obs[{name}]: slope={fit.slope:.3f} band={OBS_SLOPE_BAND} "
                f"-> {'PASS' if ok else 'FAIL'}"
            )
            if not ok:
                code = 2
    return code


def _experiment_exactness(cfg, out_dir, jobs):
    fields = fields_from_config(cfg)
    T = float(cfg.get("T", 1.0))
    gcfg = cfg.get("grid", {})
    rows = []
    code = 0
    for eps in [float(e) for e in cfg.get("eps_list", [cfg["packet"].get("eps", 0.01)])]:
        t_start = time.perf_counter()
        packer, traj = _run_packet(cfg, fields, eps, T)
        packets = [packer.packet(y, eps) for y in traj.states]
        grid = auto_grid(packets[0], packets, eps, gcfg, T)
        s0 = gr.sample(packets[0], grid, boundary_tol=float(gcfg.get("boundary_tol", 1e-10)))
        s1 = gr.propagate(
            s0, fields, eps, 0.0, T, dt=gcfg.get("dt"), krylov_dim=int(gcfg.get("krylov_dim", 64))
        )
        err = gr.pack_vs_grid_error(packets[-1], s1)
        runtime = time.perf_counter() - t_start
        rows.append((eps, err, runtime))
        ok = err <= EXACTNESS_TOL
        print(f"exactness eps={eps}: L2 error {err:.3e} (tol {EXACTNESS_TOL}) -> {'PASS' if ok else 'FAIL'}")
        if not ok:
            code = 2
    meta = f"config_hash={config_hash(cfg)} tol={EXACTNESS_TOL}"
    _write_csv(out_dir / "exactness.csv", ["eps", "error", "runtime_s"], rows, meta)
    return code


def _experiment_conserve(cfg, out_dir, jobs):
    fields = fields_from_config(cfg)
    T = float(cfg.get("T", 5.0))
    eps = float(cfg.get("eps_list", [cfg["packet"].get("eps", 0.1)])[0])
    opts = _integrator_opts(cfg)
    nsamp = 201
    samples = np.linspace(0.0, T, nsamp)
    packer, traj = _run_packet(cfg, fields, eps, T, sample_times=samples, with_energy=True)
    packets = [packer.packet(y, eps) for y in traj.states]
    d = fields.d

    norm_drift = np.array([np.sqrt(pk.norm_squared(u)) - 1.0 for u in packets])
    energy = traj.diagnostics["energy"]
    energy_drift = energy - energy[0]
    p_mom = np.array(
        [
            [packet_observable(f"p{j + 1}", u, t=t, order=opts["quad_order"]) for j in range(d)]
            for t, u in zip(traj.times, packets)
        ]
    )
    p_drift = p_mom - p_mom[0]

    header = ["t", "norm_drift", "energy_drift"] + [f"p{j + 1}_drift" for j in range(d)]
    rows = []
    balance_mismatch = None
    if fields.time_dependent:
        # energy balance: d/dt <H> = <i eps dA/dt . grad> + <dVt/dt>
        integrand = []
        for t, u in zip(traj.times, packets):
            def sym(_t, Z, t=t):
                X, P = Z[:, :d], Z[:, d:]
                return -np.einsum("mk,mk->m", fields.dA_dt(t, X), P) + fields.dVt_dt(t, X)

            integrand.append(float(mo.wigner_average(u, sym, t=t, order=opts["quad_order"], check_norm=False)))
        integrand = np.array(integrand)
        from scipy.integrate import cumulative_trapezoid

        balance = cumulative_trapezoid(integrand, traj.times, initial=0.0)
        balance_mismatch = float(np.abs(energy_drift - balance).max())
        header += ["energy_balance_integral", "balance_mismatch"]
        for i, t in enumerate(traj.times):
            rows.append(
                (
                    float(t),
                    float(norm_drift[i]),
                    float(energy_drift[i]),
                    *[float(v) for v in p_drift[i]],
                    float(balance[i]),
                    float(energy_drift[i] - balance[i]),
                )
            )
    else:
        for i, t in enumerate(traj.times):
            rows.append(
                (
                    float(t),
                    float(norm_drift[i]),
                    float(energy_drift[i]),
                    *[float(v) for v in p_drift[i]],
                )
            )

    meta = f"config_hash={config_hash(cfg)} eps={eps} tol_norm=1e-8 tol_energy=1e-6"
    _write_csv(out_dir / "conserve.csv", header, rows, meta)
    series = {
        "norm": norm_drift,
        "energy": energy_drift,
        "p1": p_drift[:, 0],
    }
    _drift_figure(out_dir / "conserve.svg", traj.times, series, "conservation drifts")

    code = 0
    norm_ok = np.abs(norm_drift).max() <= 1e-8
    print(f"conserve: max norm drift = {np.abs(norm_drift).max():.3e} -> {'PASS' if norm_ok else 'FAIL'}")
    if not norm_ok:
        code = 2
    if fields.time_dependent:
        ok = balance_mismatch <= 1e-4
        print(f"conserve: energy balance mismatch = {balance_mismatch:.3e} (tol 1e-4) -> {'PASS' if ok else 'FAIL'}")
        if not ok:
            code = 2
    else:
        ok = np.abs(energy_drift).max() <= 1e-6
        print(f"conserve: max energy drift = {np.abs(energy_drift).max():.3e} -> {'PASS' if ok else 'FAIL'}")
        if not ok:
            code = 2
    return code


def _experiment_propagate(cfg, out_dir, jobs):
    fields = fields_from_config(cfg)
    T = float(cfg.get("T", 1.0))
    eps = float(cfg.get("eps_list", [cfg["packet"].get("eps", 0.1)])[0])
    samples = np.linspace(0.0, T, 101)
    packer, traj = _run_packet(cfg, fields, eps, T, sample_times=samples, with_energy=True)
    opts = _integrator_opts(cfg)
    meta = f"config_hash={config_hash(cfg)} eps={eps} tol={opts['tol']}"
    oi.trajectory_to_csv(traj, packer, eps, out_dir / "trajectory.csv", meta=meta)
    print(f"propagate: wrote {out_dir / 'trajectory.csv'}")
    if "grid" in cfg:
        _grid_run_csv(cfg, fields, eps, T, out_dir / "grid_run.csv", meta)
        print(f"propagate: wrote {out_dir / 'grid_run.csv'}")
    return 0


def _grid_run_csv(cfg, fields, eps, T, path, meta, nsamp=21):
    """Grid-side run log: per sample time the norm, energy, and observables."""
    gcfg = cfg.get("grid", {})
    opts = _integrator_opts(cfg)
    samples = np.linspace(0.0, T, nsamp)
    packer, traj = _run_packet(cfg, fields, eps, T, sample_times=samples)
    packets = [packer.packet(y, eps) for y in traj.states]
    u0 = _as_gaussian(packets[0])
    grid = auto_grid(u0, packets, eps, gcfg, T)
    state = gr.sample(u0, grid, boundary_tol=float(gcfg.get("boundary_tol", 1e-10)))
    obs_names = cfg.get("observables", [])
    applier = gr.HamiltonianApplier(grid, fields, eps)

    def energy(s, t):
        applier.freeze(t)
        return float(np.real(np.vdot(s.psi, applier.apply(s.psi)) * grid.cell_volume))

    rows = []
    krylov = int(gcfg.get("krylov_dim", 32))
    for i, t in enumerate(samples):
        if i > 0:
            state = gr.propagate(state, fields, eps, samples[i - 1], t, krylov_dim=krylov)
        row = [float(t), state.norm(), energy(state, t)]
        row += [gr.observable_expect(state, grid_observable(nm, fields.d), eps) for nm in obs_names]
        rows.append(tuple(row))
    header = ["t", "norm", "energy"] + list(obs_names)
    _write_csv(path, header, rows, meta)


def _experiment_egorov(cfg, out_dir, jobs):
    fields = fields_from_config(cfg)
    if fields.d != 1:
        raise ConfigError("egorov_check requires a one-dimensional field")
    T = float(cfg.get("T", 2.0))
    gcfg = cfg.get("grid", {})
    obs_names = cfg.get("observables", ["p1"])
    h = fl.hamiltonian_symbol(fields)
    rows = []
    pairs = []
    for eps in [float(e) for e in cfg["eps_list"]]:
        t_start = time.perf_counter()
        u0 = packet_from_config(cfg["packet"], eps=eps)
        # classical excursion bound for the box
        zs = eg.flow(h, T, 0.0, np.concatenate([u0.q, u0.p]))
        excursion = max(abs(u0.q[0]), abs(zs[0]))
        sig = np.sqrt(0.5 * eps / np.linalg.eigvalsh(u0.C_im).min())
        gl = gcfg.get("L", "auto")
        half = float(gl) if gl != "auto" else float(np.ceil((excursion + 7.0 * sig + 0.3) * 4) / 4)
        n_rule = GRID_POINTS_PER_SQRT_EPS * 2 * half / np.sqrt(eps)
        n_cfg = gcfg.get("N", "auto")
        n = int(n_cfg) if n_cfg != "auto" else 1 << int(np.ceil(np.log2(max(n_rule, 64))))
        grid = gr.Grid(centers=[0.0], halfwidths=[half], shape=[n])
        sym = _SYMBOLS[obs_names[0]](1)
        resid = eg.egorov_residual(
            sym,
            fields,
            u0,
            eps,
            T,
            grid=grid,
            krylov_dim=int(gcfg.get("krylov_dim", 32)),
            flow_tol=1e-8,
        )
        rows.append((eps, resid, time.perf_counter() - t_start))
        pairs.append((eps, resid))
        print(f"egorov eps={eps}: residual {resid:.4e} (L={half}, N={n})")
    fit = fit_slope(pairs)
    meta = f"config_hash={config_hash(cfg)} band={EGOROV_SLOPE_BAND}"
    _write_csv(out_dir / "egorov.csv", ["eps", "error", "runtime_s"], rows, meta)
    _loglog_figure(
        out_dir / "egorov.svg",
        [r[0] for r in rows],
        [r[1] for r in rows],
        fit,
        EGOROV_SLOPE_BAND,
        "Egorov residual vs eps",
        "residual",
    )
    ok = fit.in_band(EGOROV_SLOPE_BAND)
    print(f"egorov_check: slope = {fit.slope:.3f} band={EGOROV_SLOPE_BAND} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def _experiment_moments_selftest(cfg, out_dir, jobs, seed=12345):
    """Closed-form moment oracles, expansion identities, and packet invariants."""
    rng = np.random.default_rng(seed)
    failures = []

    def check(name, ok, detail=""):
        print(f"  [{'PASS' if ok else 'FAIL'}] {name} {detail}")
        if not ok:
            failures.append(name)

    def random_width(d):
        m = rng.normal(size=(d, d)) * 0.4
        cr = 0.5 * (m + m.T)
        v = np.linalg.qr(rng.normal(size=(d, d)))[0]
        ci = v @ np.diag(rng.uniform(0.5, 1.8, size=d)) @ v.T
        return cr + 1j * ci

    # rho closed form vs quadrature
    worst = 0.0
    for d in (1, 2):
        for _ in range(25):
            C = random_width(d)
            sigma = 0.5 * pk.gram_matrix_inv(C)
            rule = mo.gauss_hermite(2 * d, 8)
            pts = rule.points(np.zeros(2 * d), sigma)
            for ell in mo.multi_indices(2 * d, 4) + mo.multi_indices(2 * d, 2):
                quad = float(rule.integrate(np.prod(pts ** np.array(ell), axis=1)))
                worst = max(worst, abs(mo.rho(C, ell) - quad))
    check("rho closed form vs quadrature", worst <= 1e-10, f"worst {worst:.2e}")

    # f2 trace identity vs multi-index sum
    worst = 0.0
    for d in (1, 2):
        for _ in range(10):
            C = random_width(d)
            hmat = rng.normal(size=(2 * d, 2 * d))
            hmat = 0.5 * (hmat + hmat.T)

            def deriv(ell):
                idx = mo._index_list(ell)
                return hmat[idx[0], idx[1]]

            v1 = mo.f2(hmat, C)
            v2 = mo.fk_sum(deriv, C, 2)
            worst = max(worst, abs(v1 - v2))
    check("f2 trace identity", worst <= 1e-12, f"worst {worst:.2e}")

    # isserlis resummation
    worst = 0.0
    for d in (1, 2):
        for _ in range(50):
            C = random_width(d)
            coeffs = {}
            for m_ix in mo.multi_indices(2 * d, 4):
                for b in range(2 * d):
                    if m_ix[b] >= 1:
                        coeffs[(b, m_ix)] = rng.normal()
            lhs, rhs = mo.isserlis_resum_check(coeffs, C)
            scale = max(abs(v) for v in coeffs.values())
            worst = max(worst, abs(lhs - rhs) / scale)
    check("isserlis resummation lhs = rhs", worst <= 1e-12, f"worst {worst:.2e}")

    # gram matrix symplectic
    worst_s = worst_d = 0.0
    for d in (1, 2):
        J = pk.symplectic_j(d)
        for _ in range(25):
            g = pk.gram_matrix(random_width(d))
            worst_s = max(worst_s, np.linalg.norm(g.T @ J @ g - J))
            worst_d = max(worst_d, abs(np.linalg.det(g) - 1.0))
    check("gram matrix symplectic", worst_s <= 1e-10 and worst_d <= 1e-10,
          f"defect {worst_s:.2e}, det {worst_d:.2e}")

    # factorization round trip
    worst = 0.0
    for d in (1, 2):
        for _ in range(10):
            C = random_width(d)
            u = pk.normalize(pk.GaussianPacket(eps=0.1, q=np.zeros(d), p=np.zeros(d), C=C))
            hp = pk.factor_width(u)
            hp.validate()
            worst = max(worst, np.abs(pk.width_from(hp).C - C).max())
    check("factorization round trip", worst <= 1e-12, f"worst {worst:.2e}")

    print(f"moments_selftest: {len(failures)} failure(s)")
    return 0 if not failures else 2


def run(cfg, out_dir, jobs=1, seed=12345):
    """Execute the configured experiment; returns the process exit code."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    experiment = cfg["experiment"]
    if experiment == "exactness":
        return _experiment_exactness(cfg, out_dir, jobs)
    if experiment == "converge_l2":
        return _experiment_converge(cfg, out_dir, jobs, want_obs=False)
    if experiment == "converge_obs":
        return _experiment_converge(cfg, out_dir, jobs, want_obs=True)
    if experiment == "conserve":
        return _experiment_conserve(cfg, out_dir, jobs)
    if experiment == "propagate":
        return _experiment_propagate(cfg, out_dir, jobs)
    if experiment == "egorov_check":
        return _experiment_egorov(cfg, out_dir, jobs)
    if experiment == "moments_selftest":
        return _experiment_moments_selftest(cfg, out_dir, jobs, seed=seed)
    raise ConfigError(f"experiment: unsupported '{experiment}'")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="magpack",
        description="Gaussian wave-packet experiments for magnetic Schrodinger dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the experiment config")
    p_run.add_argument("--out", default="out", help="output directory for CSV/SVG artifacts")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel jobs for eps sweeps")
    p_run.add_argument("--seed", type=int, default=12345, help="seed for randomized selftests")
    p_self = sub.add_parser("selftest", help="run the moments/packet/field invariant suites")
    p_self.add_argument("--seed", type=int, default=12345)
    p_self.add_argument("--out", default="out")
    args = parser.parse_args(argv)

    try:
        if args.command == "selftest":
            cfg = {"experiment": "moments_selftest", "field": {"name": "free"}, "packet": {}}
            code = _experiment_moments_selftest(cfg, Path(args.out), 1, seed=args.seed)
            code = max(code, _selftest_fields())
            return code
        cfg = load_config(args.config)
        return run(cfg, args.out, jobs=args.jobs, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _selftest_fields(seed=4242):
    """Gauge and finite-difference checks over the builtin catalog."""
    rng = np.random.default_rng(seed)
    catalog = [
        ("free", {"dim": 2, "A0": [0.3, -0.1]}),
        ("harmonic", {"omega": [1.0, 0.5]}),
        ("torsional", {"c": 0.8, "dim": 2}),
        ("constant_b_2d", {"B": 1.0, "omega": [1.0, 1.0]}),
        ("sine_field_2d", {"a": 0.2, "potential": {"kind": "torsional", "c": 1.0}}),
        ("combo_2d", {"a": 0.2, "potential": {"kind": "harmonic", "omega": [1.0, 1.0]},
                      "delta": 0.3, "omega_t": 1.5, "modulate": "both"}),
    ]
    bad = 0
    for name, params in catalog:
        fs = fl.builtin(name, params)
        pts = rng.uniform(-2, 2, size=(1000, fs.d))
        gauge = fs.validate_gauge(0.37, pts)
        worst_fd = max(fl.fd_check(fs, 0.37, rng.uniform(-1, 1, size=fs.d)).values())
        ok = gauge <= 1e-12 and worst_fd <= 1e-6
        print(f"  [{'PASS' if ok else 'FAIL'}] field {name}: div A = {gauge:.1e}, fd err = {worst_fd:.1e}")
        if not ok:
            bad += 1
    return 0 if bad == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
