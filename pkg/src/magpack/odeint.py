"""Time integration of the parameter ODE systems.

Provides a fixed-step classical Runge-Kutta method and an adaptive embedded
Dormand-Prince 5(4) pair with PI step-size control, state packing for the
width-form and factorized systems (symmetric matrices are stored triangle-only
so Runge-Kutta arithmetic cannot break symmetry), per-step monitors, and dense
sampling via cubic Hermite interpolation on accepted steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import numpy as np

from magpack import fields as fl
from magpack import moments as mo
from magpack import motion as mt
from magpack import packet as pk

__all__ = [
    "IntegrationError",
    "MonitorViolation",
    "Trajectory",
    "integrate",
    "VariationalPacker",
    "HagedornPacker",
    "variational_system",
    "hagedorn_system",
    "MonitorThresholds",
    "trajectory_to_csv",
]


class IntegrationError(RuntimeError):
    """Step-size underflow, NaN states, or other integrator failures."""


class MonitorViolation(IntegrationError):
    """A runtime threshold was crossed during integration."""

    def __init__(self, t, name, value, threshold):
        self.t = t
        self.name = name
        self.value = value
        self.threshold = threshold
        super().__init__(
            f"monitor violation at t={t:.6g}: {name} = {value:.6g} (threshold {threshold:.6g})"
        )


@dataclass
class Trajectory:
    """Sampled solution of a parameter ODE system with per-sample diagnostics."""

    times: np.ndarray
    states: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise IntegrationError("trajectory sample times must be strictly increasing")

    @property
    def final_state(self):
        return self.states[-1]


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) tableau

_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_DP_B5 = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
_DP_B4 = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]


def _hermite(t, t0, t1, y0, y1, f0, f1):
    """Cubic Hermite interpolation on one accepted step."""
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s**2 * (3 - 2 * s)
    h11 = s**2 * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


class _Sampler:
    """Collects states at requested times as accepted steps come in."""

    def __init__(self, sample_times, diagnostics):
        self.sample_times = np.asarray(sample_times, dtype=float)
        self.diag_fn = diagnostics
        self.states = []
        self.diags = []
        self.next = 0

    def start(self, t0, y0):
        while self.next < len(self.sample_times) and np.isclose(
            self.sample_times[self.next], t0, rtol=0.0, atol=1e-14 * max(1.0, abs(t0))
        ):
            self._record(t0, y0)

    def step(self, t0, t1, y0, y1, f0, f1):
        while self.next < len(self.sample_times):
            ts = self.sample_times[self.next]
            if ts > t1 + 1e-14 * max(1.0, abs(t1)):
                break
            if np.isclose(ts, t1, rtol=0.0, atol=1e-14 * max(1.0, abs(t1))):
                self._record(ts, y1)
            else:
                self._record(ts, _hermite(ts, t0, t1, y0, y1, f0, f1))

    def _record(self, t, y):
        self.states.append(np.array(y))
        if self.diag_fn is not None:
            self.diags.append(self.diag_fn(t, y))
        self.next += 1

    def finish(self):
        diagnostics = {}
        if self.diag_fn is not None and self.diags:
            keys = self.diags[0].keys()
            diagnostics = {k: np.array([d[k] for d in self.diags]) for k in keys}
        return Trajectory(
            times=self.sample_times.copy(),
            states=np.array(self.states),
            diagnostics=diagnostics,
        )


def integrate(
    rhs,
    state0,
    t0,
    t1,
    method="dp54_adaptive",
    tol=1e-10,
    step=None,
    sample_times=None,
    monitor=None,
    diagnostics=None,
    max_steps=50_000_000,
):
    """Integrate y' = rhs(t, y) from t0 to t1 and sample at the requested times.

    ``method`` is ``"rk4_fixed"`` (requires ``step``) or ``"dp54_adaptive"``
    (requires ``tol``).  ``monitor(t, y)`` is called at every accepted step and
    may raise :class:`MonitorViolation`.  ``diagnostics(t, y)`` returns a dict
    of floats recorded at sample times.  Dense output between accepted steps
    uses cubic Hermite interpolation.
    """
    if t1 <= t0:
        raise IntegrationError("t1 must exceed t0")
    y = np.array(state0, dtype=float)
    if sample_times is None:
        sample_times = np.array([t0, t1])
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times.size and (sample_times[0] < t0 - 1e-12 or sample_times[-1] > t1 + 1e-12):
        raise IntegrationError("sample times outside integration interval")

    sampler = _Sampler(sample_times, diagnostics)
    if monitor is not None:
        monitor(t0, y)
    sampler.start(t0, y)

    if method == "rk4_fixed":
        if step is None or step <= 0:
            raise IntegrationError("rk4_fixed requires a positive step")
        return _run_rk4(rhs, y, t0, t1, step, sampler, monitor, max_steps)
    if method == "dp54_adaptive":
        if tol is None or tol <= 0:
            raise IntegrationError("dp54_adaptive requires a positive tol")
        return _run_dp54(rhs, y, t0, t1, tol, sampler, monitor, max_steps)
    raise IntegrationError(f"unknown method '{method}'")


def _run_rk4(rhs, y, t0, t1, step, sampler, monitor, max_steps):
    t = t0
    f_now = np.asarray(rhs(t, y))
    nsteps = 0
    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        nsteps += 1
        if nsteps > max_steps:
            raise IntegrationError("rk4 exceeded max_steps")
        h = min(step, t1 - t)
        k1 = f_now
        k2 = np.asarray(rhs(t + 0.5 * h, y + 0.5 * h * k1))
        k3 = np.asarray(rhs(t + 0.5 * h, y + 0.5 * h * k2))
        k4 = np.asarray(rhs(t + h, y + h * k3))
        y_new = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t_new = min(t + h, t1)
        f_new = np.asarray(rhs(t_new, y_new))
        if monitor is not None:
            monitor(t_new, y_new)
        sampler.step(t, t_new, y, y_new, k1, f_new)
        t, y, f_now = t_new, y_new, f_new
    return sampler.finish()


def _run_dp54(rhs, y, t0, t1, tol, sampler, monitor, max_steps):
    t = t0
    span = t1 - t0
    h_min = 1e-12 * span
    f_now = np.asarray(rhs(t, y))
    # initial step from the scale of the right-hand side
    scale = np.linalg.norm(f_now) / max(1.0, np.linalg.norm(y))
    h = min(span, max(h_min, 0.01 / max(scale, 1e-8)))
    err_prev = 1.0
    alpha, beta = 0.7 / 5.0, 0.4 / 5.0
    nsteps = 0
    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        nsteps += 1
        if nsteps > max_steps:
            raise IntegrationError("dp54 exceeded max_steps")
        h = min(h, t1 - t)
        if h < h_min:
            raise IntegrationError(f"dp54 step underflow at t={t:.6g} (h={h:.3e})")
        k = [f_now]
        for i in range(1, 7):
            yi = y + h * sum(a * kk for a, kk in zip(_DP_A[i], k))
            k.append(np.asarray(rhs(t + _DP_C[i] * h, yi)))
        y5 = y + h * sum(b * kk for b, kk in zip(_DP_B5, k))
        y4 = y + h * sum(b * kk for b, kk in zip(_DP_B4, k))
        sc = tol * np.maximum(1.0, np.maximum(np.abs(y), np.abs(y5)))
        err = np.sqrt(np.mean(((y5 - y4) / sc) ** 2))
        if not np.isfinite(err):
            h *= 0.25
            continue
        err = max(err, 1e-14)
        if err <= 1.0:
            t_new = t + h
            f_new = k[6]  # FSAL: last stage is rhs at (t+h, y5)
            if monitor is not None:
                monitor(t_new, y5)
            sampler.step(t, t_new, y, y5, k[0], f_new)
            t, y, f_now = t_new, y5, f_new
            fac = 0.9 * err ** (-alpha) * err_prev**beta
            err_prev = max(err, 1e-10)
            h *= min(5.0, max(0.2, fac))
        else:
            h *= min(1.0, max(0.2, 0.9 * err ** (-alpha)))
    return sampler.finish()


# ---------------------------------------------------------------------------
# State packing


def _triu_pack(m):
    d = m.shape[0]
    iu = np.triu_indices(d)
    return m[iu]


def _triu_unpack(v, d):
    m = np.zeros((d, d), dtype=v.dtype)
    iu = np.triu_indices(d)
    m[iu] = v
    m = m + m.T - np.diag(np.diag(m))
    return m


@dataclass(frozen=True)
class VariationalPacker:
    """Flat layout (q, p, triu Re C, triu Im C, Re zeta, Im zeta)."""

    d: int
    tag = "variational"

    @property
    def size(self):
        k = self.d * (self.d + 1) // 2
        return 2 * self.d + 2 * k + 2

    def pack(self, q, p, C, zeta):
        C = np.asarray(C, dtype=complex)
        return np.concatenate(
            [
                np.asarray(q, float),
                np.asarray(p, float),
                _triu_pack(C.real),
                _triu_pack(C.imag),
                [np.real(zeta), np.imag(zeta)],
            ]
        )

    def unpack(self, y):
        d = self.d
        k = d * (d + 1) // 2
        q = y[:d]
        p = y[d : 2 * d]
        cr = _triu_unpack(y[2 * d : 2 * d + k], d)
        ci = _triu_unpack(y[2 * d + k : 2 * d + 2 * k], d)
        zeta = complex(y[-2], y[-1])
        return q, p, cr + 1j * ci, zeta

    def pack_packet(self, packet):
        return self.pack(packet.q, packet.p, packet.C, packet.zeta)

    def packet(self, y, eps):
        q, p, C, zeta = self.unpack(y)
        return pk.GaussianPacket(eps=eps, q=q, p=p, C=C, zeta=zeta)


@dataclass(frozen=True)
class HagedornPacker:
    """Flat layout (q, p, Re Q, Im Q, Re P, Im P row-major, Re zeta, Im zeta)."""

    d: int
    tag = "hagedorn"

    @property
    def size(self):
        return 2 * self.d + 4 * self.d * self.d + 2

    def pack(self, q, p, Q, P, zeta):
        Q = np.asarray(Q, complex)
        P = np.asarray(P, complex)
        return np.concatenate(
            [
                np.asarray(q, float),
                np.asarray(p, float),
                Q.real.ravel(),
                Q.imag.ravel(),
                P.real.ravel(),
                P.imag.ravel(),
                [np.real(zeta), np.imag(zeta)],
            ]
        )

    def unpack(self, y):
        d = self.d
        n = d * d
        q = y[:d]
        p = y[d : 2 * d]
        o = 2 * d
        Q = (y[o : o + n] + 1j * y[o + n : o + 2 * n]).reshape(d, d)
        P = (y[o + 2 * n : o + 3 * n] + 1j * y[o + 3 * n : o + 4 * n]).reshape(d, d)
        zeta = complex(y[-2], y[-1])
        return q, p, Q, P, zeta

    def pack_packet(self, packet):
        return self.pack(packet.q, packet.p, packet.Q, packet.P, packet.zeta)

    def packet(self, y, eps):
        q, p, Q, P, zeta = self.unpack(y)
        return pk.HagedornPacket(eps=eps, q=q, p=p, Q=Q, P=P, zeta=zeta)


@dataclass(frozen=True)
class MonitorThresholds:
    """Runtime bounds checked at every accepted step."""

    max_center: float = 1e3
    max_width: float = 1e3
    rho_min: float = 1e-6
    max_symplectic_defect: float = 1e-6


def variational_system(fields, eps, quad_order=20, thresholds=None, with_energy=False):
    """Flat rhs, monitor, and diagnostics callbacks for the width-form system."""
    thresholds = thresholds or MonitorThresholds()
    packer = VariationalPacker(fields.d)
    h_sym = fl.hamiltonian_symbol(fields)

    def rhs(t, y):
        q, p, C, zeta = packer.unpack(y)
        state = mt.VariationalState(t=t, q=q, p=p, C=C, zeta=zeta)
        qd, pd, cd, zd = mt.rhs_variational(
            t, state, fields, eps, quad_order, rho_min=thresholds.rho_min
        )
        return packer.pack(qd, pd, cd, zd)

    def monitor(t, y):
        q, p, C, _ = packer.unpack(y)
        center = max(np.abs(q).max(), np.abs(p).max())
        if center > thresholds.max_center:
            raise MonitorViolation(t, "max|q|,|p|", center, thresholds.max_center)
        width = np.linalg.norm(C)
        if width > thresholds.max_width:
            raise MonitorViolation(t, "||C||_F", width, thresholds.max_width)
        lam = np.linalg.eigvalsh(C.imag).min()
        if lam < thresholds.rho_min:
            raise MonitorViolation(t, "min eig Im C", lam, thresholds.rho_min)

    def diagnostics(t, y):
        packet = packer.packet(y, eps)
        out = {
            "norm": np.sqrt(pk.norm_squared(packet)),
            "min_eig_ci": float(np.linalg.eigvalsh(packet.C_im).min()),
            "symp_defect": 0.0,
        }
        if with_energy:
            out["energy"] = float(
                mo.wigner_average(packet, h_sym, t=t, order=quad_order, check_norm=False)
            )
        return out

    return packer, rhs, monitor, diagnostics


def hagedorn_system(fields, eps, quad_order=20, thresholds=None, with_energy=False):
    """Flat rhs, monitor, and diagnostics callbacks for the factorized system."""
    thresholds = thresholds or MonitorThresholds()
    packer = HagedornPacker(fields.d)
    h_sym = fl.hamiltonian_symbol(fields)

    def rhs(t, y):
        q, p, Q, P, zeta = packer.unpack(y)
        state = mt.HagedornState(t=t, q=q, p=p, Q=Q, P=P, zeta=zeta)
        qd, pd, qmd, pmd, zd = mt.rhs_hagedorn(
            t, state, fields, eps, quad_order, rho_min=thresholds.rho_min
        )
        return packer.pack(qd, pd, qmd, pmd, zd)

    def monitor(t, y):
        q, p, Q, P, _ = packer.unpack(y)
        center = max(np.abs(q).max(), np.abs(p).max())
        if center > thresholds.max_center:
            raise MonitorViolation(t, "max|q|,|p|", center, thresholds.max_center)
        hp = pk.HagedornPacket(eps=eps, q=q, p=p, Q=Q, P=P)
        d1, d2 = hp.symplectic_defects()
        defect = max(d1, d2)
        if defect > thresholds.max_symplectic_defect:
            raise MonitorViolation(t, "symplectic defect", defect, thresholds.max_symplectic_defect)
        C = np.linalg.solve(Q.T, P.T).T
        lam = np.linalg.eigvalsh(C.imag).min()
        if lam < thresholds.rho_min:
            raise MonitorViolation(t, "min eig Im C", lam, thresholds.rho_min)

    def diagnostics(t, y):
        hp = packer.packet(y, eps)
        d1, d2 = hp.symplectic_defects()
        g = pk.width_from(hp)
        out = {
            "norm": np.sqrt(pk.norm_squared(g)),
            "min_eig_ci": float(np.linalg.eigvalsh(g.C_im).min()),
            "symp_defect": max(d1, d2),
        }
        if with_energy:
            out["energy"] = float(
                mo.wigner_average(g, h_sym, t=t, order=quad_order, check_norm=False)
            )
        return out

    return packer, rhs, monitor, diagnostics


def trajectory_to_csv(traj, packer, eps, path, meta=""):
    """Write a trajectory in the flat CSV schema.

    Columns: t, q_*, p_*, ReC_*, ImC_* (upper triangle, row-major), Re zeta,
    Im zeta, norm, minEig, energy, sympDefect.  Hagedorn trajectories are
    exported through C = P Q^{-1}.
    """
    d = packer.d
    iu = list(zip(*np.triu_indices(d)))
    cols = ["t"]
    cols += [f"q{i + 1}" for i in range(d)]
    cols += [f"p{i + 1}" for i in range(d)]
    cols += [f"ReC{i + 1}{j + 1}" for i, j in iu]
    cols += [f"ImC{i + 1}{j + 1}" for i, j in iu]
    cols += ["Re_zeta", "Im_zeta", "norm", "minEig", "energy", "sympDefect"]
    diag = traj.diagnostics
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i, (t, y) in enumerate(zip(traj.times, traj.states)):
            if isinstance(packer, HagedornPacker):
                q, p, Q, P, zeta = packer.unpack(y)
                C = np.linalg.solve(Q.T, P.T).T
            else:
                q, p, C, zeta = packer.unpack(y)
            row = [repr(float(t))]
            row += [repr(float(v)) for v in q]
            row += [repr(float(v)) for v in p]
            row += [repr(float(C.real[a, b])) for a, b in iu]
            row += [repr(float(C.imag[a, b])) for a, b in iu]
            row += [repr(float(np.real(zeta))), repr(float(np.imag(zeta)))]
            for key in ("norm", "min_eig_ci", "energy", "symp_defect"):
                row.append(repr(float(diag[key][i])) if key in diag else "")
            writer.writerow(row)
