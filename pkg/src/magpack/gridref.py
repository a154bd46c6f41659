"""Spectral reference solution of the magnetic Schrodinger equation on a periodic box.

The Hamiltonian acts matrix-free through FFTs,

    H(t) psi = -(eps^2/2) Lap psi + i eps A(t,x) . grad psi + Vt(t,x) psi,

and time stepping uses Lanczos (Krylov) approximation of the propagator with
the Hamiltonian frozen at the step midpoint.  A dense Weyl quantizer for
general one-dimensional symbols supports observable experiments beyond the
first-order class f(x) + g(x) . p.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft
from scipy.linalg import eigh_tridiagonal
from scipy.special import erfc

from magpack import packet as pk

__all__ = [
    "GridError",
    "Grid",
    "GridState",
    "sample",
    "apply_h",
    "propagate",
    "GridObservable",
    "observable_expect",
    "weyl_quantize_1d",
    "weyl_expectation",
    "l2_error",
    "pack_vs_grid_error",
    "write_psi_bin",
    "read_psi_bin",
]

_FFT_WORKERS = -1


class GridError(RuntimeError):
    """Grid construction or boundary-mass failures."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic box in d in {1, 2} dimensions.

    Per axis: center c, half-width L, and point count N (a power of two,
    N >= 16).  Points are x = c - L + h*j with spacing h = 2L/N; the right
    endpoint is excluded by periodicity.
    """

    centers: np.ndarray
    halfwidths: np.ndarray
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "centers", np.atleast_1d(np.asarray(self.centers, float)))
        object.__setattr__(self, "halfwidths", np.atleast_1d(np.asarray(self.halfwidths, float)))
        object.__setattr__(self, "shape", tuple(int(n) for n in np.atleast_1d(self.shape)))
        if not 1 <= self.d <= 2:
            raise GridError("grid dimension must be 1 or 2")
        for n in self.shape:
            if n < 16 or (n & (n - 1)) != 0:
                raise GridError(f"grid size must be a power of two >= 16, got {n}")
        if np.any(self.halfwidths <= 0):
            raise GridError("halfwidths must be positive")

    @property
    def d(self):
        return len(self.shape)

    @property
    def spacings(self):
        return 2.0 * self.halfwidths / np.asarray(self.shape)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacings))

    def axes(self):
        return [
            self.centers[j] - self.halfwidths[j] + self.spacings[j] * np.arange(self.shape[j])
            for j in range(self.d)
        ]

    def wavenumbers(self):
        return [
            2.0 * np.pi * sfft.fftfreq(self.shape[j], d=self.spacings[j]) for j in range(self.d)
        ]

    def points(self):
        """All grid points as an (n_total, d) array in row-major order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class GridState:
    """Complex wavefunction samples on a grid at time t."""

    psi: np.ndarray
    grid: Grid
    t: float = 0.0
    boundary_mass: float = 0.0

    def norm_squared(self):
        return float(np.sum(np.abs(self.psi) ** 2) * self.grid.cell_volume)

    def norm(self):
        return np.sqrt(self.norm_squared())

    def inner(self, other):
        """Discrete L2 inner product <self | other>."""
        return complex(np.vdot(self.psi, other.psi) * self.grid.cell_volume)

    def shell_mass(self, cells=2):
        """Fraction of mass in the outermost ``cells`` layers (boundary diagnostic)."""
        dens = np.abs(self.psi) ** 2
        mask = np.zeros_like(dens, dtype=bool)
        for axis in range(dens.ndim):
            sl = [slice(None)] * dens.ndim
            sl[axis] = slice(0, cells)
            mask[tuple(sl)] = True
            sl[axis] = slice(-cells, None)
            mask[tuple(sl)] = True
        total = dens.sum()
        return float(dens[mask].sum() / total) if total > 0 else 0.0


def estimated_boundary_mass(packet, grid):
    """Upper bound on the packet mass outside the box from Gaussian marginals."""
    if isinstance(packet, pk.HagedornPacket):
        packet = pk.width_from(packet)
    cov = 0.5 * packet.eps * np.linalg.inv(packet.C_im)
    est = 0.0
    for j in range(grid.d):
        sigma = np.sqrt(cov[j, j])
        dist = grid.halfwidths[j] - abs(packet.q[j] - grid.centers[j])
        if dist <= 0:
            return 1.0
        est += float(erfc(dist / (np.sqrt(2.0) * sigma)))
    return est


def sample(packet, grid, boundary_tol=1e-10):
    """Sample the packet on the grid; hard error if boundary mass may exceed tol."""
    if packet.d != grid.d:
        raise GridError("packet and grid dimensions differ")
    est = estimated_boundary_mass(packet, grid)
    if est > boundary_tol:
        raise GridError(
            f"box too small: estimated boundary mass {est:.3e} > {boundary_tol:.3e}"
        )
    vals = pk.evaluate(packet, grid.points()).reshape(grid.shape)
    return GridState(psi=vals, grid=grid, t=0.0, boundary_mass=est)


class HamiltonianApplier:
    """Matrix-free H(t) on a fixed grid with cached field arrays.

    ``freeze(t)`` evaluates A and Vt on the grid (skipped for time-independent
    fields after the first call); ``apply(psi)`` then applies the frozen
    Hamiltonian spectrally.
    """

    def __init__(self, grid, fields, eps):
        if fields.d != grid.d:
            raise GridError("field and grid dimensions differ")
        self.grid = grid
        self.fields = fields
        self.eps = eps
        ks = grid.wavenumbers()
        mesh = np.meshgrid(*ks, indexing="ij")
        self.lap_mult = 0.5 * eps**2 * sum(m**2 for m in mesh)
        self.grad_mult = [1j * m for m in mesh]
        self._pts = grid.points()
        self._t_frozen = None
        self.ia_mesh = None
        self.vt_mesh = None
        self._a_is_zero = True
        self._buf = np.empty(grid.shape, dtype=complex)

    def freeze(self, t):
        if self._t_frozen is not None and (not self.fields.time_dependent):
            return
        if self._t_frozen == t:
            return
        a = self.fields.A(t, self._pts)
        self.ia_mesh = [
            (1j * self.eps) * a[:, j].reshape(self.grid.shape) for j in range(self.grid.d)
        ]
        self.vt_mesh = self.fields.Vt(t, self._pts).reshape(self.grid.shape)
        self._a_is_zero = all(np.all(am == 0.0) for am in self.ia_mesh)
        self._t_frozen = t

    def apply(self, psi):
        hat = sfft.fftn(psi, workers=_FFT_WORKERS)
        np.multiply(self.lap_mult, hat, out=self._buf)
        out = sfft.ifftn(self._buf, workers=_FFT_WORKERS)
        if not self._a_is_zero:
            for j in range(self.grid.d):
                np.multiply(self.grad_mult[j], hat, out=self._buf)
                grad_j = sfft.ifftn(self._buf, overwrite_x=True, workers=_FFT_WORKERS)
                grad_j *= self.ia_mesh[j]
                out += grad_j
        np.multiply(self.vt_mesh, psi, out=self._buf)
        out += self._buf
        return out


def apply_h(t, state, fields, eps):
    """Apply the Hamiltonian at time t to a grid state (one-shot convenience)."""
    ap = HamiltonianApplier(state.grid, fields, eps)
    ap.freeze(t)
    return GridState(psi=ap.apply(state.psi), grid=state.grid, t=state.t)


class _LanczosWorkspace:
    """Reusable Krylov basis storage and the exp step on a frozen Hamiltonian."""

    def __init__(self, size, m):
        self.V = np.empty((m, size), dtype=complex)
        self.m = m

    def step(self, apply_fn, psi, tau, eps):
        """One Lanczos approximation of exp(-i tau H / eps) psi.

        Returns (psi_new, residual_estimate).  The tridiagonal matrix is real
        symmetric because H is Hermitian; the residual estimate is the
        classical beta_m |exp(-i tau T/eps)_{m,1}| term.
        """
        shape = psi.shape
        m = self.m
        v = psi.ravel()
        beta0 = np.linalg.norm(v)
        if beta0 == 0.0:
            return psi, 0.0
        V = self.V
        alpha = np.zeros(m)
        beta = np.zeros(m)
        np.divide(v, beta0, out=V[0])
        used = m
        happy = False
        for j in range(m):
            w = apply_fn(V[j].reshape(shape)).ravel()
            if j > 0:
                w -= beta[j - 1] * V[j - 1]
            alpha[j] = np.vdot(V[j], w).real
            w -= alpha[j] * V[j]
            b = np.linalg.norm(w)
            beta[j] = b
            if j + 1 < m:
                if b < 1e-14 * beta0:
                    used = j + 1
                    happy = True
                    break
                np.divide(w, b, out=V[j + 1])
        evals, evecs = eigh_tridiagonal(alpha[:used], beta[: used - 1])
        phases = np.exp(-1j * tau / eps * evals)
        small = evecs @ (phases * evecs[0])
        psi_new = (V[:used].T @ (beta0 * small)).reshape(shape)
        resid = 0.0 if happy else float(beta[used - 1] * abs(small[used - 1]))
        return psi_new, resid


def _spectral_radius_estimate(grid, fields, eps, t):
    """Rough upper bound on ||H/eps|| used to seed the Krylov step size."""
    ks = grid.wavenumbers()
    ksq = sum(float(np.max(np.abs(k))) ** 2 for k in ks)
    kmax = max(float(np.max(np.abs(k))) for k in ks)
    pts = grid.points()
    vmax = float(np.max(np.abs(fields.Vt(t, pts))))
    amax = float(np.max(np.linalg.norm(fields.A(t, pts), axis=1)))
    return 0.5 * eps * ksq + vmax / eps + kmax * amax


def propagate(
    state,
    fields,
    eps,
    t0,
    t1,
    dt=None,
    krylov_dim=32,
    step_tol=1e-12,
    boundary_tol=None,
    max_halvings=40,
):
    """Propagate a grid state from t0 to t1 with midpoint-frozen Krylov steps.

    Each step applies exp(-i dt H(t + dt/2) / eps) by a Lanczos approximation
    of dimension ``krylov_dim``; the step is halved until the Krylov residual
    estimate falls below ``step_tol`` (relative to the state norm).  The step
    size then grows again gently, so ``dt`` only seeds the first attempt; when
    not given it is seeded from a spectral-radius estimate of H/eps.
    """
    if not 8 <= krylov_dim <= 64:
        raise GridError("krylov_dim must lie in [8, 64]")
    if t1 <= t0:
        raise GridError("t1 must exceed t0")
    ap = HamiltonianApplier(state.grid, fields, eps)
    psi = state.psi.copy()
    norm0 = np.linalg.norm(psi)
    t = t0
    span = t1 - t0
    if dt is None:
        radius = _spectral_radius_estimate(state.grid, fields, eps, t0 + 0.5 * span)
        dt = krylov_dim**2 / (80.0 * max(radius, 1.0))
    dt = min(float(dt), span)
    work = _LanczosWorkspace(psi.size, krylov_dim)
    budget = step_tol * norm0
    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        tau = min(dt, t1 - t)
        for attempt in range(max_halvings + 1):
            ap.freeze(t + 0.5 * tau)
            psi_new, resid = work.step(ap.apply, psi, tau, eps)
            if resid <= budget:
                break
            if attempt == max_halvings:
                raise GridError("Krylov residual stagnation: step halved to underflow")
            # residual scales roughly like tau^m: shrink predictively
            fac = 0.85 * (budget / resid) ** (1.0 / krylov_dim)
            tau *= max(0.3, min(0.9, fac))
        if not np.all(np.isfinite(psi_new.real)):
            raise GridError("NaN detected during propagation")
        psi = psi_new
        t += tau
        if resid > 0.0:
            fac = 0.85 * (budget / resid) ** (1.0 / krylov_dim)
            dt = tau * min(1.6, max(0.5, fac))
        else:
            dt = tau * 1.6
        if boundary_tol is not None:
            shell = GridState(psi=psi, grid=state.grid, t=t).shell_mass()
            if shell > boundary_tol:
                raise GridError(f"boundary mass {shell:.3e} exceeded {boundary_tol:.3e} at t={t:.4g}")
    return GridState(psi=psi, grid=state.grid, t=t1, boundary_mass=state.boundary_mass)


@dataclass(frozen=True)
class GridObservable:
    """First-order observable f(x) + g(x) . p with divergence-free g.

    ``f`` and ``g`` are callables of (m, d) point arrays (or None).  When g is
    not divergence-free, set ``symmetrize=True`` to use the symmetric ordering
    (g . D + D . g)/2; otherwise the one-sided form g . D is exact.
    """

    name: str
    f: Optional[Callable] = None
    g: Optional[Callable] = None
    divergence_free: bool = True
    symmetrize: bool = False

    @staticmethod
    def position(axis, d):
        return GridObservable(name=f"q{axis + 1}", f=lambda X: X[:, axis].copy())

    @staticmethod
    def momentum(axis, d):
        g = np.eye(d)[axis]
        return GridObservable(name=f"p{axis + 1}", g=lambda X: np.broadcast_to(g, X.shape).copy())

    @staticmethod
    def kinetic(d=None):
        # f = g = None marks |p|^2, applied spectrally as -eps^2 Laplacian
        return GridObservable(name="|p|^2", f=None, g=None)

    @staticmethod
    def angular_momentum():
        """L = x1 p2 - x2 p1 in d = 2; g = (-x2, x1) is divergence-free."""

        def g(X):
            return np.stack([-X[:, 1], X[:, 0]], axis=-1)

        return GridObservable(name="Lz", g=g)


def observable_expect(state, obs, eps):
    """Real expectation value <psi | f psi + g . (-i eps grad) psi> on the grid.

    The kinetic observable |p|^2 (f = None, g = None) is applied as
    -eps^2 Laplacian.
    """
    grid = state.grid
    psi = state.psi
    vol = grid.cell_volume
    pts = grid.points()
    hat = sfft.fftn(psi, workers=_FFT_WORKERS)
    ks = np.meshgrid(*grid.wavenumbers(), indexing="ij")

    if obs.f is None and obs.g is None:
        ksq = sum(k**2 for k in ks)
        op_psi = sfft.ifftn(eps**2 * ksq * hat, workers=_FFT_WORKERS)
        return float(np.real(np.vdot(psi, op_psi) * vol))

    acc = np.zeros_like(psi)
    if obs.f is not None:
        acc = acc + np.asarray(obs.f(pts)).reshape(grid.shape) * psi
    if obs.g is not None:
        gvals = np.asarray(obs.g(pts))
        if not obs.divergence_free and not obs.symmetrize:
            raise GridError(
                f"observable '{obs.name}': non-divergence-free g requires symmetrize=True"
            )
        for j in range(grid.d):
            gj = gvals[:, j].reshape(grid.shape)
            dpsi = sfft.ifftn(1j * ks[j] * hat, workers=_FFT_WORKERS)
            if obs.symmetrize:
                acc = acc + 0.5 * (-1j * eps) * gj * dpsi
                acc = acc + 0.5 * sfft.ifftn(
                    1j * ks[j] * sfft.fftn(-1j * eps * gj * psi, workers=_FFT_WORKERS),
                    workers=_FFT_WORKERS,
                )
            else:
                acc = acc + gj * (-1j * eps) * dpsi
    return float(np.real(np.vdot(psi, acc) * vol))


def weyl_quantize_1d(a, grid, eps, t=0.0):
    """Dense Weyl quantization of a one-dimensional symbol on the grid.

    Returns the N x N matrix K with

        K[i, j] = (1/2L) sum_m a((x_i + x_j)/2, eps k_m) exp(i k_m (x_i - x_j)),

    the periodic discretization of the kernel
    (2 pi eps)^{-1} int a((x+y)/2, p) e^{i p (x-y)/eps} dp over the grid's
    dual lattice p = eps k.  Apply a state via ``h * K @ psi``.
    """
    if grid.d != 1:
        raise GridError("weyl_quantize_1d requires a one-dimensional grid")
    n = grid.shape[0]
    if n > 2048:
        raise GridError("weyl_quantize_1d limited to N <= 2048")
    x = grid.axes()[0]
    k = grid.wavenumbers()[0]
    half_l = grid.halfwidths[0]
    h = grid.spacings[0]
    mids = x[0] + 0.5 * h * np.arange(2 * n - 1)
    value = getattr(a, "value", a)
    zz = np.empty((mids.size * n, 2))
    zz[:, 0] = np.repeat(mids, n)
    zz[:, 1] = np.tile(eps * k, mids.size)
    sym = np.asarray(value(t, zz)).reshape(mids.size, n).astype(complex)
    # F[l, r] = sum_m sym[l, m] e^{2 pi i m r / N} = N * ifft along m
    f_tab = n * sfft.ifft(sym, axis=1, workers=_FFT_WORKERS)
    i_idx = np.arange(n)
    lag = (i_idx[:, None] - i_idx[None, :]) % n
    mid_idx = i_idx[:, None] + i_idx[None, :]
    kern = f_tab[mid_idx, lag] / (2.0 * half_l)
    return kern


def weyl_expectation(state, kern):
    """Expectation <psi | op psi> for a dense 1d Weyl matrix from weyl_quantize_1d."""
    h = state.grid.spacings[0]
    op_psi = h * (kern @ state.psi)
    return float(np.real(np.vdot(state.psi, op_psi) * h))


def l2_error(state_a, state_b):
    """Discrete L2 norm of the difference of two states on matching grids."""
    if state_a.grid.shape != state_b.grid.shape:
        raise GridError("grid shape mismatch")
    return float(
        np.sqrt(np.sum(np.abs(state_a.psi - state_b.psi) ** 2) * state_a.grid.cell_volume)
    )


def pack_vs_grid_error(packet, state, boundary_tol=1e-8):
    """L2 distance between a sampled packet and a grid state."""
    ref = sample(packet, state.grid, boundary_tol=boundary_tol)
    return l2_error(ref, state)


def write_psi_bin(state, path):
    """Binary dump: int32 d, int32 N per axis, float64 L per axis, float64 t,
    then interleaved re/im float64 pairs in row-major order (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<i", state.grid.d))
        for nax in state.grid.shape:
            fh.write(struct.pack("<i", nax))
        for lax in state.grid.halfwidths:
            fh.write(struct.pack("<d", float(lax)))
        fh.write(struct.pack("<d", float(state.t)))
        inter = np.empty(state.psi.size * 2)
        inter[0::2] = state.psi.real.ravel()
        inter[1::2] = state.psi.imag.ravel()
        fh.write(inter.astype("<f8").tobytes())


def read_psi_bin(path, centers=None):
    """Read a binary dump written by :func:`write_psi_bin`.

    Box centers are not part of the dump format; pass them explicitly when the
    box was not centered at the origin.
    """
    with open(path, "rb") as fh:
        d = struct.unpack("<i", fh.read(4))[0]
        shape = tuple(struct.unpack("<i", fh.read(4))[0] for _ in range(d))
        hws = [struct.unpack("<d", fh.read(8))[0] for _ in range(d)]
        t = struct.unpack("<d", fh.read(8))[0]
        data = np.frombuffer(fh.read(), dtype="<f8")
    psi = (data[0::2] + 1j * data[1::2]).reshape(shape)
    grid = Grid(
        centers=np.zeros(d) if centers is None else np.asarray(centers, float),
        halfwidths=np.asarray(hws),
        shape=shape,
    )
    return GridState(psi=psi, grid=grid, t=t)
