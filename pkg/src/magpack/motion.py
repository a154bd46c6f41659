"""Equations of motion for the packet parameters, projection, and remainder diagnostics.

Width form (config-space averages <.> weighted by |u|^2, M = Cr Ci^{-1},
T(x) = tr(JA(x) M)):

    qdot = p - <A>
    pdot = (eps/2) <grad T> + <JA> p - <grad Vt>
    Cdot = -C^2 + <D2_{A,p}> + <JA> C + C <JA>^T - <hess Vt> + (eps/2) <hess T>
    zetadot = |p|^2/2 + (eps/2) <T> + (i eps/2) tr C
              - (eps/4) tr( Ci^{-1} ( (eps/2) <hess T> + <JA> Cr + Cr <JA>^T + <D2_{A,p}> ) )
              - <Vt> + (eps/4) tr( Ci^{-1} <hess Vt> )

Hagedorn form: Qdot = P - <JA>^T Q and Pdot = <JA> P + S Q with the symmetric
S = (eps/2)<hess T> + <D2_{A,p}> - <hess Vt>; this reproduces Cdot for
C = P Q^{-1} and conserves the symplectic relations exactly.

General form (phase-space averages <.>_W against the Wigner function):

    qdot = <grad_p h>,  pdot = -<grad_q h>,  Cdot = -B,
    zetadot = -<h> + (eps/4) tr(B Ci^{-1}) + p . <grad_p h>,

with B = (Id  C) <hess h>_W (Id ; C).  The two forms agree for the magnetic
Hamiltonian; that agreement is the transcription guard for the long phase
equation and for all Jacobian-transpose conventions.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable

import numpy as np

from magpack import moments as mo
from magpack import packet as pk

__all__ = [
    "VariationalState",
    "HagedornState",
    "ProjectionPolynomial",
    "RemainderDiagnostics",
    "rhs_variational",
    "rhs_hagedorn",
    "rhs_general",
    "projection_poly",
    "classical_rhs",
    "linearized_rhs",
    "remainder_potential",
    "field_averages",
]

DEFAULT_RHO_MIN = 1e-6


@dataclass(frozen=True)
class VariationalState:
    """Parameters (q, p, C, zeta) of the width-form system at time t."""

    t: float
    q: np.ndarray
    p: np.ndarray
    C: np.ndarray
    zeta: complex

    def packet(self, eps):
        return pk.GaussianPacket(eps=eps, q=self.q, p=self.p, C=self.C, zeta=self.zeta)


@dataclass(frozen=True)
class HagedornState:
    """Parameters (q, p, Q, P, zeta) of the factorized system at time t."""

    t: float
    q: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    zeta: complex

    def packet(self, eps):
        return pk.HagedornPacket(eps=eps, q=self.q, p=self.p, Q=self.Q, P=self.P, zeta=self.zeta)


def _check_width(C, rho_min):
    ci = np.asarray(C).imag
    lam = np.linalg.eigvalsh(ci).min()
    if lam < rho_min:
        raise pk.PacketError(
            f"width degenerated: min eig Im C = {lam:.3e} < rho_min = {rho_min:.3e}"
        )


def field_averages(t, q, C, fields, eps, order=20):
    """All configuration-space field averages needed by the right-hand sides.

    One shared quadrature sweep evaluates A, JA, D2 A, D3 A, Vt and its first
    two derivatives at the Gauss-Hermite points of |u|^2 and contracts the
    trace terms with M = Cr Ci^{-1}.  Returns a namespace with entries
    A, JA, gradVt, hessVt, Vt, T, gradT, hessT, D2A (the raw averaged
    second-derivative tensor of A, to be contracted with p by the caller).
    """
    d = len(q)
    ci_inv = np.linalg.inv(np.asarray(C).imag)
    m_mat = np.asarray(C).real @ ci_inv
    rule = mo.gauss_hermite(d, order)
    pts = rule.points(np.asarray(q, dtype=float), 0.5 * eps * ci_inv)

    a = fields.A(t, pts)
    ja = fields.JA(t, pts)
    a2 = fields.A_d2(t, pts)
    a3 = fields.A_d3(t, pts)

    w = rule.weights
    avg = SimpleNamespace()
    avg.A = w @ a
    avg.JA = np.tensordot(w, ja, axes=(0, 0))
    avg.D2A = np.tensordot(w, a2, axes=(0, 0))  # [k, i, j] = <d_i d_j A_k>
    avg.gradVt = w @ fields.gradVt(t, pts)
    avg.hessVt = np.tensordot(w, fields.hessVt(t, pts), axes=(0, 0))
    avg.Vt = float(w @ fields.Vt(t, pts))
    avg.T = float(w @ np.einsum("xjk,kj->x", ja, m_mat))
    avg.gradT = np.einsum("xkij,kj->xi", a2, m_mat).T @ w
    avg.hessT = np.tensordot(w, np.einsum("xkabj,kj->xab", a3, m_mat), axes=(0, 0))
    return avg


def rhs_variational(t, state, fields, eps, quad_order=20, rho_min=DEFAULT_RHO_MIN):
    """Right-hand side (qdot, pdot, Cdot, zetadot) of the width-form system."""
    q, p, C = state.q, state.p, state.C
    _check_width(C, rho_min)
    av = field_averages(t, q, C, fields, eps, quad_order)
    d2ap = np.einsum("kij,k->ij", av.D2A, p)
    ci_inv = np.linalg.inv(C.imag)
    cr = C.real

    qdot = p - av.A
    pdot = 0.5 * eps * av.gradT + av.JA @ p - av.gradVt
    s_mat = 0.5 * eps * av.hessT + d2ap - av.hessVt
    cdot = -C @ C + av.JA @ C + C @ av.JA.T + s_mat
    inner = 0.5 * eps * av.hessT + av.JA @ cr + cr @ av.JA.T + d2ap
    zetadot = (
        0.5 * float(p @ p)
        + 0.5 * eps * av.T
        + 0.5j * eps * np.trace(C)
        - 0.25 * eps * np.trace(ci_inv @ inner)
        - av.Vt
        + 0.25 * eps * np.trace(ci_inv @ av.hessVt)
    )
    return qdot, pdot, cdot, complex(zetadot)


def rhs_hagedorn(t, state, fields, eps, quad_order=20, rho_min=DEFAULT_RHO_MIN, cond_max=1e12):
    """Right-hand side (qdot, pdot, Qdot, Pdot, zetadot) of the factorized system."""
    if np.linalg.cond(state.Q) > cond_max:
        raise pk.PacketError("Q is numerically singular")
    C = np.linalg.solve(state.Q.T, state.P.T).T
    C = 0.5 * (C + C.T)
    _check_width(C, rho_min)
    q, p = state.q, state.p
    av = field_averages(t, q, C, fields, eps, quad_order)
    d2ap = np.einsum("kij,k->ij", av.D2A, p)
    ci_inv = np.linalg.inv(C.imag)
    cr = C.real

    qdot = p - av.A
    pdot = 0.5 * eps * av.gradT + av.JA @ p - av.gradVt
    s_mat = 0.5 * eps * av.hessT + d2ap - av.hessVt
    qmat_dot = state.P - av.JA.T @ state.Q
    pmat_dot = av.JA @ state.P + s_mat @ state.Q
    inner = 0.5 * eps * av.hessT + av.JA @ cr + cr @ av.JA.T + d2ap
    zetadot = (
        0.5 * float(p @ p)
        + 0.5 * eps * av.T
        + 0.5j * eps * np.trace(C)
        - 0.25 * eps * np.trace(ci_inv @ inner)
        - av.Vt
        + 0.25 * eps * np.trace(ci_inv @ av.hessVt)
    )
    return qdot, pdot, qmat_dot, pmat_dot, complex(zetadot)


def _wigner_symbol_averages(packet, h, t, order):
    rule = mo.gauss_hermite(2 * packet.d, order)
    cov = 0.5 * packet.eps * pk.gram_matrix_inv(packet.C)
    pts = rule.points(np.concatenate([packet.q, packet.p]), cov)
    w = rule.weights
    h_av = float(w @ np.asarray(h.value(t, pts)))
    grad_av = w @ np.asarray(h.grad(t, pts))
    hess_av = np.tensordot(w, np.asarray(h.hess(t, pts)), axes=(0, 0))
    return h_av, grad_av, hess_av


def rhs_general(t, state, h, eps, quad_order=20, rho_min=DEFAULT_RHO_MIN):
    """Right-hand side of the general-Hamiltonian form (phase-space averages)."""
    q, p, C = state.q, state.p, state.C
    _check_width(C, rho_min)
    d = len(q)
    packet = pk.GaussianPacket(eps=eps, q=q, p=p, C=C, zeta=state.zeta)
    h_av, grad_av, hess_av = _wigner_symbol_averages(packet, h, t, quad_order)

    gq, gp = grad_av[:d], grad_av[d:]
    hqq = hess_av[:d, :d]
    hqp = hess_av[:d, d:]
    hpq = hess_av[d:, :d]
    hpp = hess_av[d:, d:]
    b_mat = hqq + hqp @ C + C @ hpq + C @ hpp @ C

    qdot = gp
    pdot = -gq
    cdot = -b_mat
    ci_inv = np.linalg.inv(C.imag)
    zetadot = -h_av + 0.25 * eps * np.trace(b_mat @ ci_inv) + float(p @ gp)
    return qdot, pdot, cdot, complex(zetadot)


@dataclass(frozen=True)
class ProjectionPolynomial:
    """Quadratic polynomial p2(x) = beta + b.(x-q) + (x-q).B(x-q)/2."""

    beta: complex
    b: np.ndarray
    B: np.ndarray
    q: np.ndarray

    def __call__(self, x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        dx = pts - self.q
        vals = (
            self.beta
            + dx @ self.b
            + 0.5 * np.einsum("mi,ij,mj->m", dx, self.B, dx)
        )
        return vals[0] if np.asarray(x).ndim == 1 else vals


def projection_poly(packet, h, t=0.0, quad_order=20):
    """Tangent-space projection of op_Weyl(h) u as a quadratic polynomial times u.

    beta = <h> - (eps/4) tr(B Ci^{-1}),  b = (Id C) <grad h>,
    B = (Id C) <hess h> (Id ; C), with phase-space averages.
    """
    d = packet.d
    h_av, grad_av, hess_av = _wigner_symbol_averages(packet, h, t, quad_order)
    C = packet.C
    b_vec = grad_av[:d] + C @ grad_av[d:]
    b_mat = hess_av[:d, :d] + hess_av[:d, d:] @ C + C @ hess_av[d:, :d] + C @ hess_av[d:, d:] @ C
    ci_inv = np.linalg.inv(packet.C_im)
    beta = h_av - 0.25 * packet.eps * np.trace(b_mat @ ci_inv)
    return ProjectionPolynomial(beta=complex(beta), b=b_vec, B=b_mat, q=packet.q)


def classical_rhs(t, z, h):
    """Hamiltonian vector field J^{-1} grad h; accepts (2d,) points or (m, 2d) batches."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    d = pts.shape[1] // 2
    g = np.asarray(h.grad(t, pts))
    out = np.concatenate([g[:, d:], -g[:, :d]], axis=1)
    return out[0] if single else out


def linearized_rhs(t, z, Q, P, h):
    """Linearized flow J^{-1} hess h (Q; P) along a phase-space point z."""
    z = np.asarray(z, dtype=float)
    d = z.shape[0] // 2
    hess = np.asarray(h.hess(t, z[None, :]))[0]
    hqq = hess[:d, :d]
    hqp = hess[:d, d:]
    hpq = hess[d:, :d]
    hpp = hess[d:, d:]
    qdot = hpq @ Q + hpp @ P
    pdot = -(hqq @ Q + hqp @ P)
    return qdot, pdot


@dataclass(frozen=True)
class RemainderDiagnostics:
    """Evaluators for the non-projected part W_u of H u relative to the tangent space.

    ``W(x)`` is the complex remainder potential, assembled from the advective
    potential Y_u(x) = -A . (C(x-q) + p), the effective potential X_u = Y_u + Vt,
    their point values and averages at/around q, and the cubic Taylor remainder
    R(X_u).  For quadratic Vt and linear A, W vanishes identically.
    """

    W: Callable
    X: Callable
    Y: Callable
    R: Callable
    x_at_q: complex
    grad_at_q: np.ndarray
    hess_at_q: np.ndarray
    avg_x: complex
    avg_grad: np.ndarray
    avg_hess: np.ndarray
    trace_term: complex
    im_w_at_q: float
    im_w_hess_at_q: np.ndarray
    im_w_deriv4_at_q: np.ndarray


def remainder_potential(packet, fields, eps=None, t=0.0, quad_order=24):
    """Build the remainder-potential diagnostics for a normalized packet.

    W_u = X_u(q) - <X_u> + (eps/4) tr(Ci^{-1} <hess X_u>)
          + (grad X_u(q) - <grad X_u>) . (x - q)
          + (x - q) . (hess X_u(q) - <hess X_u>) (x - q) / 2
          + R(X_u),

    where R is the remainder of the quadratic Taylor expansion of X_u at q.
    The fourth x-derivative tensor of Im W at q (equal to that of Im X_u =
    -A . Ci (x - q)) is exposed for the higher-order cancellation checks; it
    contracts third derivatives of A with Ci.
    """
    eps = packet.eps if eps is None else eps
    q, p, C = packet.q, packet.p, packet.C
    d = packet.d
    ci = packet.C_im

    def x_fun(x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        a = fields.A(t, pts)
        lin = (pts - q) @ C.T + p  # C symmetric, row-wise C(x-q) + p
        y = -np.einsum("mk,mk->m", a, lin)
        return y + fields.Vt(t, pts)

    def y_fun(x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        a = fields.A(t, pts)
        lin = (pts - q) @ C.T + p
        return -np.einsum("mk,mk->m", a, lin)

    def grad_x(x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        a = fields.A(t, pts)
        ja = fields.JA(t, pts)
        lin = (pts - q) @ C.T + p
        g = -np.einsum("mjk,mk->mj", ja, lin) - a @ C.T + fields.gradVt(t, pts)
        return g

    def hess_x(x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        ja = fields.JA(t, pts)
        a2 = fields.A_d2(t, pts)
        lin = (pts - q) @ C.T + p
        jac = np.einsum("mjk,kl->mjl", ja, C)
        h = (
            -np.einsum("mkij,mk->mij", a2, lin)
            - jac
            - np.swapaxes(jac, 1, 2)
            + fields.hessVt(t, pts)
        )
        return h

    # averages of the complex-valued X_u and its derivatives against |u|^2
    rule = mo.gauss_hermite(d, quad_order)
    pts = rule.points(q, 0.5 * eps * np.linalg.inv(ci))
    w = rule.weights
    avg_x = complex(w @ x_fun(pts))
    avg_grad = np.tensordot(w, grad_x(pts), axes=(0, 0))
    avg_hess = np.tensordot(w, hess_x(pts), axes=(0, 0))

    x_q = complex(x_fun(q[None, :])[0])
    grad_q = grad_x(q[None, :])[0]
    hess_q = hess_x(q[None, :])[0]
    ci_inv = np.linalg.inv(ci)
    trace_term = complex(0.25 * eps * np.trace(ci_inv @ avg_hess))

    def taylor2(x):
        pts_ = np.atleast_2d(np.asarray(x, dtype=float))
        dx = pts_ - q
        return x_q + dx @ grad_q + 0.5 * np.einsum("mi,ij,mj->m", dx, hess_q, dx)

    def r_fun(x):
        return x_fun(x) - taylor2(x)

    def w_fun(x):
        pts_ = np.atleast_2d(np.asarray(x, dtype=float))
        dx = pts_ - q
        quad = 0.5 * np.einsum("mi,ij,mj->m", dx, hess_q - avg_hess, dx)
        vals = (x_q - avg_x + trace_term) + dx @ (grad_q - avg_grad) + quad + r_fun(x)
        return vals[0] if np.asarray(x).ndim == 1 else vals

    # fourth x-derivatives of Im X_u at q: each derivative hits the linear
    # factor Ci (x - q) exactly once, leaving third derivatives of A
    a3_q = fields.A_d3(t, q[None, :])[0]  # [k, i, j, l] = d_i d_j d_l A_k
    d4 = -(
        np.einsum("kbcd,ka->abcd", a3_q, ci)
        + np.einsum("kacd,kb->abcd", a3_q, ci)
        + np.einsum("kabd,kc->abcd", a3_q, ci)
        + np.einsum("kabc,kd->abcd", a3_q, ci)
    )
    im_w_at_q = float((x_q - avg_x + trace_term).imag)

    return RemainderDiagnostics(
        W=w_fun,
        X=lambda x: x_fun(x) if np.asarray(x).ndim > 1 else complex(x_fun(x)[0]),
        Y=lambda x: y_fun(x) if np.asarray(x).ndim > 1 else complex(y_fun(x)[0]),
        R=lambda x: r_fun(x) if np.asarray(x).ndim > 1 else complex(r_fun(x)[0]),
        x_at_q=x_q,
        grad_at_q=grad_q,
        hess_at_q=hess_q,
        avg_x=avg_x,
        avg_grad=avg_grad,
        avg_hess=avg_hess,
        trace_term=trace_term,
        im_w_at_q=im_w_at_q,
        im_w_hess_at_q=(hess_q - avg_hess).imag,
        im_w_deriv4_at_q=d4,
    )
