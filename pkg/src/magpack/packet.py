"""Gaussian and Hagedorn wave-packet types and pointwise operations.

A thawed Gaussian wave packet is parametrized by a position center ``q``,
a momentum center ``p``, a complex symmetric width matrix ``C`` whose
imaginary part is positive definite, and a complex scalar ``zeta`` that
carries phase and normalization:

    u(x) = exp( (i/eps) * ( (x-q)^T C (x-q)/2 + (x-q)^T p + zeta ) ).

The equivalent Hagedorn parametrization factorizes the width matrix as
``C = P Q^{-1}`` with a pair of complex matrices satisfying the symplectic
relations ``Q^T P - P^T Q = 0`` and ``Q^* P - P^* Q = 2i Id``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "PacketError",
    "GaussianPacket",
    "HagedornPacket",
    "symplectic_j",
    "evaluate",
    "norm_squared",
    "normalize",
    "factor_width",
    "width_from",
    "tangent_indices",
    "basis_eval",
    "gram_matrix",
    "wigner",
]


class PacketError(ValueError):
    """Packet parameters violate an admissibility condition."""


def symplectic_j(d):
    """Constant symplectic structure matrix J = [[0, -Id], [Id, 0]]."""
    j = np.zeros((2 * d, 2 * d))
    j[:d, d:] = -np.eye(d)
    j[d:, :d] = np.eye(d)
    return j


def _sym_inv(m):
    """Inverse of a small real symmetric matrix."""
    return np.linalg.inv(m)


def _spd_inv_sqrt(m):
    """Principal inverse square root of a real symmetric positive definite matrix."""
    w, v = np.linalg.eigh(m)
    if w.min() <= 0.0:
        raise PacketError("matrix is not positive definite")
    return (v * (1.0 / np.sqrt(w))) @ v.T


@dataclass(frozen=True)
class GaussianPacket:
    """Thawed Gaussian wave packet (q, p, C, zeta) at semiclassical parameter eps.

    The width matrix ``C`` must be complex symmetric with positive definite
    imaginary part.  Validation is an explicit call (:meth:`validate`), not a
    constructor side effect, so that ODE right-hand sides can build transient
    packets cheaply.
    """

    eps: float
    q: np.ndarray
    p: np.ndarray
    C: np.ndarray
    zeta: complex = 0.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.atleast_1d(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, dtype=float)))
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=complex)))
        object.__setattr__(self, "zeta", complex(self.zeta))
        d = self.q.shape[0]
        if self.p.shape != (d,) or self.C.shape != (d, d):
            raise PacketError(
                f"inconsistent shapes: q {self.q.shape}, p {self.p.shape}, C {self.C.shape}"
            )

    @property
    def d(self):
        return self.q.shape[0]

    @property
    def C_re(self):
        return self.C.real

    @property
    def C_im(self):
        return self.C.imag

    @property
    def rho(self):
        """Smallest eigenvalue of Im C (width floor)."""
        return float(np.linalg.eigvalsh(self.C_im).min())

    def validate(self, rho_min=1e-12, sym_tol=1e-12):
        """Check symmetry of C, positive definiteness of Im C, and eps > 0."""
        if not self.eps > 0.0:
            raise PacketError(f"eps must be positive, got {self.eps}")
        scale = max(np.linalg.norm(self.C), 1.0)
        defect = np.linalg.norm(self.C - self.C.T) / scale
        if defect > sym_tol:
            raise PacketError(f"width matrix not symmetric: relative defect {defect:.3e}")
        rho = self.rho
        if rho <= rho_min:
            raise PacketError(f"Im C eigenvalue floor violated: min eig {rho:.3e} <= {rho_min:.3e}")
        return self

    def with_zeta(self, zeta):
        return replace(self, zeta=complex(zeta))


@dataclass(frozen=True)
class HagedornPacket:
    """Gaussian packet with factorized width, parameters (q, p, Q, P, zeta)."""

    eps: float
    q: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    zeta: complex = 0.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.atleast_1d(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, dtype=float)))
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=complex)))
        object.__setattr__(self, "P", np.atleast_2d(np.asarray(self.P, dtype=complex)))
        object.__setattr__(self, "zeta", complex(self.zeta))
        d = self.q.shape[0]
        if self.p.shape != (d,) or self.Q.shape != (d, d) or self.P.shape != (d, d):
            raise PacketError("inconsistent Hagedorn parameter shapes")

    @property
    def d(self):
        return self.q.shape[0]

    def symplectic_defects(self):
        """Frobenius norms of Q^T P - P^T Q and Q^* P - P^* Q - 2i Id."""
        d1 = np.linalg.norm(self.Q.T @ self.P - self.P.T @ self.Q)
        d2 = np.linalg.norm(self.Q.conj().T @ self.P - self.P.conj().T @ self.Q - 2j * np.eye(self.d))
        return float(d1), float(d2)

    def validate(self, tol=1e-10, cond_max=1e12):
        d1, d2 = self.symplectic_defects()
        scale = max(np.linalg.norm(self.Q) * np.linalg.norm(self.P), 1.0)
        if d1 / scale > tol or d2 / max(1.0, scale) > tol:
            raise PacketError(f"symplectic relations violated: defects {d1:.3e}, {d2:.3e}")
        if np.linalg.cond(self.Q) > cond_max or np.linalg.cond(self.P) > cond_max:
            raise PacketError("Q or P numerically singular")
        return self


def evaluate(packet, x):
    """Evaluate the packet pointwise.

    ``x`` may be a single point of shape (d,) or a batch of shape (m, d);
    the result is a complex scalar or an (m,) array.
    """
    if isinstance(packet, HagedornPacket):
        packet = width_from(packet)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != packet.d:
        raise PacketError(f"dimension mismatch: packet d={packet.d}, points of length {pts.shape[1]}")
    dx = pts - packet.q
    quad = 0.5 * np.einsum("mi,ij,mj->m", dx, packet.C, dx)
    lin = dx @ packet.p
    vals = np.exp(1j / packet.eps * (quad + lin + packet.zeta))
    return vals[0] if single else vals


def norm_squared(packet):
    """Closed-form squared L2 norm (pi*eps)^{d/2} det(Im C)^{-1/2} exp(-2 Im zeta / eps)."""
    if isinstance(packet, HagedornPacket):
        packet = width_from(packet)
    sign, logdet = np.linalg.slogdet(packet.C_im)
    if sign <= 0:
        raise PacketError("Im C is not positive definite")
    log_n2 = 0.5 * packet.d * np.log(np.pi * packet.eps) - 0.5 * logdet - 2.0 * packet.zeta.imag / packet.eps
    return float(np.exp(log_n2))


def normalize(packet):
    """Shift Im zeta so that the squared norm equals one; other parameters unchanged."""
    sign, logdet = np.linalg.slogdet(packet.C_im)
    if sign <= 0:
        raise PacketError("Im C is not positive definite")
    im_zeta = 0.25 * packet.eps * (packet.d * np.log(np.pi * packet.eps) - logdet)
    return packet.with_zeta(packet.zeta.real + 1j * im_zeta)


def factor_width(packet):
    """Hagedorn factorization with Q = (Im C)^{-1/2} and P = C Q.

    This canonical choice has real symmetric Q and satisfies both symplectic
    relations as well as P Q^{-1} = C exactly.
    """
    Q = _spd_inv_sqrt(packet.C_im).astype(complex)
    P = packet.C @ Q
    return HagedornPacket(eps=packet.eps, q=packet.q, p=packet.p, Q=Q, P=P, zeta=packet.zeta)


def width_from(h):
    """Recover the width parametrization, C = P Q^{-1}."""
    C = np.linalg.solve(h.Q.T, h.P.T).T
    C = 0.5 * (C + C.T)  # symmetric up to roundoff by the symplectic relations
    return GaussianPacket(eps=h.eps, q=h.q, p=h.p, C=C, zeta=h.zeta)


def tangent_indices(d):
    """All multi-indices n over d coordinates with |n| <= 2, zeroth first."""
    idx = [tuple([0] * d)]
    for j in range(d):
        n = [0] * d
        n[j] = 1
        idx.append(tuple(n))
    for j in range(d):
        for k in range(j, d):
            n = [0] * d
            n[j] += 1
            n[k] += 1
            idx.append(tuple(n))
    return idx


def basis_eval(h, n, x, norm_tol=1e-8):
    """Evaluate the orthonormal tangent-space basis function phi_n at x.

    For the underlying normalized packet u:

        phi_0       = u
        phi_{e_j}   = sqrt(2/eps) (Q^{-1}(x-q))_j u
        phi_{e_j+e_k} = (delta_jk + 1)^{-1/2}
                        ( (2/eps)(Q^{-1}(x-q))_j (Q^{-1}(x-q))_k - (Q^* Q^{-T})_{jk} ) u
    """
    n = tuple(int(m) for m in n)
    if len(n) != h.d or any(m < 0 for m in n):
        raise PacketError(f"invalid tangent multi-index {n} for d={h.d}")
    order = sum(n)
    if order > 2:
        raise PacketError(f"tangent basis index must have |n| <= 2, got {n}")
    g = width_from(h)
    if abs(norm_squared(g) - 1.0) > norm_tol:
        raise PacketError("basis_eval requires a normalized underlying packet")
    u = evaluate(g, x)
    if order == 0:
        return u
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.linalg.solve(h.Q, (pts - h.q).T)  # (d, m)
    if np.asarray(x).ndim == 1:
        xi = xi[:, 0]
    if order == 1:
        j = n.index(1)
        return np.sqrt(2.0 / h.eps) * xi[j] * u
    # order == 2
    nz = [i for i, m in enumerate(n) if m > 0]
    if len(nz) == 1:
        j = k = nz[0]
    else:
        j, k = nz
    m_jk = (h.Q.conj().T @ np.linalg.inv(h.Q).T)[j, k]
    pref = 1.0 / np.sqrt((1.0 if j != k else 2.0))
    return pref * ((2.0 / h.eps) * xi[j] * xi[k] - m_jk) * u


def gram_matrix(C):
    """Phase-space quadratic form G(C) of the packet's Wigner function.

    Returns the real symmetric, symplectic 2d x 2d matrix

        G = [[ Ci + Cr Ci^{-1} Cr , -Cr Ci^{-1} ],
             [ -Ci^{-1} Cr        ,  Ci^{-1}    ]]

    with Cr = Re C, Ci = Im C.  Both off-diagonal blocks carry a minus sign
    (they are transposes of each other), which is the convention that makes
    G symmetric; symplecticity G^T J G = J and det G = 1 hold exactly.
    """
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    cr, ci = C.real, C.imag
    w = np.linalg.eigvalsh(ci)
    if w.min() <= 0:
        raise PacketError("Im C is not positive definite")
    ci_inv = _sym_inv(ci)
    top = np.hstack([ci + cr @ ci_inv @ cr, -cr @ ci_inv])
    bot = np.hstack([-ci_inv @ cr, ci_inv])
    g = np.vstack([top, bot])
    return 0.5 * (g + g.T)


def gram_matrix_inv(C):
    """Inverse of :func:`gram_matrix`, computed blockwise (G^{-1} = J G J^{-1})."""
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    cr, ci = C.real, C.imag
    ci_inv = _sym_inv(ci)
    top = np.hstack([ci_inv, ci_inv @ cr])
    bot = np.hstack([cr @ ci_inv, ci + cr @ ci_inv @ cr])
    g = np.vstack([top, bot])
    return 0.5 * (g + g.T)


def wigner(packet, z):
    """Wigner function of a normalized packet at phase-space points z.

    ``z`` has shape (2d,) or (m, 2d).  Returns
    (pi*eps)^{-d} exp( -(z - z0) . G (z - z0) / eps ) with z0 = (q, p).
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    if pts.shape[1] != 2 * packet.d:
        raise PacketError("phase-space point must have length 2d")
    g = gram_matrix(packet.C)
    z0 = np.concatenate([packet.q, packet.p])
    dz = pts - z0
    vals = (np.pi * packet.eps) ** (-packet.d) * np.exp(
        -np.einsum("mi,ij,mj->m", dz, g, dz) / packet.eps
    )
    return float(vals[0]) if single else vals
