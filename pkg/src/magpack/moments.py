"""Gaussian expectation values: quadrature averages and closed-form moments.

Three Gaussian covariance conventions are used throughout and asserted
against each other in the tests:

* configuration averages of |u|^2 use covariance (eps/2) (Im C)^{-1},
* phase-space (Wigner) averages use covariance (eps/2) G(C)^{-1},
* the normalized moments rho_ell(C) use covariance G(C)^{-1} / 2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss

from magpack import packet as pk

__all__ = [
    "QuadratureRule",
    "gauss_hermite",
    "config_average",
    "wigner_average",
    "rho",
    "moment",
    "f2",
    "fk_sum",
    "f4",
    "F1n",
    "isserlis_resum_check",
    "multi_indices",
    "QuadratureFallbackWarning",
]


class QuadratureFallbackWarning(UserWarning):
    """A closed-form moment was unavailable and quadrature was used instead."""


@dataclass(frozen=True)
class QuadratureRule:
    """Tensorized Gauss-Hermite rule, standardized to the N(0, Id) weight.

    ``nodes`` has shape (m, ndim) and ``weights`` shape (m,); the weights sum
    to one, so plain dot products compute expectations against N(0, Id).
    :meth:`points` maps the nodes affinely to an arbitrary mean and (symmetric
    positive definite) covariance.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def ndim(self):
        return self.nodes.shape[1]

    def points(self, mean, cov):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        w, v = np.linalg.eigh(cov)
        if w.min() < 0:
            raise ValueError("covariance must be positive semidefinite")
        root = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
        return mean + self.nodes @ root

    def integrate(self, values):
        """Weighted sum over the leading axis of ``values``."""
        values = np.asarray(values)
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=64)
def _gh_cached(ndim, order):
    x, w = hermgauss(order)
    # standardize: nodes for N(0,1) are sqrt(2)*x, weights normalized to sum 1
    x = np.sqrt(2.0) * x
    w = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([x] * ndim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(
        np.stack(np.meshgrid(*([w] * ndim), indexing="ij"), axis=-1).reshape(-1, ndim), axis=1
    )
    weights = weights / weights.sum()
    return nodes, weights


def gauss_hermite(ndim, order):
    """Tensorized Gauss-Hermite rule with ``order`` nodes per axis.

    Exact for polynomials up to degree 2*order - 1 along each axis.
    """
    if order < 2:
        raise ValueError("quadrature order must be at least 2")
    nodes, weights = _gh_cached(int(ndim), int(order))
    return QuadratureRule(nodes=nodes, weights=weights)


def _position_cov(packet):
    return 0.5 * packet.eps * np.linalg.inv(packet.C_im)


def config_average(packet, W, order=20, check_norm=True):
    """Average of W(x) against |u(x)|^2 by adapted Gauss-Hermite quadrature.

    ``W`` is called with an (m, d) array of points and may return scalar,
    vector, or tensor values per point (leading axis m).  The quadrature uses
    mean q and covariance (eps/2)(Im C)^{-1}; for a normalized packet this is
    exactly the average against |u|^2.  ``check_norm=False`` skips the
    normalization check (used inside ODE right-hand sides on transient
    states whose norm is conserved analytically).
    """
    if check_norm and abs(pk.norm_squared(packet) - 1.0) > 1e-8:
        raise pk.PacketError("config_average requires a normalized packet")
    rule = gauss_hermite(packet.d, order)
    pts = rule.points(packet.q, _position_cov(packet))
    return rule.integrate(np.asarray(W(pts)))


def _symbol_values(a, t, z):
    value = getattr(a, "value", a)
    return np.asarray(value(t, z))


def wigner_average(packet, a, t=0.0, order=20, check_norm=True):
    """Phase-space average of a symbol a(t, z) against the packet's Wigner function.

    Equals the expectation value of the Weyl quantization of ``a`` in the
    state u.  The quadrature is a 2d-dimensional Gauss-Hermite rule with mean
    (q, p) and covariance (eps/2) G(C)^{-1}.
    """
    if check_norm and abs(pk.norm_squared(packet) - 1.0) > 1e-8:
        raise pk.PacketError("wigner_average requires a normalized packet")
    rule = gauss_hermite(2 * packet.d, order)
    cov = 0.5 * packet.eps * pk.gram_matrix_inv(packet.C)
    pts = rule.points(np.concatenate([packet.q, packet.p]), cov)
    return rule.integrate(_symbol_values(a, t, pts))


def multi_indices(ndim, total):
    """All multi-indices in N_0^ndim with |ell| = total."""
    if ndim == 1:
        return [(total,)]
    out = []
    for first in range(total + 1):
        for rest in multi_indices(ndim - 1, total - first):
            out.append((first,) + rest)
    return out


def _index_list(ell):
    """Expand a multi-index into the list of coordinate indices it repeats."""
    out = []
    for i, m in enumerate(ell):
        out.extend([i] * m)
    return out


def _isserlis(idx, sigma):
    """Moment E[prod z_i] of N(0, sigma) over the coordinate list idx."""
    n = len(idx)
    if n == 0:
        return 1.0
    if n % 2 == 1:
        return 0.0
    if n == 2:
        return sigma[idx[0], idx[1]]
    total = 0.0
    head, rest = idx[0], idx[1:]
    for j in range(len(rest)):
        pair = sigma[head, rest[j]]
        remaining = rest[:j] + rest[j + 1 :]
        total += pair * _isserlis(remaining, sigma)
    return total


def rho(C, ell):
    """Normalized phase-space Gaussian moment rho_ell(C).

    rho_ell(C) = pi^{-d} integral of z^ell exp(-z . G(C) z) dz, i.e. the
    moment of N(0, G^{-1}/2).  Closed form (Isserlis pairings) for |ell| <= 4;
    higher orders fall back to quadrature with a warning.
    """
    ell = tuple(int(m) for m in ell)
    if any(m < 0 for m in ell):
        raise ValueError(f"invalid multi-index {ell}")
    total = sum(ell)
    if total % 2 == 1:
        return 0.0
    if total == 0:
        return 1.0
    sigma = 0.5 * pk.gram_matrix_inv(C)
    if total <= 4:
        return float(_isserlis(_index_list(ell), sigma))
    warnings.warn(
        f"rho closed form limited to |ell| <= 4; using quadrature for |ell| = {total}",
        QuadratureFallbackWarning,
    )
    ndim = len(ell)
    rule = gauss_hermite(ndim, total + 2)
    pts = rule.points(np.zeros(ndim), sigma)
    vals = np.prod(pts ** np.asarray(ell), axis=1)
    return float(rule.integrate(vals))


def moment(packet, ell):
    """Centered phase-space moment <(z - z0)^ell>_u = eps^{|ell|/2} rho_ell(C)."""
    ell = tuple(int(m) for m in ell)
    if len(ell) != 2 * packet.d:
        raise ValueError(f"multi-index must have length 2d = {2 * packet.d}")
    return packet.eps ** (sum(ell) / 2.0) * rho(packet.C, ell)


def f2(hess, C):
    """Second-order expansion functional from a symbol Hessian at the packet center.

    Builds the width-contracted Hessian (Id  C^*) hess (Id ; C) and returns a
    quarter of its trace against (Im C)^{-1}.  For a function of x only, pass
    a Hessian whose momentum blocks vanish; the formula then reduces to
    tr(hess_qq (Im C)^{-1}) / 4.
    """
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    d = C.shape[0]
    hess = np.asarray(hess)
    if hess.shape != (2 * d, 2 * d):
        raise ValueError(f"hessian must be {2 * d} x {2 * d}")
    if np.linalg.norm(hess - hess.T) > 1e-10 * max(1.0, np.linalg.norm(hess)):
        raise ValueError("hessian must be symmetric")
    a = hess[:d, :d]
    b = hess[:d, d:]
    dd = hess[d:, d:]
    contracted = a + b @ C + C.conj() @ b.T + C.conj() @ dd @ C
    ci_inv = np.linalg.inv(C.imag)
    return complex(0.25 * np.trace(contracted @ ci_inv))


def fk_sum(deriv, C, k):
    """Expansion functional f_k = sum_{|ell|=k} d^ell a / ell! * rho_ell(C).

    ``deriv(ell)`` returns the ell-th partial derivative of the symbol at the
    packet center, with ell a multi-index over the 2d phase-space coordinates.
    """
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    ndim = 2 * C.shape[0]
    total = 0.0 + 0.0j
    for ell in multi_indices(ndim, k):
        r = rho(C, ell)
        if r == 0.0:
            continue
        fact = math.prod(math.factorial(m) for m in ell)
        total += deriv(ell) * r / fact
    return complex(total)


def f4(deriv, C):
    """Fourth-order expansion functional, the k = 4 instance of :func:`fk_sum`."""
    return fk_sum(deriv, C, 4)


def F1n(grad_a, b_deriv, C, n):
    """Cross term of the product expansion for a phase-space symbol times an
    x-only function:

        F_{1,n} = sum_{|ell| = n+1} sum_{beta <= ell, |beta| = 1}
                  d^beta a(z) * d^{ell-beta} b(q) * rho_ell(C) / (ell - beta)!

    ``grad_a`` is the 2d phase-space gradient of the symbol at the packet
    center; ``b_deriv(alpha)`` returns the alpha-th x-derivative of b at q for
    position multi-indices alpha of order n.
    """
    if n not in (1, 3):
        raise ValueError("F1n is defined for n in {1, 3}")
    grad_a = np.asarray(grad_a)
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    d = C.shape[0]
    if grad_a.shape != (2 * d,):
        raise ValueError("grad_a must have length 2d")
    total = 0.0 + 0.0j
    for ell in multi_indices(2 * d, n + 1):
        r = rho(C, ell)
        if r == 0.0:
            continue
        for beta_idx in range(2 * d):
            if ell[beta_idx] == 0:
                continue
            rest = list(ell)
            rest[beta_idx] -= 1
            if any(rest[d:]):
                continue  # b depends on x only
            fact = math.prod(math.factorial(m) for m in rest)
            total += grad_a[beta_idx] * b_deriv(tuple(rest[:d])) * r / fact
    return complex(total)


def isserlis_resum_check(coeffs, C):
    """Evaluate both sides of the fourth-moment resummation identity.

    ``coeffs`` maps (beta_index, m) to a real number for every phase-space
    multi-index m with |m| = 4 and every coordinate beta_index with
    m[beta_index] >= 1.  Returns (lhs, rhs) where

        lhs = sum_{|m|=4} sum_{beta <= m, |beta|=1} a_{beta,m} rho_m / (m-beta)! ,
        rhs = sum_{|k|=2} sum_{|ell|=2} sum_{beta <= ell, |beta|=1}
              a_{beta,k+ell} rho_k rho_ell / k! .
    """
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    ndim = 2 * C.shape[0]
    for m in multi_indices(ndim, 4):
        for beta_idx in range(ndim):
            if m[beta_idx] >= 1 and (beta_idx, m) not in coeffs:
                raise ValueError(f"incomplete coefficient family: missing ({beta_idx}, {m})")

    lhs = 0.0
    for m in multi_indices(ndim, 4):
        r_m = rho(C, m)
        for beta_idx in range(ndim):
            if m[beta_idx] == 0:
                continue
            rest = list(m)
            rest[beta_idx] -= 1
            fact = math.prod(math.factorial(k) for k in rest)
            lhs += coeffs[(beta_idx, m)] * r_m / fact

    rhs = 0.0
    order2 = multi_indices(ndim, 2)
    for k in order2:
        r_k = rho(C, k)
        k_fact = math.prod(math.factorial(i) for i in k)
        for ell in order2:
            r_ell = rho(C, ell)
            m = tuple(a + b for a, b in zip(k, ell))
            for beta_idx in range(ndim):
                if ell[beta_idx] == 0:
                    continue
                rhs += coeffs[(beta_idx, m)] * r_k * r_ell / k_fact
    return lhs, rhs
