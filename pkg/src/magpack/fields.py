"""Potential catalog with analytic derivatives, and the classical Hamiltonian symbol.

Conventions
-----------
All evaluators are vectorized over points: ``X`` has shape (m, d).  Derivative
tensors are laid out as

* ``JA[m, j, k]      = d A_k / d x_j``            (derivative index first),
* ``A_d2[m, k, i, j] = d^2 A_k / d x_i d x_j``    (component first),
* ``A_d3[m, k, i, j, l] = d^3 A_k / d x_i d x_j d x_l``.

With this layout the gradient of the advection form is ``grad(A . p) = JA @ p``.
The effective scalar potential is ``Vt = |A|^2 / 2 + V``; its gradient and
Hessian are provided analytically by every builtin.  All builtins satisfy the
Coulomb gauge div A = 0 and the sublinear / subquadratic growth conditions by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "FieldError",
    "FieldSet",
    "Symbol",
    "builtin",
    "BUILTIN_NAMES",
    "hamiltonian_symbol",
    "fd_check",
    "coordinate_symbol",
    "kinetic_energy_symbol",
]


class FieldError(ValueError):
    """Unknown builtin or parameters violating the admissibility conditions."""


BUILTIN_NAMES = ("free", "harmonic", "torsional", "constant_b_2d", "sine_field_2d", "combo_2d")


@dataclass(frozen=True)
class FieldSet:
    """Magnetic and electric potential with derivatives through third order in A.

    Third derivatives of A are part of the interface because the width and
    phase equations contain the averaged Hessian of tr(JA Cr Ci^{-1}), which
    expands into third derivatives of A contracted with a constant matrix.
    ``dA_dt`` and ``dVt_dt`` are zero for time-independent catalogs and are
    used by the energy-balance diagnostics.
    """

    d: int
    name: str
    params: dict
    A: Callable
    Vt: Callable
    JA: Callable
    A_d2: Callable
    A_d3: Callable
    gradVt: Callable
    hessVt: Callable
    dA_dt: Callable
    dVt_dt: Callable
    time_dependent: bool = False

    def validate_gauge(self, t, X, tol=1e-12):
        """Check div A = trace(JA) = 0 at the sample points."""
        tr = np.trace(self.JA(t, np.atleast_2d(X)), axis1=1, axis2=2)
        worst = float(np.abs(tr).max()) if tr.size else 0.0
        if worst > tol:
            raise FieldError(f"Coulomb gauge violated: max |div A| = {worst:.3e}")
        return worst


def _zeros_vec(d):
    return lambda t, X: np.zeros((np.atleast_2d(X).shape[0], d))


def _zeros_tensor(*shape):
    def ev(t, X):
        return np.zeros((np.atleast_2d(X).shape[0],) + shape)

    return ev


def _const_vec(v):
    v = np.asarray(v, dtype=float)

    def ev(t, X):
        return np.broadcast_to(v, (np.atleast_2d(X).shape[0], v.shape[0])).copy()

    return ev


def _check_params(name, params, allowed, required=()):
    unknown = set(params) - set(allowed)
    if unknown:
        raise FieldError(f"builtin '{name}': unknown parameter(s) {sorted(unknown)}")
    missing = set(required) - set(params)
    if missing:
        raise FieldError(f"builtin '{name}': missing parameter(s) {sorted(missing)}")


def _with_constant_a(d, a0):
    """Constant vector potential contribution: shifts Vt by |A0|^2/2 (constant)."""
    a0 = np.zeros(d) if a0 is None else np.asarray(a0, dtype=float)
    if a0.shape != (d,):
        raise FieldError(f"A0 must be a vector of length {d}")
    return a0


def _scalar_only_fieldset(name, params, d, v, grad_v, hess_v, a0=None):
    """FieldSet with A constant (possibly zero) and scalar potential V."""
    a0 = _with_constant_a(d, a0)
    shift = 0.5 * float(a0 @ a0)
    return FieldSet(
        d=d,
        name=name,
        params=dict(params),
        A=_const_vec(a0),
        Vt=lambda t, X: v(np.atleast_2d(X)) + shift,
        JA=_zeros_tensor(d, d),
        A_d2=_zeros_tensor(d, d, d),
        A_d3=_zeros_tensor(d, d, d, d),
        gradVt=lambda t, X: grad_v(np.atleast_2d(X)),
        hessVt=lambda t, X: hess_v(np.atleast_2d(X)),
        dA_dt=_zeros_vec(d),
        dVt_dt=lambda t, X: np.zeros(np.atleast_2d(X).shape[0]),
    )


def _builtin_free(params):
    _check_params("free", params, allowed=("dim", "A0"))
    d = int(params.get("dim", len(params.get("A0", [1]))))
    if d < 1:
        raise FieldError("free: dim must be positive")
    return _scalar_only_fieldset(
        "free",
        params,
        d,
        v=lambda X: np.zeros(X.shape[0]),
        grad_v=lambda X: np.zeros_like(X),
        hess_v=lambda X: np.zeros((X.shape[0], d, d)),
        a0=params.get("A0"),
    )


def _builtin_harmonic(params):
    _check_params("harmonic", params, allowed=("omega", "A0"), required=("omega",))
    omega = np.asarray(params["omega"], dtype=float)
    if omega.ndim != 1 or omega.size < 1:
        raise FieldError("harmonic: omega must be a vector of frequencies")
    d = omega.size
    w2 = omega**2
    return _scalar_only_fieldset(
        "harmonic",
        params,
        d,
        v=lambda X: 0.5 * (X**2 @ w2),
        grad_v=lambda X: X * w2,
        hess_v=lambda X: np.broadcast_to(np.diag(w2), (X.shape[0], d, d)).copy(),
        a0=params.get("A0"),
    )


def _builtin_torsional(params):
    _check_params("torsional", params, allowed=("c", "dim", "A0"), required=("c",))
    c = float(params["c"])
    d = int(params.get("dim", 1))
    if d < 1:
        raise FieldError("torsional: dim must be positive")

    def hess_v(X):
        h = np.zeros((X.shape[0], d, d))
        idx = np.arange(d)
        h[:, idx, idx] = c * np.cos(X)
        return h

    return _scalar_only_fieldset(
        "torsional",
        params,
        d,
        v=lambda X: c * np.sum(1.0 - np.cos(X), axis=1),
        grad_v=lambda X: c * np.sin(X),
        hess_v=hess_v,
        a0=params.get("A0"),
    )


def _harmonic_part(omega, d):
    if omega is None:
        return (
            lambda X: np.zeros(X.shape[0]),
            lambda X: np.zeros_like(X),
            lambda X: np.zeros((X.shape[0], d, d)),
        )
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (d,):
        raise FieldError(f"omega must have length {d}")
    w2 = omega**2
    return (
        lambda X: 0.5 * (X**2 @ w2),
        lambda X: X * w2,
        lambda X: np.broadcast_to(np.diag(w2), (X.shape[0], d, d)).copy(),
    )


def _builtin_constant_b_2d(params):
    _check_params("constant_b_2d", params, allowed=("B", "omega"), required=("B",))
    b = float(params["B"])
    d = 2
    v, grad_v, hess_v = _harmonic_part(params.get("omega"), d)

    def a_ev(t, X):
        X = np.atleast_2d(X)
        return 0.5 * b * np.stack([-X[:, 1], X[:, 0]], axis=-1)

    ja_const = np.array([[0.0, 0.5 * b], [-0.5 * b, 0.0]])  # JA[j,k] = d_j A_k

    def vt(t, X):
        X = np.atleast_2d(X)
        return 0.125 * b**2 * np.sum(X**2, axis=1) + v(X)

    def grad_vt(t, X):
        X = np.atleast_2d(X)
        return 0.25 * b**2 * X + grad_v(X)

    def hess_vt(t, X):
        X = np.atleast_2d(X)
        return np.broadcast_to(0.25 * b**2 * np.eye(d), (X.shape[0], d, d)) + hess_v(X)

    return FieldSet(
        d=d,
        name="constant_b_2d",
        params=dict(params),
        A=a_ev,
        Vt=vt,
        JA=lambda t, X: np.broadcast_to(ja_const, (np.atleast_2d(X).shape[0], d, d)).copy(),
        A_d2=_zeros_tensor(d, d, d),
        A_d3=_zeros_tensor(d, d, d, d),
        gradVt=grad_vt,
        hessVt=hess_vt,
        dA_dt=_zeros_vec(d),
        dVt_dt=lambda t, X: np.zeros(np.atleast_2d(X).shape[0]),
    )


def _sine_a_parts(a):
    """A = a(-sin x2, sin x1) and its derivative tensors (divergence-free)."""
    d = 2

    def a_ev(X, s=1.0):
        return s * a * np.stack([-np.sin(X[:, 1]), np.sin(X[:, 0])], axis=-1)

    def ja_ev(X, s=1.0):
        m = X.shape[0]
        ja = np.zeros((m, d, d))
        ja[:, 0, 1] = s * a * np.cos(X[:, 0])   # d_1 A_2
        ja[:, 1, 0] = -s * a * np.cos(X[:, 1])  # d_2 A_1
        return ja

    def a2_ev(X, s=1.0):
        m = X.shape[0]
        t = np.zeros((m, d, d, d))
        t[:, 0, 1, 1] = s * a * np.sin(X[:, 1])   # d2 d2 A_1
        t[:, 1, 0, 0] = -s * a * np.sin(X[:, 0])  # d1 d1 A_2
        return t

    def a3_ev(X, s=1.0):
        m = X.shape[0]
        t = np.zeros((m, d, d, d, d))
        t[:, 0, 1, 1, 1] = s * a * np.cos(X[:, 1])
        t[:, 1, 0, 0, 0] = -s * a * np.cos(X[:, 0])
        return t

    def vt_mag(X, s2=1.0):
        return 0.5 * s2 * a**2 * (np.sin(X[:, 1]) ** 2 + np.sin(X[:, 0]) ** 2)

    def grad_vt_mag(X, s2=1.0):
        return (
            0.5
            * s2
            * a**2
            * np.stack([np.sin(2.0 * X[:, 0]), np.sin(2.0 * X[:, 1])], axis=-1)
        )

    def hess_vt_mag(X, s2=1.0):
        m = X.shape[0]
        h = np.zeros((m, d, d))
        h[:, 0, 0] = s2 * a**2 * np.cos(2.0 * X[:, 0])
        h[:, 1, 1] = s2 * a**2 * np.cos(2.0 * X[:, 1])
        return h

    return a_ev, ja_ev, a2_ev, a3_ev, vt_mag, grad_vt_mag, hess_vt_mag


def _potential_part(params, d):
    """Scalar potential selector used by sine_field_2d / combo_2d."""
    if params is None:
        return _harmonic_part(None, d) + (None,)
    if not isinstance(params, dict) or "kind" not in params:
        raise FieldError("potential must be a dict with a 'kind' key")
    kind = params["kind"]
    if kind == "harmonic":
        _check_params("potential", params, allowed=("kind", "omega"), required=("omega",))
        return _harmonic_part(params["omega"], d) + ("harmonic",)
    if kind == "torsional":
        _check_params("potential", params, allowed=("kind", "c"), required=("c",))
        c = float(params["c"])

        def hess_v(X):
            h = np.zeros((X.shape[0], d, d))
            idx = np.arange(d)
            h[:, idx, idx] = c * np.cos(X)
            return h

        return (
            lambda X: c * np.sum(1.0 - np.cos(X), axis=1),
            lambda X: c * np.sin(X),
            hess_v,
            "torsional",
        )
    raise FieldError(f"unknown potential kind '{kind}'")


def _builtin_sine_field_2d(params):
    _check_params("sine_field_2d", params, allowed=("a", "potential"), required=("a",))
    a = float(params["a"])
    d = 2
    v, grad_v, hess_v, _ = _potential_part(params.get("potential"), d)
    a_ev, ja_ev, a2_ev, a3_ev, vt_mag, grad_vt_mag, hess_vt_mag = _sine_a_parts(a)

    return FieldSet(
        d=d,
        name="sine_field_2d",
        params=dict(params),
        A=lambda t, X: a_ev(np.atleast_2d(X)),
        Vt=lambda t, X: vt_mag(np.atleast_2d(X)) + v(np.atleast_2d(X)),
        JA=lambda t, X: ja_ev(np.atleast_2d(X)),
        A_d2=lambda t, X: a2_ev(np.atleast_2d(X)),
        A_d3=lambda t, X: a3_ev(np.atleast_2d(X)),
        gradVt=lambda t, X: grad_vt_mag(np.atleast_2d(X)) + grad_v(np.atleast_2d(X)),
        hessVt=lambda t, X: hess_vt_mag(np.atleast_2d(X)) + hess_v(np.atleast_2d(X)),
        dA_dt=_zeros_vec(d),
        dVt_dt=lambda t, X: np.zeros(np.atleast_2d(X).shape[0]),
    )


def _builtin_combo_2d(params):
    """Sine field plus trap, with optional smooth time modulation (1 + delta sin(omega_t t))."""
    _check_params(
        "combo_2d",
        params,
        allowed=("a", "potential", "delta", "omega_t", "modulate"),
        required=("a", "potential"),
    )
    a = float(params["a"])
    d = 2
    delta = float(params.get("delta", 0.0))
    omega_t = float(params.get("omega_t", 1.0))
    modulate = params.get("modulate", "both")
    if modulate not in ("A", "V", "both"):
        raise FieldError("combo_2d: modulate must be 'A', 'V', or 'both'")
    v, grad_v, hess_v, _ = _potential_part(params["potential"], d)
    a_ev, ja_ev, a2_ev, a3_ev, vt_mag, grad_vt_mag, hess_vt_mag = _sine_a_parts(a)
    mod_a = modulate in ("A", "both")
    mod_v = modulate in ("V", "both")

    def s(t):
        return 1.0 + delta * np.sin(omega_t * t) if mod_a else 1.0

    def s_v(t):
        return 1.0 + delta * np.sin(omega_t * t) if mod_v else 1.0

    def sdot(t):
        return delta * omega_t * np.cos(omega_t * t) if mod_a else 0.0

    def s_vdot(t):
        return delta * omega_t * np.cos(omega_t * t) if mod_v else 0.0

    # Vt = s(t)^2 |A0|^2/2 + s_v(t) V0, so the magnetic part carries s^2.
    return FieldSet(
        d=d,
        name="combo_2d",
        params=dict(params),
        A=lambda t, X: a_ev(np.atleast_2d(X), s(t)),
        Vt=lambda t, X: vt_mag(np.atleast_2d(X), s(t) ** 2) + s_v(t) * v(np.atleast_2d(X)),
        JA=lambda t, X: ja_ev(np.atleast_2d(X), s(t)),
        A_d2=lambda t, X: a2_ev(np.atleast_2d(X), s(t)),
        A_d3=lambda t, X: a3_ev(np.atleast_2d(X), s(t)),
        gradVt=lambda t, X: grad_vt_mag(np.atleast_2d(X), s(t) ** 2)
        + s_v(t) * grad_v(np.atleast_2d(X)),
        hessVt=lambda t, X: hess_vt_mag(np.atleast_2d(X), s(t) ** 2)
        + s_v(t) * hess_v(np.atleast_2d(X)),
        dA_dt=lambda t, X: a_ev(np.atleast_2d(X), sdot(t)),
        dVt_dt=lambda t, X: vt_mag(np.atleast_2d(X), 2.0 * s(t) * sdot(t))
        + s_vdot(t) * v(np.atleast_2d(X)),
        time_dependent=delta != 0.0,
    )


_BUILTINS = {
    "free": _builtin_free,
    "harmonic": _builtin_harmonic,
    "torsional": _builtin_torsional,
    "constant_b_2d": _builtin_constant_b_2d,
    "sine_field_2d": _builtin_sine_field_2d,
    "combo_2d": _builtin_combo_2d,
}


def builtin(name, params=None):
    """Construct a FieldSet from the builtin catalog.

    Catalog (all divergence-free, sublinear A, subquadratic Vt):

    * ``free``:           A = A0 (constant, default 0), V = 0.  params: dim, A0.
    * ``harmonic``:       A = A0, V = sum omega_j^2 x_j^2 / 2.  params: omega, A0.
    * ``torsional``:      A = A0, V = c sum (1 - cos x_j).  params: c, dim, A0.
    * ``constant_b_2d``:  A = (B/2)(-x2, x1), optional harmonic trap.  params: B, omega.
    * ``sine_field_2d``:  A = a(-sin x2, sin x1), potential torsional or harmonic.
      params: a, potential = {kind: ..., ...}.
    * ``combo_2d``:       sine field plus trap with optional time factor
      (1 + delta sin(omega_t t)) on A and/or V.  params: a, potential, delta,
      omega_t, modulate.
    """
    if name not in _BUILTINS:
        raise FieldError(f"unknown builtin '{name}'; available: {', '.join(BUILTIN_NAMES)}")
    return _BUILTINS[name](dict(params or {}))


def _central(fun, t, x, step, index):
    e = np.zeros_like(x)
    e[index] = step
    return (np.asarray(fun(t, (x + e)[None, :])[0]) - np.asarray(fun(t, (x - e)[None, :])[0])) / (
        2.0 * step
    )


def fd_check(fields, t, x, step=1e-5):
    """Compare all analytic derivative tensors against central finite differences.

    Returns a dict of worst relative errors per tensor, computed at the single
    point ``x``.  Relative scaling uses max(1, |tensor|_inf) so identically
    vanishing tensors are compared absolutely.
    """
    x = np.asarray(x, dtype=float)
    d = fields.d
    report = {}

    def rel(err, ref):
        return float(np.abs(err).max() / max(1.0, np.abs(ref).max()))

    ja = fields.JA(t, x[None, :])[0]
    ja_fd = np.stack([_central(fields.A, t, x, step, j) for j in range(d)], axis=0)
    report["JA"] = rel(ja - ja_fd, ja)

    a2 = fields.A_d2(t, x[None, :])[0]
    a2_fd = np.zeros_like(a2)
    for i in range(d):
        dja = _central(fields.JA, t, x, step, i)  # shape (d, d): d_i JA[j, k]
        for k in range(d):
            for j in range(d):
                a2_fd[k, i, j] = dja[j, k]
    report["A_d2"] = rel(a2 - a2_fd, a2)

    a3 = fields.A_d3(t, x[None, :])[0]
    a3_fd = np.zeros_like(a3)
    for i in range(d):
        da2 = _central(fields.A_d2, t, x, step, i)  # (d, d, d): d_i A_d2[k, j, l]
        a3_fd[:, i, :, :] = da2
    report["A_d3"] = rel(a3 - a3_fd, a3)

    gv = fields.gradVt(t, x[None, :])[0]
    gv_fd = np.array([_central(fields.Vt, t, x, step, j) for j in range(d)])
    report["gradVt"] = rel(gv - gv_fd, gv)

    hv = fields.hessVt(t, x[None, :])[0]
    hv_fd = np.stack([_central(fields.gradVt, t, x, step, i) for i in range(d)], axis=0)
    report["hessVt"] = rel(hv - hv_fd, hv)
    return report


@dataclass(frozen=True)
class Symbol:
    """Smooth phase-space function a(t, z) with derivative access.

    ``value(t, Z)`` maps an (m, 2d) array of phase-space points to (m,) values;
    ``grad`` and ``hess`` return (m, 2d) and (m, 2d, 2d).  ``deriv(t, Z, alpha)``
    (optional) returns the alpha-th partial derivative for multi-indices up to
    order four; symbols built from field catalogs only provide what the field
    derivatives support.
    """

    d: int
    value: Callable
    grad: Callable
    hess: Callable
    deriv: Optional[Callable] = None
    name: str = "symbol"


def hamiltonian_symbol(fields):
    """Classical Hamiltonian h(t, q, p) = |p|^2/2 - A(t,q).p + Vt(t,q) as a Symbol.

    The gradient and Hessian are assembled from the FieldSet derivatives:
    grad_q h = -JA p + grad Vt, grad_p h = p - A, and the Hessian blocks are
    [[hess Vt - D2_{A,p}, -JA], [-JA^T, Id]].
    """
    d = fields.d

    def split(Z):
        Z = np.atleast_2d(Z)
        return Z[:, :d], Z[:, d:]

    def value(t, Z):
        X, P = split(Z)
        return (
            0.5 * np.sum(P**2, axis=1)
            - np.einsum("mk,mk->m", fields.A(t, X), P)
            + fields.Vt(t, X)
        )

    def grad(t, Z):
        X, P = split(Z)
        gq = -np.einsum("mjk,mk->mj", fields.JA(t, X), P) + fields.gradVt(t, X)
        gp = P - fields.A(t, X)
        return np.concatenate([gq, gp], axis=1)

    def hess(t, Z):
        X, P = split(Z)
        m = X.shape[0]
        h = np.zeros((m, 2 * d, 2 * d))
        d2ap = np.einsum("mkij,mk->mij", fields.A_d2(t, X), P)
        ja = fields.JA(t, X)
        h[:, :d, :d] = fields.hessVt(t, X) - d2ap
        h[:, :d, d:] = -ja
        h[:, d:, :d] = -np.swapaxes(ja, 1, 2)
        h[:, d:, d:] = np.eye(d)
        return h

    return Symbol(d=d, value=value, grad=grad, hess=hess, name=f"h[{fields.name}]")


def coordinate_symbol(d, index):
    """The coordinate projection z -> z_index (position for index < d, else momentum)."""
    if not 0 <= index < 2 * d:
        raise ValueError("coordinate index out of range")

    def value(t, Z):
        return np.atleast_2d(Z)[:, index].copy()

    def grad(t, Z):
        m = np.atleast_2d(Z).shape[0]
        g = np.zeros((m, 2 * d))
        g[:, index] = 1.0
        return g

    def hess(t, Z):
        m = np.atleast_2d(Z).shape[0]
        return np.zeros((m, 2 * d, 2 * d))

    def deriv(t, Z, alpha):
        m = np.atleast_2d(Z).shape[0]
        alpha = tuple(alpha)
        if sum(alpha) == 0:
            return value(t, Z)
        if sum(alpha) == 1 and alpha[index] == 1:
            return np.ones(m)
        return np.zeros(m)

    name = f"q{index + 1}" if index < d else f"p{index - d + 1}"
    return Symbol(d=d, value=value, grad=grad, hess=hess, deriv=deriv, name=name)


def kinetic_energy_symbol(d):
    """The symbol |p|^2 (Weyl quantization: -eps^2 Laplacian)."""

    def value(t, Z):
        Z = np.atleast_2d(Z)
        return np.sum(Z[:, d:] ** 2, axis=1)

    def grad(t, Z):
        Z = np.atleast_2d(Z)
        g = np.zeros_like(Z)
        g[:, d:] = 2.0 * Z[:, d:]
        return g

    def hess(t, Z):
        m = np.atleast_2d(Z).shape[0]
        h = np.zeros((m, 2 * d, 2 * d))
        h[:, d:, d:] = 2.0 * np.eye(d)
        return h

    return Symbol(d=d, value=value, grad=grad, hess=hess, name="|p|^2")
