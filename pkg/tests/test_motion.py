import numpy as np
import pytest

from magpack import fields as fl
from magpack import moments as mo
from magpack import motion as mt
from magpack import packet as pk
from conftest import random_packet, random_width

SINE = fl.builtin("sine_field_2d", {"a": 0.2, "potential": {"kind": "torsional", "c": 1.0}})


def _state(u, t=0.0):
    return mt.VariationalState(t=t, q=u.q, p=u.p, C=u.C, zeta=u.zeta)


def test_rhs_variational_harmonic_hand_values():
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    for eps in (0.3, 0.05):
        u = pk.normalize(pk.GaussianPacket(eps=eps, q=[1.0], p=[0.0], C=[[1j]]))
        qd, pd, cd, zd = mt.rhs_variational(0.0, _state(u), fields, eps)
        assert qd[0] == pytest.approx(0.0, abs=1e-13)
        assert pd[0] == pytest.approx(-1.0, rel=1e-13)
        assert abs(cd[0, 0]) <= 1e-13
        assert zd == pytest.approx(-0.5 - eps / 2.0, rel=1e-12)


def test_rhs_variational_quadratic_riccati(rng):
    # A = 0, quadratic V: Cdot = -C^2 - hess V exactly (averages of constants)
    fields = fl.builtin("harmonic", {"omega": [1.0, 0.5]})
    u = random_packet(rng, 2, eps=0.1)
    _, _, cd, _ = mt.rhs_variational(0.0, _state(u), fields, 0.1)
    expected = -u.C @ u.C - np.diag([1.0, 0.25])
    np.testing.assert_allclose(cd, expected, atol=1e-12)


def test_rhs_variational_linear_a_kills_trace_terms(rng):
    # constant-B field: second/third A-derivatives vanish, so qdot and pdot
    # reduce to p - <A> and <JA> p - <grad Vt> with constant JA
    fields = fl.builtin("constant_b_2d", {"B": 1.0, "omega": [1.0, 1.0]})
    u = random_packet(rng, 2, eps=0.1)
    qd, pd, _, _ = mt.rhs_variational(0.0, _state(u), fields, 0.1)
    a_avg = mo.config_average(u, lambda X: fields.A(0.0, X))
    ja = fields.JA(0.0, u.q[None, :])[0]
    gv = mo.config_average(u, lambda X: fields.gradVt(0.0, X))
    np.testing.assert_allclose(qd, u.p - a_avg, atol=1e-12)
    np.testing.assert_allclose(pd, ja @ u.p - gv, atol=1e-12)


def test_rhs_width_degeneracy_raises():
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    u = pk.GaussianPacket(eps=0.1, q=[0.0], p=[0.0], C=[[1e-9j]])
    with pytest.raises(pk.PacketError):
        mt.rhs_variational(0.0, _state(u), fields, 0.1, rho_min=1e-6)


def test_rhs_hagedorn_harmonic():
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    u = pk.normalize(pk.GaussianPacket(eps=0.1, q=[0.0], p=[0.0], C=[[1j]]))
    hp = pk.factor_width(u)
    st = mt.HagedornState(t=0.0, q=hp.q, p=hp.p, Q=hp.Q, P=hp.P, zeta=hp.zeta)
    _, _, qd, pd, _ = mt.rhs_hagedorn(0.0, st, fields, 0.1)
    assert qd[0, 0] == pytest.approx(1j)
    assert pd[0, 0] == pytest.approx(-1.0)


def test_rhs_hagedorn_consistency_with_width(rng):
    # d/dt (P Q^{-1}) assembled from the factor derivatives equals Cdot
    for trial in range(50):
        d = 2 if trial % 2 else 1
        fields = SINE if d == 2 else fl.builtin("torsional", {"c": 1.0, "dim": 1, "A0": [0.2]})
        u = random_packet(rng, d, eps=0.1)
        hp = pk.factor_width(u)
        m = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        um = np.linalg.qr(m)[0]
        hp = pk.HagedornPacket(eps=0.1, q=u.q, p=u.p, Q=hp.Q @ um, P=hp.P @ um, zeta=u.zeta)
        stv = _state(u)
        sth = mt.HagedornState(t=0.0, q=u.q, p=u.p, Q=hp.Q, P=hp.P, zeta=u.zeta)
        _, _, cd, zv = mt.rhs_variational(0.0, stv, fields, 0.1, 16)
        _, _, qd, pd, zh = mt.rhs_hagedorn(0.0, sth, fields, 0.1, 16)
        qi = np.linalg.inv(hp.Q)
        cd_h = pd @ qi - hp.P @ qi @ qd @ qi
        assert np.abs(cd_h - cd).max() <= 1e-10
        assert abs(zv - zh) <= 1e-12

        # symplectic defect derivative vanishes identically
        s1 = qd.T @ hp.P + hp.Q.T @ pd - pd.T @ hp.Q - hp.P.T @ qd
        s2 = qd.conj().T @ hp.P + hp.Q.conj().T @ pd - pd.conj().T @ hp.Q - hp.P.conj().T @ qd
        assert np.abs(s1).max() <= 1e-12
        assert np.abs(s2).max() <= 1e-12


def test_rhs_general_harmonic_hand_value():
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    h = fl.hamiltonian_symbol(fields)
    eps = 0.2
    u = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.0], p=[0.0], C=[[1j]]))
    qd, pd, cd, zd = mt.rhs_general(0.0, _state(u), h, eps)
    assert qd[0] == pytest.approx(0.0, abs=1e-13)
    assert pd[0] == pytest.approx(0.0, abs=1e-13)
    assert abs(cd[0, 0]) <= 1e-12
    assert zd == pytest.approx(-eps / 2.0, rel=1e-12)


def test_rhs_general_equals_variational_sine_field(rng):
    # designated transcription guard for the phase equation
    h = fl.hamiltonian_symbol(SINE)
    eps = 0.1
    for _ in range(20):
        u = random_packet(rng, 2, eps=eps)
        st = _state(u, t=0.2)
        r1 = mt.rhs_variational(0.2, st, SINE, eps, 20)
        r2 = mt.rhs_general(0.2, st, h, eps, 20)
        for a, b in zip(r1, r2):
            assert np.abs(np.asarray(a) - np.asarray(b)).max() <= 1e-8


def test_rhs_classical_limit(rng):
    h = fl.hamiltonian_symbol(SINE)
    z = np.array([0.3, -0.2, 0.2, 0.1])
    cl = mt.classical_rhs(0.0, z, h)
    C = random_width(rng, 2)
    errs = []
    eps_list = [0.2, 0.1, 0.05, 0.025]
    for eps in eps_list:
        u = pk.normalize(pk.GaussianPacket(eps=eps, q=z[:2], p=z[2:], C=C))
        qd, pd, _, _ = mt.rhs_variational(0.0, _state(u), SINE, eps, 20)
        errs.append(np.linalg.norm(np.concatenate([qd, pd]) - cl))
    slope = np.polyfit(np.log10(eps_list), np.log10(errs), 1)[0]
    assert slope >= 1.0 - 0.1


def test_classical_rhs_magnetic_form(rng):
    h = fl.hamiltonian_symbol(SINE)
    z = rng.normal(size=(5, 4))
    out = mt.classical_rhs(0.0, z, h)
    a = SINE.A(0.0, z[:, :2])
    ja = SINE.JA(0.0, z[:, :2])
    gv = SINE.gradVt(0.0, z[:, :2])
    np.testing.assert_allclose(out[:, :2], z[:, 2:] - a, atol=1e-14)
    np.testing.assert_allclose(
        out[:, 2:], np.einsum("mjk,mk->mj", ja, z[:, 2:]) - gv, atol=1e-14
    )


def test_classical_cyclotron_period():
    # constant-B 2d with V = 0: kinetic velocity rotates with period 2 pi / B
    from magpack import odeint as oi

    b = 1.3
    fields = fl.builtin("constant_b_2d", {"B": b})
    h = fl.hamiltonian_symbol(fields)
    z0 = np.array([0.3, -0.1, 0.4, 0.2])
    period = 2.0 * np.pi / b

    def rhs(t, z):
        return mt.classical_rhs(t, z, h)

    traj = oi.integrate(rhs, z0, 0.0, period, tol=1e-12)
    zT = traj.final_state

    def velocity(z):
        return z[2:] - fields.A(0.0, z[None, :2])[0]

    np.testing.assert_allclose(velocity(zT), velocity(z0), atol=1e-9)


def test_linearized_rhs_is_general_hagedorn_limit(rng):
    h = fl.hamiltonian_symbol(SINE)
    z = np.array([0.1, 0.2, -0.3, 0.4])
    Q = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    P = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    qd, pd = mt.linearized_rhs(0.0, z, Q, P, h)
    hess = h.hess(0.0, z[None, :])[0]
    stacked = np.vstack([Q, P])
    jinv = -pk.symplectic_j(2)
    full = jinv @ hess @ stacked
    np.testing.assert_allclose(qd, full[:2], atol=1e-13)
    np.testing.assert_allclose(pd, full[2:], atol=1e-13)


def test_hagedorn_tends_to_linearized_flow(rng):
    # averages -> point values: the factor equations approach the linearized
    # classical flow as eps -> 0
    h = fl.hamiltonian_symbol(SINE)
    C = random_width(rng, 2)
    errs = []
    eps_list = [0.2, 0.1, 0.05]
    for eps in eps_list:
        u = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.3, -0.2], p=[0.2, 0.1], C=C))
        hp = pk.factor_width(u)
        st = mt.HagedornState(t=0.0, q=u.q, p=u.p, Q=hp.Q, P=hp.P, zeta=u.zeta)
        _, _, qd, pd, _ = mt.rhs_hagedorn(0.0, st, SINE, eps, 16)
        z = np.concatenate([u.q, u.p])
        qd_cl, pd_cl = mt.linearized_rhs(0.0, z, hp.Q, hp.P, h)
        errs.append(max(np.abs(qd - qd_cl).max(), np.abs(pd - pd_cl).max()))
    assert errs[0] > errs[-1]
    slope = np.polyfit(np.log10(eps_list), np.log10(errs), 1)[0]
    assert slope >= 0.9


def test_projection_poly_harmonic_hand_values():
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    h = fl.hamiltonian_symbol(fields)
    eps = 0.2
    u = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.0], p=[0.0], C=[[1j]]))
    poly = mt.projection_poly(u, h)
    assert poly.beta == pytest.approx(eps / 2.0, rel=1e-12)
    assert abs(poly.b[0]) <= 1e-13
    assert abs(poly.B[0, 0]) <= 1e-12


def test_projection_reproduces_quadratic_hamiltonian(rng):
    # quadratic V, linear A: H u = p2 u exactly on a grid
    from magpack import gridref as gr

    fields = fl.builtin("constant_b_2d", {"B": 1.0, "omega": [1.0, 1.0]})
    h = fl.hamiltonian_symbol(fields)
    eps = 0.05
    u = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.1, -0.1], p=[0.2, 0.1], C=1j * np.eye(2)))
    grid = gr.Grid(centers=[0.0, 0.0], halfwidths=[2.0, 2.0], shape=[128, 128])
    su = gr.sample(u, grid)
    hu = gr.apply_h(0.0, su, fields, eps)
    poly = mt.projection_poly(u, h, quad_order=20)
    resid = hu.psi - poly(grid.points()).reshape(grid.shape) * su.psi
    assert np.sqrt(np.sum(np.abs(resid) ** 2) * grid.cell_volume) <= 1e-10


def test_projection_residual_orthogonal_sine_field(rng):
    from magpack import gridref as gr

    h = fl.hamiltonian_symbol(SINE)
    eps = 0.1
    u = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.2, -0.1], p=[0.3, 0.2], C=1j * np.eye(2)))
    grid = gr.Grid(centers=[0.1, 0.0], halfwidths=[2.2, 2.2], shape=[256, 256])
    su = gr.sample(u, grid)
    hu = gr.apply_h(0.0, su, SINE, eps)
    poly = mt.projection_poly(u, h, quad_order=24)
    pts = grid.points()
    resid = hu.psi - poly(pts).reshape(grid.shape) * su.psi
    hp = pk.factor_width(u)
    vol = grid.cell_volume
    for n in pk.tangent_indices(2):
        phi = pk.basis_eval(hp, n, pts).reshape(grid.shape)
        assert abs(np.vdot(phi, resid) * vol) <= 1e-6


def test_remainder_vanishes_in_quadratic_regime(rng):
    fields = fl.builtin("constant_b_2d", {"B": 1.0, "omega": [1.0, 1.0]})
    u = random_packet(rng, 2, eps=0.1)
    diag = mt.remainder_potential(u, fields)
    pts = u.q + rng.normal(size=(50, 2))
    assert np.abs(diag.W(pts)).max() <= 1e-10


def test_remainder_matches_projection_residual(rng):
    from magpack import gridref as gr

    h = fl.hamiltonian_symbol(SINE)
    eps = 0.1
    u = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.2, -0.1], p=[0.3, 0.2], C=1j * np.eye(2)))
    grid = gr.Grid(centers=[0.1, 0.0], halfwidths=[2.2, 2.2], shape=[256, 256])
    su = gr.sample(u, grid)
    hu = gr.apply_h(0.0, su, SINE, eps)
    poly = mt.projection_poly(u, h, quad_order=24)
    pts = grid.points()
    resid = hu.psi - poly(pts).reshape(grid.shape) * su.psi
    diag = mt.remainder_potential(u, SINE, quad_order=24)
    wu = diag.W(pts).reshape(grid.shape) * su.psi
    err = np.sqrt(np.sum(np.abs(resid - wu) ** 2) * grid.cell_volume)
    assert err <= 1e-8


def _wu_l2(eps, fields, quad_order=24):
    # packet placed where the torsional curvature varies strongly, so the
    # cubic Taylor remainder carries an O(1) third-derivative coefficient
    u = pk.normalize(pk.GaussianPacket(eps=eps, q=[1.2, -0.9], p=[0.3, 0.2], C=1j * np.eye(2)))
    diag = mt.remainder_potential(u, fields, quad_order=quad_order)
    val = mo.config_average(u, lambda X: np.abs(diag.W(X)) ** 2, order=quad_order)
    return np.sqrt(val)


def test_remainder_l2_scaling_three_halves():
    eps_list = [0.5, 0.25, 0.125, 0.0625]
    vals = [_wu_l2(e, SINE) for e in eps_list]
    slope = np.polyfit(np.log10(eps_list), np.log10(vals), 1)[0]
    assert 1.4 <= slope <= 1.7


def remainder_cancellation_terms(eps, fields, q0, p0, C0, quad_order=28):
    """(Im W(q), Im W(q) + eps f2 + eps^2 f4) for the x-only expansion of Im W."""
    u = pk.normalize(pk.GaussianPacket(eps=eps, q=q0, p=p0, C=C0))
    diag = mt.remainder_potential(u, fields, quad_order=quad_order)
    d = u.d
    hess_pad = np.zeros((2 * d, 2 * d), dtype=complex)
    hess_pad[:d, :d] = diag.im_w_hess_at_q
    f2 = mo.f2(hess_pad, u.C).real

    def deriv4(ell):
        idx = mo._index_list(ell)
        if any(i >= d for i in idx):
            return 0.0
        return diag.im_w_deriv4_at_q[idx[0], idx[1], idx[2], idx[3]]

    f4 = mo.fk_sum(deriv4, u.C, 4).real
    return diag.im_w_at_q, diag.im_w_at_q + eps * f2 + eps**2 * f4


def test_remainder_imaginary_cancellation_is_exact_in_coulomb_gauge(rng):
    # div A = 0 makes Im W(q), f2(Im W), and f4(Im W) vanish identically
    # (integration by parts turns each into an average of derivatives of
    # div A), so the stated O(eps^2) / O(eps^3) bounds hold with constant 0
    C0 = np.array([[0.4 + 1.1j, 0.15 + 0.2j], [0.15 + 0.2j, -0.3 + 0.9j]])
    for eps in (0.4, 0.1):
        im_w, combo = remainder_cancellation_terms(eps, SINE, [1.2, -0.9], [0.3, 0.2], C0)
        assert abs(im_w) <= 1e-14
        assert abs(combo) <= 1e-14
