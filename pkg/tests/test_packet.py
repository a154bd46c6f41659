import numpy as np
import pytest

from magpack import packet as pk
from conftest import random_packet, random_width


def test_evaluate_unit_values():
    u = pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[1j]], zeta=0.0)
    assert pk.evaluate(u, np.array([0.0])) == pytest.approx(1.0)
    assert pk.evaluate(u, np.array([1.0])) == pytest.approx(np.exp(-0.5))


def test_evaluate_matches_scalar_arithmetic(rng):
    u = random_packet(rng, 2, eps=0.3)
    x = rng.normal(size=2)
    dx = x - u.q
    expo = 0.5 * dx @ (u.C @ dx) + dx @ u.p + u.zeta
    assert pk.evaluate(u, x) == pytest.approx(np.exp(1j / u.eps * expo), rel=1e-13)


def test_evaluate_dimension_mismatch():
    u = pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[1j]])
    with pytest.raises(pk.PacketError):
        pk.evaluate(u, np.zeros(3))


def test_norm_squared_closed_forms():
    u = pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[1j]], zeta=0.25j * np.log(np.pi))
    assert pk.norm_squared(u) == pytest.approx(1.0, rel=1e-14)
    u2 = pk.GaussianPacket(eps=0.5, q=[0.0], p=[0.0], C=[[2j]], zeta=0.0)
    assert pk.norm_squared(u2) == pytest.approx(np.sqrt(np.pi / 4.0), rel=1e-14)


def test_norm_squared_vs_grid_quadrature(rng):
    u = pk.normalize(pk.GaussianPacket(eps=0.4, q=[0.3], p=[0.7], C=[[0.4 + 1.2j]]))
    x = np.linspace(-12, 12, 20001)[:, None]
    riemann = np.sum(np.abs(pk.evaluate(u, x)) ** 2) * (x[1, 0] - x[0, 0])
    assert riemann == pytest.approx(pk.norm_squared(u), abs=1e-8)


def test_norm_squared_ignores_centers_and_real_parts(rng):
    C = random_width(rng, 2)
    base = pk.GaussianPacket(eps=0.2, q=np.zeros(2), p=np.zeros(2), C=C, zeta=0.3j)
    moved = pk.GaussianPacket(
        eps=0.2, q=[1.0, -2.0], p=[3.0, 0.5], C=C + 0.7 * np.eye(2), zeta=5.0 + 0.3j
    )
    assert pk.norm_squared(moved) == pytest.approx(pk.norm_squared(base), rel=1e-13)


def test_normalize_idempotent_and_exact(rng):
    u = pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[1j]], zeta=0.0)
    un = pk.normalize(u)
    assert un.zeta.imag == pytest.approx(0.25 * np.log(np.pi), rel=1e-14)
    again = pk.normalize(un)
    assert again.zeta == pytest.approx(un.zeta)
    w = random_packet(rng, 2, eps=0.05)
    assert pk.norm_squared(w) == pytest.approx(1.0, abs=1e-14)


def test_validate_rejects_bad_widths():
    with pytest.raises(pk.PacketError):
        pk.GaussianPacket(eps=1.0, q=[0.0, 0.0], p=[0.0, 0.0], C=np.eye(2) * 1j + np.array([[0, 1], [0, 0]])).validate()
    with pytest.raises(pk.PacketError):
        pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[-1j]]).validate()
    with pytest.raises(pk.PacketError):
        pk.GaussianPacket(eps=-1.0, q=[0.0], p=[0.0], C=[[1j]]).validate()


def test_factor_width_identity_and_scalar():
    u = pk.GaussianPacket(eps=1.0, q=[0.0, 0.0], p=[0.0, 0.0], C=1j * np.eye(2))
    hp = pk.factor_width(u)
    assert np.allclose(hp.Q, np.eye(2))
    assert np.allclose(hp.P, 1j * np.eye(2))
    u1 = pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[1.0 + 1.0j]])
    hp1 = pk.factor_width(u1)
    assert hp1.Q[0, 0] == pytest.approx(1.0)
    assert hp1.P[0, 0] == pytest.approx(1.0 + 1.0j)
    assert abs(hp1.Q.T @ hp1.P - hp1.P.T @ hp1.Q)[0, 0] < 1e-14


def test_factorization_relations_random(rng):
    for d in (1, 2, 3):
        for _ in range(20):
            C = random_width(rng, d)
            u = pk.GaussianPacket(eps=0.1, q=np.zeros(d), p=np.zeros(d), C=C)
            hp = pk.factor_width(u)
            d1, d2 = hp.symplectic_defects()
            assert d1 <= 1e-12 and d2 <= 1e-12
            assert np.linalg.norm(pk.width_from(hp).C - C) <= 1e-12


def test_width_from_roundtrip_and_positivity(rng):
    for _ in range(20):
        C = random_width(rng, 2)
        hp = pk.factor_width(pk.GaussianPacket(eps=0.1, q=np.zeros(2), p=np.zeros(2), C=C))
        # generalize with a random unitary right factor (keeps the relations)
        m = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        u_mat = np.linalg.qr(m)[0]
        hp2 = pk.HagedornPacket(eps=0.1, q=hp.q, p=hp.p, Q=hp.Q @ u_mat, P=hp.P @ u_mat)
        hp2.validate()
        g = pk.width_from(hp2)
        assert np.linalg.norm(g.C - C) <= 1e-12
        assert np.linalg.eigvalsh(g.C_im).min() > 0
        # Im C = (Q Q*)^{-1}
        qq = hp2.Q @ hp2.Q.conj().T
        assert np.linalg.norm(np.linalg.inv(qq) - g.C_im) <= 1e-12


def test_basis_eval_zeroth_and_first():
    u = pk.normalize(pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[1j]]))
    hp = pk.factor_width(u)
    x = np.linspace(-1, 1, 5)[:, None]
    np.testing.assert_allclose(pk.basis_eval(hp, (0,), x), pk.evaluate(u, x), rtol=1e-14)
    np.testing.assert_allclose(
        pk.basis_eval(hp, (1,), x), np.sqrt(2.0) * x[:, 0] * pk.evaluate(u, x), rtol=1e-14
    )


def test_basis_eval_requires_normalization():
    u = pk.GaussianPacket(eps=1.0, q=[0.0], p=[0.0], C=[[1j]], zeta=0.0)
    hp = pk.factor_width(u)
    with pytest.raises(pk.PacketError):
        pk.basis_eval(hp, (1,), np.zeros((1, 1)))
    with pytest.raises(pk.PacketError):
        pk.basis_eval(pk.factor_width(pk.normalize(u)), (3,), np.zeros((1, 1)))


@pytest.mark.parametrize("d", [1, 2])
def test_basis_gram_identity_on_grid(rng, d):
    u = random_packet(rng, d, eps=0.25)
    hp = pk.factor_width(u)
    n_pts = 1201 if d == 1 else 221
    half = 6.0
    axes = [np.linspace(u.q[j] - half, u.q[j] + half, n_pts) for j in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vol = np.prod([ax[1] - ax[0] for ax in axes])
    idx = pk.tangent_indices(d)
    basis = [pk.basis_eval(hp, n, pts) for n in idx]
    gram = np.array([[np.vdot(a, b) * vol for b in basis] for a in basis])
    np.testing.assert_allclose(gram, np.eye(len(idx)), atol=1e-6)


def test_gram_matrix_examples_and_symplecticity(rng):
    np.testing.assert_allclose(pk.gram_matrix(1j * np.eye(2)), np.eye(4), atol=1e-14)
    np.testing.assert_allclose(
        pk.gram_matrix(np.array([[1.0 + 1.0j]])), np.array([[2.0, -1.0], [-1.0, 1.0]]), atol=1e-14
    )
    for d in (1, 2):
        J = pk.symplectic_j(d)
        for _ in range(500):
            g = pk.gram_matrix(random_width(rng, d))
            assert np.linalg.norm(g - g.T) <= 1e-12
            assert np.linalg.eigvalsh(g).min() > 0
            assert np.linalg.norm(g.T @ J @ g - J) <= 1e-10
            assert abs(np.linalg.det(g) - 1.0) <= 1e-10


def test_wigner_center_value_and_normalization(rng):
    u = random_packet(rng, 1, eps=0.3)
    z0 = np.concatenate([u.q, u.p])
    assert pk.wigner(u, z0) == pytest.approx((np.pi * u.eps) ** (-1), rel=1e-13)
    # phase-space integral by Riemann sum
    qs = np.linspace(z0[0] - 4, z0[0] + 4, 401)
    ps = np.linspace(z0[1] - 4, z0[1] + 4, 401)
    mesh = np.meshgrid(qs, ps, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    total = pk.wigner(u, pts).sum() * (qs[1] - qs[0]) * (ps[1] - ps[0])
    assert total == pytest.approx(1.0, abs=1e-8)


def test_wigner_product_structure_for_unit_width():
    u = pk.normalize(pk.GaussianPacket(eps=0.5, q=[0.2], p=[-0.4], C=[[1j]]))
    z = np.array([[0.5, 0.1], [0.0, 0.0], [-1.0, 2.0]])
    vals = pk.wigner(u, z)
    gauss_q = np.exp(-((z[:, 0] - 0.2) ** 2) / u.eps)
    gauss_p = np.exp(-((z[:, 1] + 0.4) ** 2) / u.eps)
    np.testing.assert_allclose(vals, gauss_q * gauss_p / (np.pi * u.eps), rtol=1e-12)
