import numpy as np
import pytest

from magpack import egorov as eg
from magpack import fields as fl
from magpack import gridref as gr
from magpack import packet as pk

HARM = fl.hamiltonian_symbol(fl.builtin("harmonic", {"omega": [1.0]}))
PEND = fl.hamiltonian_symbol(fl.builtin("torsional", {"c": 1.0, "dim": 1, "A0": [0.25]}))
SINE2 = fl.hamiltonian_symbol(
    fl.builtin("sine_field_2d", {"a": 0.2, "potential": {"kind": "torsional", "c": 1.0}})
)


def test_flow_identity_at_equal_times(rng):
    z = rng.normal(size=4)
    np.testing.assert_allclose(eg.flow(SINE2, 1.3, 1.3, z), z)
    np.testing.assert_allclose(eg.flow_jacobian(SINE2, 0.7, 0.7, z), np.eye(4))


def test_flow_harmonic_rotation(rng):
    # unit harmonic oscillator: the flow is clockwise rotation in (q, p)
    for t in (0.5, 1.7):
        z0 = rng.normal(size=2)
        zt = eg.flow(HARM, t, 0.0, z0, tol=1e-12)
        rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
        np.testing.assert_allclose(zt, rot @ z0, atol=1e-10)
        dphi = eg.flow_jacobian(HARM, t, 0.0, z0, tol=1e-12)
        np.testing.assert_allclose(dphi, rot, atol=1e-9)


def test_flow_composition_inverse(rng):
    t, s = 2.0, 0.0
    for _ in range(20):
        z = rng.normal(size=4) * 0.8
        zt = eg.flow(SINE2, t, s, z, tol=1e-11)
        back = eg.flow(SINE2, s, t, zt, tol=1e-11)
        assert np.linalg.norm(back - z) <= 1e-10 * 10


def test_flow_jacobian_symplectic(rng):
    J = pk.symplectic_j(2)
    for _ in range(5):
        z = rng.normal(size=4) * 0.7
        dphi = eg.flow_jacobian(SINE2, 3.0, 0.0, z, tol=1e-11)
        assert np.linalg.norm(dphi.T @ J @ dphi - J) <= 1e-8


def test_flow_batch_matches_single(rng):
    zs = rng.normal(size=(40, 4)) * 0.6
    batch = eg.flow(SINE2, 1.5, 0.0, zs, tol=1e-10)
    for i in (0, 13, 39):
        single = eg.flow(SINE2, 1.5, 0.0, zs[i], tol=1e-12)
        assert np.linalg.norm(batch[i] - single) <= 1e-8


def test_transport_identity_and_energy_conservation(rng):
    a = fl.coordinate_symbol(1, 1)
    at = eg.transport(a, PEND, 0.0, 0.0)
    zs = rng.normal(size=(10, 2))
    np.testing.assert_allclose(at.value(0.0, zs), a.value(0.0, zs))
    # autonomous energy invariance: h(Phi(z)) = h(z)
    ht = eg.transport(PEND, PEND, 2.5, 0.0, tol=1e-11)
    np.testing.assert_allclose(ht.value(0.0, zs), PEND.value(0.0, zs), atol=1e-8)


def test_transport_gradient_chain_rule(rng):
    a = PEND  # transported Hamiltonian has nontrivial gradient
    at = eg.transport(a, PEND, 1.2, 0.0, tol=1e-11)
    z = rng.normal(size=(3, 2)) * 0.8
    g = at.grad(0.0, z)
    step = 1e-6
    for i in range(3):
        for j in range(2):
            e = np.zeros(2)
            e[j] = step
            fd = (
                at.value(0.0, (z[i] + e)[None, :])[0] - at.value(0.0, (z[i] - e)[None, :])[0]
            ) / (2 * step)
            assert abs(g[i, j] - fd) <= 1e-6


def test_transport_solves_transport_equation(rng):
    # d/dtau a_tilde(t, tau) = -{h(tau), a_tilde(t, tau)} with {f, g} = grad f . J grad g
    t = 1.5
    a = fl.coordinate_symbol(1, 1)
    J = pk.symplectic_j(1)
    for _ in range(5):
        tau = float(rng.uniform(0.2, 1.3))
        z = rng.normal(size=2) * 0.7
        dtau = 1e-5
        up = eg.transport(a, PEND, t, tau + dtau, tol=1e-11)
        dn = eg.transport(a, PEND, t, tau - dtau, tol=1e-11)
        lhs = (up.value(0.0, z[None, :])[0] - dn.value(0.0, z[None, :])[0]) / (2 * dtau)
        mid = eg.transport(a, PEND, t, tau, tol=1e-11)
        gh = PEND.grad(tau, z[None, :])[0]
        ga = mid.grad(0.0, z[None, :])[0]
        rhs = -float(gh @ (J @ ga))
        assert abs(lhs - rhs) <= 1e-5


def test_egorov_residual_zero_at_t0(rng):
    fields = fl.builtin("torsional", {"c": 1.0, "dim": 1, "A0": [0.25]})
    u0 = pk.normalize(pk.GaussianPacket(eps=0.1, q=[0.0], p=[0.4], C=[[1j]]))
    grid = gr.Grid(centers=[0.0], halfwidths=[5.0], shape=[256])
    a = fl.coordinate_symbol(1, 1)
    assert eg.egorov_residual(a, fields, u0, 0.1, 0.0, grid=grid) == 0.0


def test_egorov_residual_quadratic_regime():
    # quadratic Hamiltonian: the transported quantization is exact, so the
    # residual sits at the grid/Krylov tolerance floor
    fields = fl.builtin("harmonic", {"omega": [1.0], "A0": [0.2]})
    eps = 0.1
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.3], p=[0.2], C=[[1j]]))
    grid = gr.Grid(centers=[0.0], halfwidths=[6.0], shape=[512])

    def bounded(t, Z):
        return np.sin(Z[:, 0] + 0.5 * Z[:, 1])

    resid = eg.egorov_residual(bounded, fields, u0, eps, 1.0, grid=grid, krylov_dim=32)
    assert resid <= 1e-7


def test_egorov_residual_requires_1d(rng):
    fields = fl.builtin("sine_field_2d", {"a": 0.2, "potential": {"kind": "torsional", "c": 1.0}})
    u0 = pk.normalize(pk.GaussianPacket(eps=0.1, q=[0.0, 0.0], p=[0.1, 0.1], C=1j * np.eye(2)))
    with pytest.raises(gr.GridError):
        eg.egorov_residual(fl.coordinate_symbol(2, 2), fields, u0, 0.1, 1.0, grid=None)


def test_flowmap_caches_single_points(rng):
    fm = eg.FlowMap(PEND, tol=1e-10)
    z = rng.normal(size=2)
    a = fm(1.0, 0.0, z)
    b = fm(1.0, 0.0, z)
    np.testing.assert_allclose(a, b)
    assert len(fm._cache) == 1
