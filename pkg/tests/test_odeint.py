import numpy as np
import pytest

from magpack import fields as fl
from magpack import odeint as oi
from magpack import packet as pk
from conftest import random_width


def exact_harmonic(t, eps, zeta0):
    """Unit-frequency harmonic oscillator solution from (q, p, C) = (1, 0, i).

    The center follows the classical circle, the width is stationary, and the
    phase integrates zetadot = -cos(2t)/2 - eps/2.
    """
    q = np.cos(t)
    p = -np.sin(t)
    zeta = zeta0 - 0.25 * np.sin(2.0 * t) - 0.5 * eps * t
    return q, p, zeta


def test_zero_rhs_constant_trajectory():
    y0 = np.array([1.0, -2.0, 3.0])
    traj = oi.integrate(lambda t, y: np.zeros_like(y), y0, 0.0, 2.0, sample_times=[0.0, 1.0, 2.0])
    np.testing.assert_allclose(traj.states, np.tile(y0, (3, 1)))


def test_dp54_harmonic_vs_exact_solution():
    eps = 0.2
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[1.0], p=[0.0], C=[[1j]]))
    packer, rhs, monitor, diag = oi.variational_system(fields, eps, quad_order=8)
    T = 2.0 * np.pi
    traj = oi.integrate(rhs, packer.pack_packet(u0), 0.0, T, tol=1e-10, monitor=monitor)
    u1 = packer.packet(traj.final_state, eps)
    q_ref, p_ref, zeta_ref = exact_harmonic(T, eps, u0.zeta)
    assert abs(u1.q[0] - q_ref) <= 1e-9
    assert abs(u1.p[0] - p_ref) <= 1e-9
    assert abs(u1.C[0, 0] - 1j) <= 1e-9
    assert abs(u1.zeta - zeta_ref) <= 1e-8


def test_rk4_self_convergence_order():
    eps = 0.2
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[1.0], p=[0.0], C=[[1j]]))
    packer, rhs, _, _ = oi.variational_system(fields, eps, quad_order=8)
    y0 = packer.pack_packet(u0)
    steps = [0.2, 0.1, 0.05, 0.025]
    errs = []
    q_ref, p_ref, zeta_ref = exact_harmonic(1.0, eps, u0.zeta)
    ref = np.array([q_ref, p_ref])
    for h in steps:
        traj = oi.integrate(rhs, y0, 0.0, 1.0, method="rk4_fixed", step=h)
        u1 = packer.packet(traj.final_state, eps)
        errs.append(np.linalg.norm(np.array([u1.q[0], u1.p[0]]) - ref))
    slope = np.polyfit(np.log10(steps), np.log10(errs), 1)[0]
    assert abs(slope - 4.0) <= 0.2


def test_dense_sampling_accuracy():
    eps = 0.1
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[1.0], p=[0.0], C=[[1j]]))
    packer, rhs, _, _ = oi.variational_system(fields, eps, quad_order=8)
    samples = np.linspace(0.0, 3.0, 17)
    traj = oi.integrate(rhs, packer.pack_packet(u0), 0.0, 3.0, tol=1e-10, sample_times=samples)
    for t, y in zip(traj.times, traj.states):
        u = packer.packet(y, eps)
        assert abs(u.q[0] - np.cos(t)) <= 1e-8
        assert abs(u.p[0] + np.sin(t)) <= 1e-8


def test_step_underflow_raises():
    def stiff(t, y):
        return np.array([1e12 * np.sign(0.5 - t) * abs(y[0]) ** 0.1 + 1e12])

    with pytest.raises(oi.IntegrationError):
        oi.integrate(stiff, np.array([1.0]), 0.0, 1.0, tol=1e-13, max_steps=10_000)


def test_monitor_negative_control():
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    eps = 0.1
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.0], p=[0.0], C=[[1j]]))
    thresholds = oi.MonitorThresholds(rho_min=2.0)  # adversarial: Im C = 1 < 2
    packer, rhs, monitor, _ = oi.variational_system(fields, eps, thresholds=thresholds)
    with pytest.raises(oi.MonitorViolation) as exc:
        oi.integrate(rhs, packer.pack_packet(u0), 0.0, 1.0, tol=1e-8, monitor=monitor)
    assert exc.value.t == 0.0  # violated already at the initial state


def test_monitor_passes_harmonic():
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    eps = 0.1
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[1.0], p=[0.0], C=[[1j]]))
    packer, rhs, monitor, diag = oi.variational_system(fields, eps, quad_order=8)
    traj = oi.integrate(
        rhs,
        packer.pack_packet(u0),
        0.0,
        2.0,
        tol=1e-10,
        monitor=monitor,
        sample_times=np.linspace(0, 2, 9),
        diagnostics=diag,
    )
    np.testing.assert_allclose(traj.diagnostics["min_eig_ci"], 1.0, atol=1e-9)


def test_pack_roundtrip_variational(rng):
    packer = oi.VariationalPacker(3)
    C = random_width(rng, 3)
    y = packer.pack(rng.normal(size=3), rng.normal(size=3), C, 0.3 - 0.7j)
    q, p, C2, zeta = packer.unpack(y)
    np.testing.assert_allclose(C2, C, atol=1e-15)
    assert np.linalg.norm(C2 - C2.T) == 0.0  # symmetry is structural
    y2 = packer.pack(q, p, C2, zeta)
    np.testing.assert_allclose(y, y2, atol=1e-15)


def test_pack_roundtrip_hagedorn(rng):
    packer = oi.HagedornPacker(2)
    Q = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    P = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    y = packer.pack(rng.normal(size=2), rng.normal(size=2), Q, P, 1.0 + 2.0j)
    q, p, Q2, P2, zeta = packer.unpack(y)
    np.testing.assert_allclose(Q2, Q)
    np.testing.assert_allclose(P2, P)
    np.testing.assert_allclose(packer.pack(q, p, Q2, P2, zeta), y)


def test_norm_conservation_along_trajectory():
    eps = 0.1
    fields = fl.builtin("sine_field_2d", {"a": 0.2, "potential": {"kind": "torsional", "c": 1.0}})
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.0, 0.0], p=[0.3, 0.1], C=1j * np.eye(2)))
    packer, rhs, monitor, diag = oi.variational_system(fields, eps, quad_order=16)
    tol = 1e-10
    traj = oi.integrate(
        rhs,
        packer.pack_packet(u0),
        0.0,
        2.0,
        tol=tol,
        monitor=monitor,
        sample_times=np.linspace(0, 2, 21),
        diagnostics=diag,
    )
    assert np.abs(traj.diagnostics["norm"] ** 2 - 1.0).max() <= 100 * tol


def test_energy_conservation_time_independent():
    eps = 0.1
    fields = fl.builtin("sine_field_2d", {"a": 0.2, "potential": {"kind": "torsional", "c": 1.0}})
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.0, 0.0], p=[0.3, 0.1], C=1j * np.eye(2)))
    packer, rhs, monitor, diag = oi.variational_system(fields, eps, quad_order=16, with_energy=True)
    tol = 1e-10
    traj = oi.integrate(
        rhs,
        packer.pack_packet(u0),
        0.0,
        2.0,
        tol=tol,
        sample_times=np.linspace(0, 2, 9),
        diagnostics=diag,
    )
    energy = traj.diagnostics["energy"]
    assert np.abs(energy - energy[0]).max() <= 1000 * tol


def test_momentum_conservation_constant_a():
    # translation-invariant fields: constant A, zero V
    eps = 0.1
    fields = fl.builtin("free", {"dim": 2, "A0": [0.4, -0.2]})
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.0, 0.0], p=[0.3, 0.1], C=1j * np.eye(2)))
    packer, rhs, _, _ = oi.variational_system(fields, eps, quad_order=8)
    traj = oi.integrate(
        rhs, packer.pack_packet(u0), 0.0, 5.0, tol=1e-10, sample_times=np.linspace(0, 5, 11)
    )
    for y in traj.states:
        _, p, _, _ = packer.unpack(y)
        assert np.abs(p - u0.p).max() <= 1e-8


def test_width_bound_eps_uniform():
    # max ||C|| over [0, T] is bounded uniformly in eps (within 5%)
    fields = fl.builtin("sine_field_2d", {"a": 0.2, "potential": {"kind": "torsional", "c": 1.0}})
    maxima = []
    for eps in (0.5, 0.25, 0.125, 0.0625):
        u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[0.0, 0.0], p=[0.2, 0.1], C=1j * np.eye(2)))
        packer, rhs, _, _ = oi.variational_system(fields, eps, quad_order=12)
        traj = oi.integrate(
            rhs, packer.pack_packet(u0), 0.0, 5.0, tol=1e-8, sample_times=np.linspace(0, 5, 51)
        )
        norms = [np.linalg.norm(packer.unpack(y)[2]) for y in traj.states]
        maxima.append(max(norms))
    spread = (max(maxima) - min(maxima)) / max(maxima)
    assert spread <= 0.05


def test_trajectory_monotone_times_required():
    with pytest.raises(oi.IntegrationError):
        oi.Trajectory(times=np.array([0.0, 0.0]), states=np.zeros((2, 1)))


def test_trajectory_csv_export(tmp_path):
    eps = 0.1
    fields = fl.builtin("harmonic", {"omega": [1.0]})
    u0 = pk.normalize(pk.GaussianPacket(eps=eps, q=[1.0], p=[0.0], C=[[1j]]))
    packer, rhs, _, diag = oi.variational_system(fields, eps, quad_order=8, with_energy=True)
    traj = oi.integrate(
        rhs,
        packer.pack_packet(u0),
        0.0,
        1.0,
        tol=1e-9,
        sample_times=np.linspace(0, 1, 5),
        diagnostics=diag,
    )
    path = tmp_path / "traj.csv"
    oi.trajectory_to_csv(traj, packer, eps, path, meta="test")
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "# test"
    header = lines[1].split(",")
    assert header[:4] == ["t", "q1", "p1", "ReC11"]
    assert len(lines) == 2 + 5
