import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from symfreeze.liouvillian import (
    ConsistencyError,
    LiouvillianError,
    StepSizeError,
    build_liouvillian,
    detect_traceless_modes,
    evolve_exact,
    full_spectrum,
    integrate_master_equation,
    lindblad_rhs,
    sector_generator,
    sector_spectrum,
    steady_states,
    unvec,
    vec,
)
from symfreeze.models import coupled_qudit_model, lossy_boson_chain_model, qubit_dephasing_toy, random_block_model


def test_vec_is_column_stacking():
    rng = np.random.default_rng(0)
    X, R, Y = (rng.standard_normal((3, 3)) for _ in range(3))
    assert np.allclose(np.kron(Y.T, X) @ vec(R), vec(X @ R @ Y))
    assert np.array_equal(unvec(vec(R), 3), R)


@pytest.mark.parametrize("factory", [random_block_model, coupled_qudit_model])
def test_generator_matches_rhs_and_preserves_trace(factory):
    m = factory()
    lv = build_liouvillian(m.H, m.jumps).matrix
    rng = np.random.default_rng(1)
    rho = rng.standard_normal((m.dim, m.dim)) + 1j * rng.standard_normal((m.dim, m.dim))
    assert np.allclose(unvec(lv @ vec(rho), m.dim), lindblad_rhs(rho, m.H, m.jumps))
    # trace functional is a left null vector
    assert np.allclose(vec(np.eye(m.dim)) @ lv, 0, atol=1e-10)


def _matched(a, b):
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max())


@pytest.mark.parametrize("factory", [lambda: random_block_model(block_dim=2), coupled_qudit_model,
                                     lambda: qubit_dephasing_toy("number", 0.7, 1.3)])
def test_sector_spectra_reassemble_full_spectrum(factory):
    m = factory()
    full = full_spectrum(m.H, m.jumps)
    parts = []
    D = len(m.structure)
    for a in range(D):
        for b in range(D):
            parts.append(sector_spectrum(m.H, m.jumps, m.structure, (a, b)).eigenvalues)
    parts = np.concatenate(parts)
    assert len(parts) == len(full)
    assert _matched(full, parts) < 1e-8 * max(1.0, np.max(np.abs(full)))


def test_conjugate_sectors():
    m = coupled_qudit_model()
    a = sector_spectrum(m.H, m.jumps, m.structure, (1, 2)).eigenvalues
    b = sector_spectrum(m.H, m.jumps, m.structure, (2, 1)).eigenvalues
    assert _matched(a, np.conj(b)) < 1e-9


def test_qudit_has_seven_steady_states_and_no_traceless_modes():
    m = coupled_qudit_model()
    ss = steady_states(m.H, m.jumps, m.structure)
    assert len(ss) == 7
    for s in ss:
        assert abs(np.trace(s.rho) - 1) < 1e-10
        assert np.min(np.linalg.eigvalsh(s.rho)) > -1e-10
        assert np.allclose(lindblad_rhs(s.rho, m.H, m.jumps), 0, atol=1e-9)
    assert detect_traceless_modes(m.structure, m.H, m.jumps) == []
    full = full_spectrum(m.H, m.jumps)
    assert int(np.sum(np.abs(full) < 1e-8)) == 7


def test_similar_toy_gap_open():
    m = qubit_dephasing_toy("sigma_z", gamma=1.0, omega=0.5)
    spec = sector_spectrum(m.H, m.jumps, m.structure, (0, 1))
    assert np.allclose(spec.eigenvalues, [-0.5j - 2.0])
    assert spec.gap == pytest.approx(2.0)


def test_chain_l4_has_no_traceless_modes():
    m = lossy_boson_chain_model(4)
    assert detect_traceless_modes(m.structure, m.H, m.jumps) == []


def test_rk4_agrees_with_expm():
    m = coupled_qudit_model(gamma=1.0)
    rng = np.random.default_rng(2)
    psi = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    psi /= np.linalg.norm(psi)
    rho0 = np.outer(psi, psi.conj())
    r1 = integrate_master_equation(rho0, m.H, m.jumps, 2.0, dt_oracle=2.5e-4)
    r2 = evolve_exact(rho0, m.H, m.jumps, 2.0)
    assert np.max(np.abs(r1 - r2)) < 1e-8


def test_integrator_input_checks():
    m = qubit_dephasing_toy("number")
    with pytest.raises(LiouvillianError):
        integrate_master_equation(np.diag([0.5, 0.6]), m.H, m.jumps, 1.0)
    with pytest.raises(LiouvillianError):
        integrate_master_equation(np.array([[0.5, 1], [0, 0.5]]), m.H, m.jumps, 1.0)
    with pytest.raises(StepSizeError):
        integrate_master_equation(np.diag([0.5, 0.5]), m.H, [(m.jump_ops[0], 5e3)], 1.0, dt_oracle=1e-2)


def test_full_spectrum_refuses_large_models():
    m = lossy_boson_chain_model(4)
    with pytest.raises(LiouvillianError):
        full_spectrum(m.H, m.jumps)


def test_growing_mode_is_inconsistent():
    H = np.zeros((2, 2), dtype=complex)
    bad = [(np.eye(2), -1.0)]
    with pytest.raises(LiouvillianError):
        build_liouvillian(H, bad)
    # a non-Hermitian "Hamiltonian" with gain produces Re lambda > 0
    from symfreeze.symmetry import BlockStructure, Subspace

    st = BlockStructure((Subspace(0.0, (0,)), Subspace(1.0, (1,))), 2)
    Hg = np.diag([1j, 0]).astype(complex)
    with pytest.raises(ConsistencyError):
        sector_spectrum(Hg, [(np.eye(2), 0.0)], st, (0, 1))


def test_sector_generator_shape():
    m = lossy_boson_chain_model(4)
    g = sector_generator(m.H, m.jumps, m.structure, (0, 1))
    assert g.shape == (18 * 24, 18 * 24)
