import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from symfreeze.models import coupled_qudit_model, lossy_boson_chain_model, random_block_model
from symfreeze.symmetry import (
    BlockOperator,
    BlockStructure,
    DegeneracyError,
    Subspace,
    SymmetryError,
    block_structure_from_symmetry,
    check_similar,
    infer_block_structure,
    off_block_leakage,
    project,
    same_partition,
    verify_strong_symmetry,
)


def _projector_algebra(st):
    n = st.dim_total
    ps = [st.projector(a) for a in range(len(st))]
    assert np.allclose(sum(ps), np.eye(n), atol=1e-12)
    for a, p in enumerate(ps):
        assert np.allclose(p @ p, p, atol=1e-12)
        assert np.allclose(p, p.conj().T, atol=1e-12)
        assert abs(np.trace(p).real - st.dims[a]) < 1e-10
        for b in range(a + 1, len(ps)):
            assert np.allclose(p @ ps[b], 0, atol=1e-12)


@pytest.mark.parametrize("factory", [random_block_model, coupled_qudit_model, lambda: lossy_boson_chain_model(4)])
def test_model_projectors_partition_unity(factory):
    _projector_algebra(factory().structure)


def test_partition_must_cover_basis():
    with pytest.raises(SymmetryError):
        BlockStructure((Subspace(0.0, (0,)), Subspace(1.0, (2,))), 3)
    with pytest.raises(SymmetryError):
        BlockStructure((Subspace(0.0, (0, 1)), Subspace(1.0, (1, 2))), 3)
    with pytest.raises(SymmetryError):
        BlockStructure((Subspace(0.0, (0,)), Subspace(0.0, (1,))), 2)


def test_non_hermitian_symmetry_rejected():
    A = np.array([[0, 1], [0, 0]], dtype=complex)
    with pytest.raises(SymmetryError):
        verify_strong_symmetry(np.eye(2), [np.eye(2)], A)
    with pytest.raises(SymmetryError):
        block_structure_from_symmetry(A)


def test_dimension_mismatch_rejected():
    with pytest.raises(SymmetryError):
        verify_strong_symmetry(np.eye(2), [np.eye(3)], np.eye(2))


def test_pauli_x_breaks_sigma_z_symmetry():
    sz = np.diag([1.0, -1.0]).astype(complex)
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    assert verify_strong_symmetry(sz, [sz], sz)
    assert not verify_strong_symmetry(sx, [sz], sz)


def test_weak_only_symmetry_fails():
    # L = sigma^- commutes with nothing diagonal except the identity
    sm = np.array([[0, 0], [1, 0]], dtype=complex)
    assert not verify_strong_symmetry(np.zeros((2, 2)), [sm], np.diag([0.0, 1.0]))


def test_degenerate_chain_raises():
    A = np.diag([0.0, 0.6e-9, 1.2e-9, 1.8e-9]) + np.diag([0, 0, 0, 1.0])
    with pytest.raises(DegeneracyError):
        block_structure_from_symmetry(A, tol=1e-9)


def test_non_diagonal_symmetry_uses_eigenbasis():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    A = q @ np.diag([1.0, 1.0, -1.0, 2.0]) @ q.conj().T
    st, U = block_structure_from_symmetry(A)
    assert st.dims == [1, 2, 1]
    assert np.allclose(U.conj().T @ U, np.eye(4), atol=1e-12)
    _projector_algebra(st)
    assert np.allclose(st.symmetry_operator(), A, atol=1e-10)


def test_qudit_structure_matches_magnetisation():
    m = coupled_qudit_model()
    assert m.structure.dims == [1, 2, 3, 4, 3, 2, 1]
    assert m.structure.labels == [-3, -2, -1, 0, 1, 2, 3]
    assert verify_strong_symmetry(m.H, m.jump_ops, m.symmetry_op)


@pytest.mark.parametrize("factory", [random_block_model, coupled_qudit_model, lambda: lossy_boson_chain_model(4)])
def test_inferred_partition_equals_declared(factory):
    m = factory()
    assert same_partition(m.structure, infer_block_structure(m.H, m.jump_ops))


def test_block_operator_round_trip_and_leakage():
    m = coupled_qudit_model()
    bo = BlockOperator.from_operator(m.H, m.structure)
    assert np.allclose(bo.to_full(), m.H)
    for a in range(len(m.structure)):
        assert off_block_leakage(m.H, m.structure, a) < 1e-12
    sx = np.kron(np.eye(4), np.diag(np.ones(3), 1))
    with pytest.raises(SymmetryError):
        BlockOperator.from_operator(sx.astype(complex), m.structure)


def _block_ops(m):
    return (BlockOperator.from_operator(m.H, m.structure),
            [BlockOperator.from_operator(L, m.structure) for L in m.jump_ops])


def test_qudit_opposite_magnetisations_are_similar_with_pi_phase():
    m = coupled_qudit_model()
    hb, jb = _block_ops(m)
    for a, b in [(0, 6), (1, 5), (2, 4)]:
        v = check_similar(hb, jb, (a, b))
        assert v.similar
        assert abs(abs(v.phases[0]) - np.pi) < 1e-10
    assert not check_similar(hb, jb, (1, 2)).similar
    # without basis alignment the dim-2 pair is missed, since its bases run in opposite order
    assert not check_similar(hb, jb, (1, 5), align=False).similar


def test_random_blocks_not_similar():
    m = random_block_model()
    hb, jb = _block_ops(m)
    assert not any(check_similar(hb, jb, (a, b)).similar for a in range(4) for b in range(a + 1, 4))


@settings(max_examples=25, deadline=None)
@given(seed=hst.integers(0, 2**31), d=hst.integers(1, 4), theta=hst.floats(-3.0, 3.0))
def test_similarity_detects_permuted_phase_copies(seed, d, theta):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    h = h + h.conj().T
    lb = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    perm = rng.permutation(d)
    P = np.eye(d)[:, perm]
    H = np.zeros((2 * d, 2 * d), dtype=complex)
    L = np.zeros_like(H)
    H[:d, :d], H[d:, d:] = h, P @ h @ P.T
    L[:d, :d], L[d:, d:] = lb, np.exp(1j * theta) * P @ lb @ P.T
    st = BlockStructure((Subspace(0.0, tuple(range(d))), Subspace(1.0, tuple(range(d, 2 * d)))), 2 * d)
    hb = BlockOperator.from_operator(H, st)
    jb = [BlockOperator.from_operator(L, st)]
    fwd = check_similar(hb, jb, (0, 1))
    back = check_similar(hb, jb, (1, 0))
    assert fwd.similar and back.similar
    assert abs(np.exp(1j * fwd.phases[0]) - np.exp(-1j * theta)) < 1e-8


@settings(max_examples=25, deadline=None)
@given(seed=hst.integers(0, 2**31))
def test_similarity_verdict_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    d = 2
    H = np.zeros((4, 4), dtype=complex)
    L = np.zeros_like(H)
    for s in (slice(0, 2), slice(2, 4)):
        g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        H[s, s] = g + g.conj().T
        L[s, s] = rng.standard_normal((d, d))
    st = BlockStructure((Subspace(0.0, (0, 1)), Subspace(1.0, (2, 3))), 4)
    hb = BlockOperator.from_operator(H, st)
    jb = [BlockOperator.from_operator(L, st)]
    assert check_similar(hb, jb, (0, 1)).similar == check_similar(hb, jb, (1, 0)).similar


def test_project_matches_block_basis_slice():
    m = lossy_boson_chain_model(4)
    st = m.structure
    hb = st.to_block_basis(m.H)
    off = st.offsets
    for a in range(len(st)):
        assert np.allclose(project(m.H, st, a), hb[off[a]:off[a + 1], off[a]:off[a + 1]])
