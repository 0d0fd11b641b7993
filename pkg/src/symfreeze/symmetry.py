"""Strong-symmetry block structure: detection, projection and subspace similarity.

A strong symmetry ``A`` commutes with the Hamiltonian, every jump operator and
every jump adjoint.  Its eigenspaces ("subspaces") are left invariant by all of
them, so each of those operators is block diagonal in an eigenbasis of ``A``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class SymmetryError(ValueError):
    """Validation failure: bad shapes, non-Hermitian symmetry, broken partition."""


class DegeneracyError(SymmetryError):
    """Eigenvalues of the symmetry operator cannot be grouped unambiguously."""


@dataclass(frozen=True)
class Subspace:
    lam: float
    indices: tuple[int, ...]
    label: Hashable = None

    @property
    def dim(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class BlockStructure:
    """Partition of basis indices into symmetry subspaces.

    ``basis`` holds, column by column, the vectors that the indices refer to,
    written in the original basis.  ``None`` means the original basis itself.
    """

    subspaces: tuple[Subspace, ...]
    dim_total: int
    basis: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        seen = np.zeros(self.dim_total, dtype=int)
        for sub in self.subspaces:
            if sub.dim == 0:
                raise SymmetryError("empty subspace")
            for i in sub.indices:
                if not 0 <= i < self.dim_total:
                    raise SymmetryError(f"index {i} outside 0..{self.dim_total - 1}")
                seen[i] += 1
        if np.any(seen != 1):
            raise SymmetryError("subspace indices do not partition the basis")
        lams = [s.lam for s in self.subspaces]
        if len(set(lams)) != len(lams):
            raise SymmetryError("symmetry eigenvalues must be pairwise distinct")
        if self.basis is not None and self.basis.shape != (self.dim_total, self.dim_total):
            raise SymmetryError("basis matrix has the wrong shape")

    def __len__(self) -> int:
        return len(self.subspaces)

    @property
    def dims(self) -> list[int]:
        return [s.dim for s in self.subspaces]

    @property
    def labels(self) -> list:
        return [s.label for s in self.subspaces]

    @property
    def order(self) -> np.ndarray:
        """Basis indices concatenated subspace by subspace."""
        return np.concatenate([np.asarray(s.indices, dtype=int) for s in self.subspaces])

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(np.int64)

    def index_of(self, label: Hashable) -> int:
        for k, sub in enumerate(self.subspaces):
            if sub.label == label:
                return k
        raise KeyError(label)

    def check_alpha(self, alpha: int) -> None:
        if not 0 <= alpha < len(self.subspaces):
            raise IndexError(f"subspace {alpha} out of range 0..{len(self.subspaces) - 1}")

    def block_basis(self) -> np.ndarray:
        """Unitary whose columns are the basis vectors grouped subspace by subspace."""
        if self.basis is None:
            u = np.eye(self.dim_total, dtype=complex)
            return u[:, self.order]
        return np.asarray(self.basis, dtype=complex)[:, self.order]

    def to_block_basis(self, op: np.ndarray) -> np.ndarray:
        if self.basis is None:
            order = self.order
            return np.asarray(op)[np.ix_(order, order)]
        u = self.block_basis()
        return u.conj().T @ op @ u

    def from_block_basis(self, op: np.ndarray) -> np.ndarray:
        if self.basis is None:
            order = self.order
            out = np.zeros_like(op)
            out[np.ix_(order, order)] = op
            return out
        u = self.block_basis()
        return u @ op @ u.conj().T

    def vector_to_block_basis(self, psi: np.ndarray) -> np.ndarray:
        if self.basis is None:
            return np.asarray(psi)[self.order]
        return self.block_basis().conj().T @ psi

    def vector_from_block_basis(self, phi: np.ndarray) -> np.ndarray:
        if self.basis is None:
            out = np.zeros_like(phi)
            out[self.order] = phi
            return out
        return self.block_basis() @ phi

    def projector(self, alpha: int) -> np.ndarray:
        """Full-space projector P_alpha in the original basis."""
        self.check_alpha(alpha)
        idx = list(self.subspaces[alpha].indices)
        if self.basis is None:
            p = np.zeros((self.dim_total, self.dim_total), dtype=complex)
            p[idx, idx] = 1.0
            return p
        v = np.asarray(self.basis, dtype=complex)[:, idx]
        return v @ v.conj().T

    def symmetry_operator(self) -> np.ndarray:
        """The operator sum_alpha lam_alpha P_alpha."""
        return sum(s.lam * self.projector(k) for k, s in enumerate(self.subspaces))


@dataclass(eq=False)
class BlockOperator:
    structure: BlockStructure
    blocks: list[np.ndarray]

    @classmethod
    def from_operator(cls, op: np.ndarray, structure: BlockStructure, tol: float = 1e-12) -> "BlockOperator":
        blocks = [project(op, structure, a) for a in range(len(structure))]
        out = cls(structure, blocks)
        scale = max(np.linalg.norm(op, 2), 1e-300)
        if np.linalg.norm(out.to_full() - op) > tol * scale:
            raise SymmetryError("operator has weight outside the diagonal blocks")
        return out

    def to_full(self) -> np.ndarray:
        n = self.structure.dim_total
        off = self.structure.offsets
        full = np.zeros((n, n), dtype=complex)
        for a, b in enumerate(self.blocks):
            full[off[a]:off[a + 1], off[a]:off[a + 1]] = b
        return self.structure.from_block_basis(full)


@dataclass(frozen=True)
class SimilarityVerdict:
    pair: tuple[int, int]
    similar: bool
    residual: float
    phases: tuple[float, ...] | None = None
    # permutation mapping basis positions of the first block onto the second
    permutation: tuple[int, ...] | None = None


def _square(m, name):
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SymmetryError(f"{name} must be a square matrix, got shape {m.shape}")
    return m


def _check_dims(H, jumps, A=None):
    H = _square(H, "H")
    n = H.shape[0]
    js = [_square(L, f"L_{j}") for j, L in enumerate(jumps)]
    for j, L in enumerate(js):
        if L.shape[0] != n:
            raise SymmetryError(f"L_{j} has dimension {L.shape[0]}, H has {n}")
    if A is not None:
        A = _square(A, "A")
        if A.shape[0] != n:
            raise SymmetryError(f"A has dimension {A.shape[0]}, H has {n}")
    return H, js, A


def _comm(x, y):
    return x @ y - y @ x


def verify_strong_symmetry(H, jumps: Sequence[np.ndarray], A, tol: float = 1e-10) -> bool:
    """True iff A commutes with H, every L_j and every L_j^dagger (Frobenius, relative)."""
    H, js, A = _check_dims(H, jumps, A)
    norm_a = np.linalg.norm(A)
    if np.linalg.norm(A - A.conj().T) > tol * max(norm_a, 1.0):
        raise SymmetryError("symmetry operator A is not Hermitian")
    scale = max([np.linalg.norm(H), norm_a] + [np.linalg.norm(L) for L in js])
    scale = max(scale, 1e-300)
    if np.linalg.norm(_comm(H, A)) > tol * scale:
        return False
    for L in js:
        if np.linalg.norm(_comm(L, A)) > tol * scale:
            return False
        if np.linalg.norm(_comm(L.conj().T, A)) > tol * scale:
            return False
    return True


def block_structure_from_symmetry(A, tol: float = 1e-9, labels: Sequence | None = None):
    """Group the eigenvalues of a Hermitian A into subspaces.

    Returns ``(structure, U)`` where U maps block-basis coordinates (in the
    order of ``structure.order``) to the original basis.  A diagonal A keeps the
    original basis, so subspace indices are then plain basis indices.
    """
    A = _square(A, "A")
    n = A.shape[0]
    if np.linalg.norm(A - A.conj().T) > tol * max(np.linalg.norm(A), 1.0):
        raise SymmetryError("symmetry operator A is not Hermitian")
    off = A - np.diag(np.diag(A))
    if np.max(np.abs(off), initial=0.0) <= tol * max(np.max(np.abs(A)), 1e-300):
        vals = np.real(np.diag(A)).astype(float)
        basis = None
    else:
        vals, basis = np.linalg.eigh(A)
    norm = max(np.max(np.abs(vals)), 1e-300)
    gap_tol = tol * norm
    order = sorted(range(n), key=lambda i: (vals[i], i))
    groups: list[list[int]] = [[order[0]]]
    for prev, cur in zip(order, order[1:]):
        if vals[cur] - vals[prev] <= gap_tol:
            groups[-1].append(cur)
        else:
            groups.append([cur])
    subspaces = []
    for k, g in enumerate(groups):
        spread = vals[g[-1]] - vals[g[0]]
        if spread > gap_tol:
            raise DegeneracyError(
                f"eigenvalue cluster {vals[g[0]]:.6g}..{vals[g[-1]]:.6g} chains past tolerance {gap_tol:.3g}"
            )
        lab = labels[k] if labels is not None else float(np.mean(vals[g]))
        subspaces.append(Subspace(float(np.mean(vals[g])), tuple(sorted(g)), lab))
    structure = BlockStructure(tuple(subspaces), n, basis)
    return structure, structure.block_basis()


def infer_block_structure(H, jumps: Sequence[np.ndarray], tol: float = 1e-12) -> BlockStructure:
    """Finest simultaneous block decomposition of H and the jumps in the given basis."""
    H, js, _ = _check_dims(H, jumps)
    n = H.shape[0]
    adj = np.abs(H) > tol
    for L in js:
        adj |= np.abs(L) > tol
    adj = adj | adj.T
    _, comp = connected_components(csr_matrix(adj), directed=False)
    # relabel by smallest member so the result does not depend on traversal order
    first: dict[int, int] = {}
    for i, c in enumerate(comp):
        first.setdefault(int(c), i)
    ranked = sorted(first, key=first.get)
    subspaces = []
    for k, c in enumerate(ranked):
        idx = tuple(int(i) for i in np.flatnonzero(comp == c))
        subspaces.append(Subspace(float(k), idx, k))
    return BlockStructure(tuple(subspaces), n, None)


def project(op, structure: BlockStructure, alpha: int) -> np.ndarray:
    """The d_alpha x d_alpha block P_alpha O P_alpha in the block basis."""
    structure.check_alpha(alpha)
    idx = list(structure.subspaces[alpha].indices)
    op = np.asarray(op)
    if structure.basis is None:
        return op[np.ix_(idx, idx)].astype(complex)
    v = np.asarray(structure.basis, dtype=complex)[:, idx]
    return v.conj().T @ op @ v


def same_partition(s1: BlockStructure, s2: BlockStructure) -> bool:
    """Equal partitions of the basis up to relabelling of subspaces."""
    if s1.dim_total != s2.dim_total:
        return False
    return {frozenset(s.indices) for s in s1.subspaces} == {frozenset(s.indices) for s in s2.subspaces}


def _phase_residual(b1: np.ndarray, b2: np.ndarray) -> tuple[float, float]:
    """Best phase with b1 = e^{i theta} b2 from the largest element, and the residual."""
    m1, m2 = np.max(np.abs(b1), initial=0.0), np.max(np.abs(b2), initial=0.0)
    if m1 == 0.0 and m2 == 0.0:
        return 0.0, 0.0
    if m1 == 0.0 or m2 == 0.0:
        return 0.0, np.inf
    k = np.unravel_index(np.argmax(np.abs(b1)), b1.shape)
    if b2[k] == 0:
        return 0.0, np.inf
    theta = float(np.angle(b1[k] / b2[k]))
    return theta, float(np.max(np.abs(b1 - np.exp(1j * theta) * b2)))


def _candidate_permutations(h1, h2, abs_l1, abs_l2, tol):
    """Backtracking search over basis permutations consistent with |H| and |L_j| entries."""
    d = h1.shape[0]
    perm = [-1] * d
    used = [False] * d

    def consistent(i, pi):
        for j in range(i + 1):
            pj = pi if j == i else perm[j]
            if abs(h1[i, j] - h2[pi, pj]) > tol or abs(h1[j, i] - h2[pj, pi]) > tol:
                return False
            for a1, a2 in zip(abs_l1, abs_l2):
                if abs(a1[i, j] - a2[pi, pj]) > tol or abs(a1[j, i] - a2[pj, pi]) > tol:
                    return False
        return True

    def rec(i):
        if i == d:
            yield tuple(perm)
            return
        for pi in range(d):
            if not used[pi] and consistent(i, pi):
                perm[i] = pi
                used[pi] = True
                yield from rec(i + 1)
                used[pi] = False
                perm[i] = -1

    yield from rec(0)


def check_similar(
    H: BlockOperator,
    jumps: Sequence[BlockOperator],
    pair: tuple[int, int],
    tol: float = 1e-10,
    align: bool = True,
    max_candidates: int = 10_000,
) -> SimilarityVerdict:
    """Test whether two subspaces have equal H blocks and phase-equivalent jump blocks.

    Blocks are first compared elementwise in the stored basis order.  When that
    fails and ``align`` is set, basis permutations of the second block are
    searched as well, since the elementwise condition depends on how each
    subspace's basis happens to be ordered.
    """
    a1, a2 = pair
    H.structure.check_alpha(a1)
    H.structure.check_alpha(a2)
    h1, h2 = H.blocks[a1], H.blocks[a2]
    if h1.shape != h2.shape:
        return SimilarityVerdict(pair, False, np.inf)
    l1 = [J.blocks[a1] for J in jumps]
    l2 = [J.blocks[a2] for J in jumps]
    scale = max([1.0, np.max(np.abs(h1), initial=0.0)] + [np.max(np.abs(b), initial=0.0) for b in l1])
    atol = tol * scale

    def evaluate(p):
        idx = np.asarray(p)
        res = float(np.max(np.abs(h1 - h2[np.ix_(idx, idx)]), initial=0.0))
        phases = []
        for b1, b2 in zip(l1, l2):
            theta, r = _phase_residual(b1, b2[np.ix_(idx, idx)])
            phases.append(theta)
            res = max(res, r)
        return res, tuple(phases)

    d = h1.shape[0]
    identity = tuple(range(d))
    best_res, best_phases = evaluate(identity)
    best_perm = identity
    if best_res > atol and align:
        abs1 = [np.abs(b) for b in l1]
        abs2 = [np.abs(b) for b in l2]
        for count, p in enumerate(_candidate_permutations(h1, h2, abs1, abs2, atol)):
            if count >= max_candidates:
                break
            res, phases = evaluate(p)
            if res < best_res:
                best_res, best_phases, best_perm = res, phases, p
            if res <= atol:
                break
    similar = bool(best_res <= atol)
    return SimilarityVerdict(
        pair,
        similar,
        best_res,
        best_phases if similar else None,
        best_perm if similar else None,
    )


def off_block_leakage(op, structure: BlockStructure, alpha: int) -> float:
    """Norm of (1 - P_alpha) O P_alpha; zero for operators respecting the symmetry."""
    p = structure.projector(alpha)
    return float(np.linalg.norm((np.eye(structure.dim_total) - p) @ op @ p))
