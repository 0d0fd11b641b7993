"""Dense superoperator tools for the Lindblad generator.

Vectorisation is column stacking throughout: vec(rho) stacks the columns of
rho, so X rho Y maps to (Y^T kron X) vec(rho).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .symmetry import BlockStructure, project

CONVENTION = "column-stacking"
MAX_FULL_DIM = 24


class LiouvillianError(ValueError):
    pass


class ConsistencyError(RuntimeError):
    """A result contradicts a structural guarantee (e.g. a diagonal sector without steady state)."""


class StepSizeError(RuntimeError):
    pass


@dataclass(eq=False)
class VectorizedLiouvillian:
    matrix: np.ndarray
    convention: str = CONVENTION

    @property
    def dim(self) -> int:
        return int(round(math.sqrt(self.matrix.shape[0])))


@dataclass(eq=False)
class SectorSpectrum:
    pair: tuple[int, int]
    eigenvalues: np.ndarray
    gap: float
    tol: float
    traceless_nondecaying: np.ndarray
    eigenvectors: np.ndarray | None = field(default=None, repr=False)

    @property
    def gap_closed(self) -> bool:
        return self.gap <= self.tol


@dataclass(eq=False)
class SteadyState:
    sector: int
    rho: np.ndarray
    residual: float
    degeneracy: int = 1


@dataclass(frozen=True)
class TracelessMode:
    pair: tuple[int, int]
    eigenvalues: tuple[complex, ...]

    @property
    def kind(self) -> str:
        """``steady`` for lambda = 0 coherences, ``oscillating`` for purely imaginary ones."""
        zero = [abs(ev.imag) <= 1e-8 * max(1.0, abs(ev)) for ev in self.eigenvalues]
        if all(zero):
            return "steady"
        if not any(zero):
            return "oscillating"
        return "mixed"


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int | None = None) -> np.ndarray:
    return np.asarray(v).reshape((rows, rows if cols is None else cols), order="F")


def _jump_list(jumps):
    out = []
    for item in jumps:
        L, g = item
        if g < 0:
            raise LiouvillianError("jump rates must be non-negative")
        out.append((np.asarray(L, dtype=complex), float(g)))
    return out


def _generator(h_left, h_right, jumps_left, jumps_right) -> np.ndarray:
    """Generator acting on rho of shape (len left, len right)."""
    dl, dr = h_left.shape[0], h_right.shape[0]
    il, ir = np.eye(dl), np.eye(dr)
    gen = -1j * (np.kron(ir, h_left) - np.kron(h_right.T, il))
    for (ll, g), (lr, _) in zip(jumps_left, jumps_right):
        if g == 0:
            continue
        gen += g * (np.kron(lr.conj(), ll)
                    - 0.5 * np.kron(ir, ll.conj().T @ ll)
                    - 0.5 * np.kron((lr.conj().T @ lr).T, il))
    return gen


def build_liouvillian(H, jumps, convention: str = CONVENTION) -> VectorizedLiouvillian:
    """n^2 x n^2 matrix of the Lindblad generator."""
    if convention != CONVENTION:
        raise LiouvillianError(f"only {CONVENTION!r} vectorisation is supported")
    H = np.asarray(H, dtype=complex)
    js = _jump_list(jumps)
    n = H.shape[0]
    if H.shape != (n, n) or any(L.shape != (n, n) for L, _ in js):
        raise LiouvillianError("dimension mismatch between H and jump operators")
    return VectorizedLiouvillian(_generator(H, H, js, js), convention)


def lindblad_rhs(rho, H, jumps) -> np.ndarray:
    out = -1j * (H @ rho - rho @ H)
    for L, g in jumps:
        LdL = L.conj().T @ L
        out += g * (L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL))
    return out


def sector_generator(H, jumps, structure: BlockStructure, pair: tuple[int, int]) -> np.ndarray:
    """Restriction of the generator to coherences |alpha,b><alpha',b'|."""
    a, b = pair
    structure.check_alpha(a)
    structure.check_alpha(b)
    js = _jump_list(jumps)
    ha, hb = project(H, structure, a), project(H, structure, b)
    ja = [(project(L, structure, a), g) for L, g in js]
    jb = [(project(L, structure, b), g) for L, g in js]
    return _generator(ha, hb, ja, jb)


def sector_spectrum(H, jumps, structure: BlockStructure, pair: tuple[int, int], tol: float | None = None,
                    rel_tol: float = 1e-8, vectors: bool = False) -> SectorSpectrum:
    """Full dense spectrum of one (alpha, alpha') sector with gap and non-decaying modes.

    The default tolerance is ``rel_tol`` times the sector's spectral radius.
    """
    gen = sector_generator(H, jumps, structure, pair)
    if gen.size == 0:
        raise LiouvillianError(f"sector {pair} has dimension 0")
    if vectors:
        ev, vecs = sla.eig(gen, check_finite=False)
    else:
        ev, vecs = sla.eigvals(gen, overwrite_a=True, check_finite=False), None
    radius = float(np.max(np.abs(ev)))
    if tol is None:
        tol = rel_tol * max(radius, 1e-300)
    if np.max(ev.real) > tol:
        raise ConsistencyError(f"sector {pair} has a growing mode, Re lambda = {np.max(ev.real):.3e}")
    gap = float(np.min(np.abs(ev.real)))
    closed = ev[np.abs(ev.real) <= tol]
    return SectorSpectrum(tuple(pair), ev, gap, float(tol), closed, vecs)


def inter_sector_gap(structure: BlockStructure, H, jumps, pair: tuple[int, int], tol: float | None = None) -> float:
    """Smallest |Re lambda| in the sector; a value within tolerance means the gap is closed."""
    return sector_spectrum(H, jumps, structure, pair, tol).gap


def detect_traceless_modes(structure: BlockStructure, H, jumps, tol: float | None = None,
                           rel_tol: float = 1e-8) -> list[TracelessMode]:
    """Off-diagonal sectors holding eigenvalues on the imaginary axis.

    Only alpha < alpha' is diagonalised; (alpha', alpha) carries the conjugate spectrum.
    """
    found = []
    D = len(structure)
    for a in range(D):
        for b in range(a + 1, D):
            spec = sector_spectrum(H, jumps, structure, (a, b), tol, rel_tol)
            if spec.traceless_nondecaying.size:
                found.append(TracelessMode((a, b), tuple(complex(z) for z in spec.traceless_nondecaying)))
    return found


def steady_states(H, jumps, structure: BlockStructure, tol: float | None = None,
                  rel_tol: float = 1e-8) -> list[SteadyState]:
    """Steady states of every diagonal sector, embedded in the full space.

    A sector with a degenerate null space contributes an orthonormal (Hilbert-
    Schmidt) basis of Hermitian steady states, each flagged with the degeneracy.
    """
    js = _jump_list(jumps)
    full_norm = None
    out = []
    n = structure.dim_total
    off = structure.offsets
    for a in range(len(structure)):
        gen = sector_generator(H, js, structure, (a, a))
        ev, vecs = sla.eig(gen, check_finite=False)
        gnorm = np.linalg.norm(gen, 2) if gen.shape[0] <= 400 else np.linalg.norm(gen)
        thr = tol if tol is not None else rel_tol * max(float(np.max(np.abs(ev))), 1e-300)
        null = np.flatnonzero(np.abs(ev) <= max(thr, 1e-300))
        if null.size == 0:
            raise ConsistencyError(f"diagonal sector {a} has no steady state")
        d = structure.subspaces[a].dim
        mats = []
        for k in null:
            x = unvec(vecs[:, k], d)
            tr = np.trace(x)
            if abs(tr) > 1e-12 * np.linalg.norm(x):
                x = x / tr
            mats.append(0.5 * (x + x.conj().T))
        if len(mats) > 1:
            # orthonormal basis of the Hermitian span
            stack = np.array([vec(m) for m in mats]).T
            q, r = np.linalg.qr(stack)
            keep = np.abs(np.diag(r)) > 1e-10
            mats = [unvec(q[:, i], d) for i in np.flatnonzero(keep)]
            mats = [0.5 * (m + m.conj().T) for m in mats]
        for rho_b in mats:
            tr = np.trace(rho_b)
            if abs(tr) > 1e-10:
                rho_b = rho_b / tr
            residual = float(np.linalg.norm(gen @ vec(rho_b)))
            if residual > 1e-8 * max(gnorm, 1.0) * max(np.linalg.norm(rho_b), 1.0):
                raise ConsistencyError(f"steady state of sector {a} has residual {residual:.3e}")
            full = np.zeros((n, n), dtype=complex)
            full[off[a]:off[a + 1], off[a]:off[a + 1]] = rho_b
            out.append(SteadyState(a, structure.from_block_basis(full), residual, len(mats)))
    return out


def integrate_master_equation(rho0, H, jumps, t: float, dt_oracle: float = 1e-3,
                              return_drift: bool = False):
    """Classical fourth-order Runge-Kutta integration of the master equation."""
    rho = np.array(rho0, dtype=complex)
    H = np.asarray(H, dtype=complex)
    js = _jump_list(jumps)
    if np.linalg.norm(rho - rho.conj().T) > 1e-10:
        raise LiouvillianError("initial density matrix is not Hermitian")
    tr0 = np.trace(rho).real
    if abs(tr0 - 1.0) > 1e-10:
        raise LiouvillianError("initial density matrix must have unit trace")
    if np.min(np.linalg.eigvalsh(rho)) < -1e-10:
        raise LiouvillianError("initial density matrix is not positive semidefinite")
    n_steps = max(int(math.ceil(t / dt_oracle - 1e-12)), 0)
    h = t / n_steps if n_steps else 0.0
    # crude bound on the generator norm; RK4 is unstable past |h lambda| ~ 2.8
    bound = 2 * np.linalg.norm(H, 2) + sum(2 * g * np.linalg.norm(L, 2) ** 2 for L, g in js)
    if h * bound > 2.5:
        raise StepSizeError(f"dt_oracle={h:.3g} exceeds the RK4 stability range (|L| <= {bound:.3g})")
    for _ in range(n_steps):
        k1 = lindblad_rhs(rho, H, js)
        k2 = lindblad_rhs(rho + 0.5 * h * k1, H, js)
        k3 = lindblad_rhs(rho + 0.5 * h * k2, H, js)
        k4 = lindblad_rhs(rho + h * k3, H, js)
        rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    drift = abs(np.trace(rho).real - tr0)
    if not np.all(np.isfinite(rho)) or drift > 1e-6:
        raise StepSizeError(f"trace drifted by {drift:.3e}; reduce dt_oracle")
    return (rho, drift) if return_drift else rho


def evolve_exact(rho0, H, jumps, t: float) -> np.ndarray:
    """exp(L t) rho0 from the dense matrix exponential of the vectorised generator."""
    lv = build_liouvillian(H, jumps)
    n = np.asarray(rho0).shape[0]
    return unvec(sla.expm(lv.matrix * t) @ vec(rho0), n)


def full_spectrum(H, jumps, max_dim: int = MAX_FULL_DIM) -> np.ndarray:
    n = np.asarray(H).shape[0]
    if n > max_dim:
        raise LiouvillianError(
            f"full {n * n}-dimensional diagonalisation refused (n > {max_dim}); use sector_spectrum per block pair"
        )
    return sla.eigvals(build_liouvillian(H, jumps).matrix)


def trace_distance(rho, sigma) -> float:
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * ((rho - sigma) + (rho - sigma).conj().T)))))


def block_norms(rho, structure: BlockStructure) -> np.ndarray:
    """Frobenius norm of every (alpha, alpha') block of rho in the block basis."""
    rb = structure.to_block_basis(rho)
    off = structure.offsets
    D = len(structure)
    out = np.zeros((D, D))
    for a in range(D):
        for b in range(D):
            out[a, b] = np.linalg.norm(rb[off[a]:off[a + 1], off[b]:off[b + 1]])
    return out
