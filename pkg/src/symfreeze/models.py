"""Model families: random block Liouvillians, coupled spin-3/2 qudits, a lossy
bosonic chain in a cavity, and two-level toys with closed-form behaviour.

Every model is a :class:`ModelSpec` built from a JSON-serialisable recipe
(family name + parameters); raw matrices are never serialised.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .symmetry import (
    BlockStructure,
    Subspace,
    block_structure_from_symmetry,
    infer_block_structure,
    verify_strong_symmetry,
)


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# operator algebra

def spin_matrices(s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(s^x, s^y, s^z) for spin s, basis ordered m = s, s-1, ..., -s."""
    d = int(round(2 * s + 1))
    m = s - np.arange(d)
    sp = np.zeros((d, d), dtype=complex)
    for i in range(1, d):
        # s^+ |m_i> = sqrt(s(s+1) - m_i(m_i+1)) |m_{i-1}>
        sp[i - 1, i] = math.sqrt(s * (s + 1) - m[i] * (m[i] + 1))
    sm = sp.conj().T
    sx = (sp + sm) / 2
    sy = (sp - sm) / 2j
    sz = np.diag(m).astype(complex)
    return sx, sy, sz


def destroy(n_levels: int) -> np.ndarray:
    """Truncated annihilation operator on Fock levels 0..n_levels-1."""
    return np.diag(np.sqrt(np.arange(1, n_levels)), 1).astype(complex)


def boson_basis(n_modes: int, n_particles: int) -> list[tuple[int, ...]]:
    """Occupation vectors with fixed total, in ascending lexicographic order."""
    out = []

    def rec(prefix, left, modes_left):
        if modes_left == 1:
            out.append(tuple(prefix + [left]))
            return
        for k in range(left + 1):
            rec(prefix + [k], left - k, modes_left - 1)

    rec([], n_particles, n_modes)
    return out


def hopping(basis: Sequence[tuple[int, ...]], i: int, j: int) -> np.ndarray:
    """Matrix of b_i^dagger b_j on a fixed-particle-number occupation basis."""
    lookup = {occ: k for k, occ in enumerate(basis)}
    n = len(basis)
    out = np.zeros((n, n), dtype=complex)
    for col, occ in enumerate(basis):
        if occ[j] == 0:
            continue
        new = list(occ)
        amp = math.sqrt(new[j])
        new[j] -= 1
        amp *= math.sqrt(new[i] + 1)
        new[i] += 1
        out[lookup[tuple(new)], col] += amp
    return out


@dataclass(frozen=True)
class MomentumTupleIndex:
    """Subspace labels (s_1..s_{L/2}) of the bosonic chain, lexicographically ordered."""

    L: int
    N: int
    tuples: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        if self.L < 2 or self.L % 2:
            raise ModelError(f"chain length must be even and positive, got {self.L}")
        object.__setattr__(self, "tuples", tuple(boson_basis(self.L // 2, self.N)))

    def __len__(self) -> int:
        return len(self.tuples)

    def alpha_of_tuple(self, tup: Sequence[int]) -> int:
        return self.tuples.index(tuple(tup))

    def tuple_of_alpha(self, alpha: int) -> tuple[int, ...]:
        return self.tuples[alpha]

    @staticmethod
    def count(L: int, N: int) -> int:
        half = L // 2
        return math.factorial(N + half - 1) // (math.factorial(N) * math.factorial(half - 1))


# ---------------------------------------------------------------------------
# initial states

@dataclass(frozen=True)
class InitialState:
    """Recipe for a trajectory's initial state.

    kind:
      ``haar``        independent Haar vector per selected subspace, drawn from
                      each trajectory's own random stream, equal weights.
      ``haar_shared`` same construction, drawn once from ``seed`` so every
                      trajectory starts from the identical state.
      ``vector``      explicit amplitudes in the original basis.
    ``sectors=None`` selects every subspace.
    """

    kind: str = "haar"
    sectors: tuple[int, ...] | None = None
    vector: tuple[complex, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("haar", "haar_shared", "vector"):
            raise ModelError(f"unknown initial-state kind {self.kind!r}")
        if self.kind == "vector" and self.vector is None:
            raise ModelError("vector initial state needs amplitudes")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.sectors is not None:
            d["sectors"] = list(self.sectors)
        if self.vector is not None:
            d["vector"] = [[float(np.real(c)), float(np.imag(c))] for c in self.vector]
        if self.kind == "haar_shared":
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InitialState":
        vec = d.get("vector")
        return cls(
            kind=d.get("kind", "haar"),
            sectors=tuple(d["sectors"]) if d.get("sectors") is not None else None,
            vector=tuple(complex(re, im) for re, im in vec) if vec is not None else None,
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_vector(cls, psi) -> "InitialState":
        return cls(kind="vector", vector=tuple(complex(c) for c in np.asarray(psi).ravel()))


def haar_sector_state(structure: BlockStructure, sectors: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Equal-weight superposition of Haar-random vectors, one per selected subspace."""
    phi = np.zeros(structure.dim_total, dtype=complex)
    off = structure.offsets
    w = 1.0 / math.sqrt(len(sectors))
    for a in sectors:
        d = structure.subspaces[a].dim
        z = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        phi[off[a]:off[a + 1]] = w * z / np.linalg.norm(z)
    return structure.vector_from_block_basis(phi)


# ---------------------------------------------------------------------------
# model container

@dataclass(eq=False)
class ModelSpec:
    name: str
    H: np.ndarray
    jumps: list[tuple[np.ndarray, float]]
    structure: BlockStructure
    symmetry_kind: str
    params: dict
    symmetry_op: np.ndarray | None = None
    initial_state: InitialState = field(default_factory=InitialState)
    omega: float = 1.0
    # named diagonal masks in the original basis, e.g. the photon cutoff level
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def jump_ops(self) -> list[np.ndarray]:
        return [L for L, _ in self.jumps]

    @property
    def rates(self) -> list[float]:
        return [g for _, g in self.jumps]

    def with_initial_state(self, init: InitialState) -> "ModelSpec":
        return replace(self, initial_state=init)

    def sectors_of_interest(self) -> tuple[int, ...]:
        s = self.initial_state.sectors
        return tuple(range(len(self.structure))) if s is None else tuple(s)

    def initial_vector(self, rng: np.random.Generator | None = None) -> np.ndarray:
        init = self.initial_state
        if init.kind == "vector":
            psi = np.asarray(init.vector, dtype=complex)
            if psi.shape != (self.dim,):
                raise ModelError(f"initial vector has length {psi.size}, model dim {self.dim}")
            return psi / np.linalg.norm(psi)
        if init.kind == "haar_shared":
            rng = np.random.Generator(np.random.Philox(init.seed))
        elif rng is None:
            raise ModelError("per-trajectory Haar initial state needs a random generator")
        return haar_sector_state(self.structure, self.sectors_of_interest(), rng)

    def symmetry_matrix(self) -> np.ndarray:
        if self.symmetry_op is not None:
            return self.symmetry_op
        return self.structure.symmetry_operator()

    def validate(self, tol: float = 1e-10) -> None:
        if not verify_strong_symmetry(self.H, self.jump_ops, self.symmetry_matrix(), tol):
            raise ModelError(f"model {self.name!r}: declared symmetry is not a strong symmetry")
        if any(g < 0 for g in self.rates):
            raise ModelError("jump rates must be non-negative")

    def recipe(self) -> dict:
        return {"family": self.name, "params": dict(self.params), "initial_state": self.initial_state.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.recipe(), sort_keys=True)


def _philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# families

def random_block_model(n_blocks: int = 4, block_dim: int = 4, gamma: float = 4.0, seed: int = 0,
                       omega: float = 1.0) -> ModelSpec:
    """Block-diagonal random H (Hermitian, scaled by omega) and one Ginibre jump."""
    if n_blocks < 1 or block_dim < 1:
        raise ModelError("n_blocks and block_dim must be >= 1")
    rng = _philox(seed)
    n = n_blocks * block_dim
    H = np.zeros((n, n), dtype=complex)
    L = np.zeros((n, n), dtype=complex)
    subs = []
    for b in range(n_blocks):
        sl = slice(b * block_dim, (b + 1) * block_dim)
        g = rng.standard_normal((block_dim, block_dim)) + 1j * rng.standard_normal((block_dim, block_dim))
        g /= math.sqrt(2.0)
        H[sl, sl] = omega * (g + g.conj().T) / 2
        gl = rng.standard_normal((block_dim, block_dim)) + 1j * rng.standard_normal((block_dim, block_dim))
        L[sl, sl] = gl / math.sqrt(2.0)
        subs.append(Subspace(float(b), tuple(range(b * block_dim, (b + 1) * block_dim)), b))
    structure = BlockStructure(tuple(subs), n, None)
    params = dict(n_blocks=n_blocks, block_dim=block_dim, gamma=gamma, seed=seed, omega=omega)
    return ModelSpec("random_block", H, [(L, float(gamma))], structure, "block_basis", params, omega=omega)


def coupled_qudit_model(gamma: float = 3.0, omega: float = 1.0) -> ModelSpec:
    """Two Heisenberg-coupled spin-3/2 qudits with dephasing s^z_a on the first."""
    if gamma < 0:
        raise ModelError("gamma must be non-negative")
    sx, sy, sz = spin_matrices(1.5)
    eye = np.eye(4)
    a = [np.kron(s, eye) for s in (sx, sy, sz)]
    b = [np.kron(eye, s) for s in (sx, sy, sz)]
    H = omega * sum(x @ y for x, y in zip(a, b))
    A = a[2] + b[2]
    structure, _ = block_structure_from_symmetry(A)
    # labels: total magnetisation m_a + m_b in the standard spin convention
    subs = tuple(Subspace(s.lam, s.indices, round(s.lam)) for s in structure.subspaces)
    structure = BlockStructure(subs, 16, None)
    params = dict(gamma=gamma, omega=omega)
    return ModelSpec("coupled_qudit", H, [(a[2], float(gamma))], structure, "operator", params,
                     symmetry_op=A, omega=omega)


def qudit_sector(model: ModelSpec, magnetisation: int) -> int:
    """Subspace index of the given total magnetisation (-3..3)."""
    return model.structure.index_of(magnetisation)


def lossy_boson_chain_model(L_sites: int = 4, gamma: float = 5.0, g: float = 2.0, J: float = 2.0,
                            n_max: int = 5, omega: float = 1.0) -> ModelSpec:
    """Non-interacting bosons at half filling on a ring, collectively coupled to a lossy cavity.

    Basis: photon number 0..n_max (slow index) times momentum occupation
    vectors, modes i = 1..L carrying k = 2 pi i / L.
    """
    if L_sites < 2 or L_sites % 2:
        raise ModelError(f"L_sites must be even, got {L_sites}")
    if n_max < 1:
        raise ModelError("n_max must be >= 1")
    N = L_sites // 2
    half = L_sites // 2
    occ = boson_basis(L_sites, N)
    nb = len(occ)
    ks = [2 * math.pi * i / L_sites for i in range(1, L_sites + 1)]
    partner = [(i + half) % L_sites for i in range(L_sites)]  # k + pi (mod 2 pi), 0-based modes

    kinetic = np.diag([sum(-2 * J * math.cos(ks[i]) * o[i] for i in range(L_sites)) for o in occ]).astype(complex)
    pair_hop = sum(hopping(occ, i, partner[i]) for i in range(L_sites))
    a = destroy(n_max + 1)
    eye_c = np.eye(n_max + 1)
    eye_b = np.eye(nb)
    H = (omega * np.kron(a.conj().T @ a, eye_b)
         - g * np.kron(a + a.conj().T, pair_hop)
         + np.kron(eye_c, kinetic))
    Lop = np.kron(a, eye_b)

    index = MomentumTupleIndex(L_sites, N)
    groups: list[list[int]] = [[] for _ in range(len(index))]
    for n_ph in range(n_max + 1):
        for k, o in enumerate(occ):
            tup = tuple(o[i] + o[i + half] for i in range(half))
            groups[index.alpha_of_tuple(tup)].append(n_ph * nb + k)
    subs = tuple(Subspace(float(al), tuple(idx), index.tuples[al]) for al, idx in enumerate(groups))
    structure = BlockStructure(subs, H.shape[0], None)

    cutoff = np.zeros(H.shape[0], dtype=bool)
    cutoff[n_max * nb:] = True
    params = dict(L_sites=L_sites, gamma=gamma, g=g, J=J, n_max=n_max, omega=omega)
    return ModelSpec("lossy_boson_chain", H, [(Lop, float(gamma))], structure, "block_basis", params,
                     omega=omega, diagnostics={"photon_cutoff": cutoff})


def momentum_symmetries(L_sites: int, n_max: int) -> list[np.ndarray]:
    """The commuting operators S_k = n_k + n_{k+pi}, k <= pi, on the chain's full space."""
    N = L_sites // 2
    half = L_sites // 2
    occ = boson_basis(L_sites, N)
    eye_c = np.eye(n_max + 1)
    out = []
    for i in range(half):
        diag = [o[i] + o[i + half] for o in occ]
        out.append(np.kron(eye_c, np.diag(diag)).astype(complex))
    return out


def momentum_number_ops(L_sites: int, n_max: int) -> list[np.ndarray]:
    """Number operators n_k for every momentum mode, on the chain's full space."""
    occ = boson_basis(L_sites, L_sites // 2)
    eye_c = np.eye(n_max + 1)
    return [np.kron(eye_c, np.diag([o[i] for o in occ])).astype(complex) for i in range(L_sites)]


def qubit_dephasing_toy(variant: str = "number", gamma: float = 1.0, omega: float = 0.0) -> ModelSpec:
    """Two-level fixtures with H = (omega/2) sigma_z.

    ``sigma_z``: L = sigma_z, the two levels are similar subspaces (no freezing).
    ``number``:  L = |1><1|, a jump projects onto |1> and freezes immediately.
    """
    sz = np.diag([1.0, -1.0]).astype(complex)
    if variant == "sigma_z":
        L = sz.copy()
    elif variant == "number":
        L = np.diag([0.0, 1.0]).astype(complex)
    else:
        raise ModelError(f"unknown toy variant {variant!r}")
    H = 0.5 * omega * sz
    A = np.diag([0.0, 1.0]).astype(complex)
    structure = BlockStructure((Subspace(0.0, (0,), 0), Subspace(1.0, (1,), 1)), 2, None)
    params = dict(variant=variant, gamma=gamma, omega=omega)
    return ModelSpec(f"qubit_{variant}", H, [(L, float(gamma))], structure, "operator", params,
                     symmetry_op=A, omega=1.0)


FAMILIES: dict[str, Callable[..., ModelSpec]] = {
    "random_block": random_block_model,
    "coupled_qudit": coupled_qudit_model,
    "lossy_boson_chain": lossy_boson_chain_model,
    "qubit_number": lambda **p: qubit_dephasing_toy(**{**p, "variant": "number"}),
    "qubit_sigma_z": lambda **p: qubit_dephasing_toy(**{**p, "variant": "sigma_z"}),
}


def build_model(recipe: dict) -> ModelSpec:
    """Reconstruct a model from ``{"family", "params", "initial_state"}``."""
    family = recipe.get("family")
    if family not in FAMILIES:
        raise ModelError(f"unknown model family {family!r}; known: {sorted(FAMILIES)}")
    params = dict(recipe.get("params", {}))
    params.pop("variant", None)
    model = FAMILIES[family](**params)
    if "initial_state" in recipe:
        model = model.with_initial_state(InitialState.from_dict(recipe["initial_state"]))
    return model


def model_from_json(text: str) -> ModelSpec:
    return build_model(json.loads(text))


def declared_matches_inferred(model: ModelSpec, tol: float = 1e-12) -> bool:
    from .symmetry import same_partition

    return same_partition(model.structure, infer_block_structure(model.H, model.jump_ops, tol))
