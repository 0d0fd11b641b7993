"""First-order Monte Carlo unravelling of the Lindblad equation.

Each step draws one operator from
``{sqrt(g_m dt) L_m} + {1 - i H_eff dt}`` with probabilities
``p_m = g_m dt <L_m^dagger L_m>`` and ``p_{M+1} = 1 - sum p_m``.

The fast path works in the symmetry block basis.  Every subspace keeps its
own amplitude vector and a log scale, so the un-normalised weight of a losing
subspace stays finite long after it drops below double-precision range
relative to the winner.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numba as nb
import numpy as np
import scipy.sparse as sp

from .models import ModelSpec

log = logging.getLogger(__name__)

# kernel status codes
_OK, _STEP_TOO_LARGE, _INVALID_JUMP, _FROZE = 0, 1, 2, 3


class TimestepError(RuntimeError):
    """Jump probabilities left the first-order validity range."""


class InvalidJumpError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnravelingConfig:
    dt: float = 1e-3
    t_max: float = 10.0
    record_stride: int = 100
    seed: int = 0
    freeze_epsilon: float = 1e-10
    early_stop: bool = False
    grace_fraction: float = 0.1
    track_products: bool = False
    rescale_stride: int = 100
    record_states: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if not 0 < self.freeze_epsilon < 1:
            raise ValueError("freeze_epsilon must lie in (0, 1)")
        if self.record_stride < 1 or self.rescale_stride < 1:
            raise ValueError("strides must be positive")
        if self.grace_fraction < 0:
            raise ValueError("grace_fraction must be non-negative")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "UnravelingConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrajectoryState:
    psi: np.ndarray
    t: float = 0.0
    step_index: int = 0
    jump_count: int = 0
    jump_log: list[tuple[int, int]] = field(default_factory=list)
    last_branch: int | None = None


@dataclass(eq=False)
class EffectiveHamiltonian:
    matrix: np.ndarray

    @classmethod
    def build(cls, H, jumps) -> "EffectiveHamiltonian":
        heff = np.array(H, dtype=complex)
        for L, g in jumps:
            heff = heff - 0.5j * g * (L.conj().T @ L)
        out = cls(heff)
        out.validate()
        return out

    def validate(self) -> None:
        m = self.matrix
        decay = 1j * (m - m.conj().T)
        ev = np.linalg.eigvalsh(0.5 * (decay + decay.conj().T))
        if np.min(ev) < -1e-12 * max(np.linalg.norm(m), 1.0):
            raise ValueError("effective Hamiltonian amplifies the norm")


def draw_probabilities(psi, jumps, dt) -> np.ndarray:
    """p_1..p_M for the jumps and p_{M+1} for the no-jump branch."""
    p = np.array([g * dt * float(np.vdot(L @ psi, L @ psi).real) for L, g in jumps])
    return np.append(p, 1.0 - p.sum())


def step(state: TrajectoryState, heff: EffectiveHamiltonian, jumps, cfg: UnravelingConfig,
         rng: np.random.Generator) -> TrajectoryState:
    """One first-order step on the full-space state (reference implementation)."""
    psi = state.psi
    probs = draw_probabilities(psi, jumps, cfg.dt)
    if np.any(probs[:-1] < 0) or probs[-1] < 0:
        raise TimestepError(f"step {state.step_index}: draw probabilities {probs} outside [0, 1]")
    u = rng.random()
    cum = np.cumsum(probs[:-1])
    m = int(np.searchsorted(cum, u, side="right"))
    jump_log = list(state.jump_log)
    if m < len(jumps):
        L, g = jumps[m]
        new = math.sqrt(g * cfg.dt) * (L @ psi)
        if np.linalg.norm(new) < 1e-14:
            raise InvalidJumpError(f"step {state.step_index}: jump {m} annihilates the state")
        jump_log.append((state.step_index, m))
        count = state.jump_count + 1
    else:
        new = psi - 1j * cfg.dt * (heff.matrix @ psi)
        count = state.jump_count
    new = new / np.linalg.norm(new)
    return TrajectoryState(new, state.t + cfg.dt, state.step_index + 1, count, jump_log, m)


# ---------------------------------------------------------------------------
# compiled propagation in the block basis

@nb.njit(cache=True)
def _fold(psi, off, ell, nrm, ratio):
    D = off.shape[0] - 1
    lmax = -np.inf
    for a in range(D):
        if ell[a] == -np.inf:
            continue
        if nrm[a] > 0.0:
            ell[a] += math.log(nrm[a])
            s = 1.0 / math.sqrt(nrm[a])
            for r in range(off[a], off[a + 1]):
                psi[r] *= s
            nrm[a] = 1.0
        if ell[a] > lmax:
            lmax = ell[a]
    for a in range(D):
        ratio[a] = 0.0 if ell[a] == -np.inf else math.exp(ell[a] - lmax)


@nb.njit(cache=True)
def _rescale_products(B, boff, ls, a):
    fro2 = 0.0
    for q in range(boff[a], boff[a + 1]):
        fro2 += B[q].real * B[q].real + B[q].imag * B[q].imag
    if fro2 == 0.0 or math.sqrt(fro2) < 1e-300:
        ls[a] = -np.inf
        for q in range(boff[a], boff[a + 1]):
            B[q] = 0.0
        return
    fro = math.sqrt(fro2)
    ls[a] += math.log(fro)
    for q in range(boff[a], boff[a + 1]):
        B[q] /= fro


@nb.njit(cache=True)
def _left_multiply(B, X, boff, off, a, scratch):
    d = off[a + 1] - off[a]
    base = boff[a]
    for i in range(d):
        for j in range(d):
            z = 0j
            for k in range(d):
                z += X[base + i * d + k] * B[base + k * d + j]
            scratch[i * d + j] = z
    for q in range(d * d):
        B[base + q] = scratch[q]


@nb.njit(cache=True)
def _advance(n_steps, u, step0, eps, check_freeze,
             psi, buf, jbuf, ell, nrm, ratio, off,
             x_ptr, x_idx, x_val, s_ptr, s_idx, s_val, n_jump, smax2, jn,
             fold_every, jump_steps, jump_ops,
             track, B, ls, boff, x_dense, s_dense, rescale_every, scratch):
    n = psi.shape[0]
    D = off.shape[0] - 1
    n_logged = 0
    for k in range(n_steps):
        step = step0 + k
        W = 0.0
        for a in range(D):
            W += ratio[a] * nrm[a]
        # candidate jump vectors and their per-block norms
        for m in range(n_jump):
            base = m * n
            for a in range(D):
                acc = 0.0
                if ell[a] == -np.inf:
                    jn[m, a] = 0.0
                    continue
                for r in range(off[a], off[a + 1]):
                    z = 0j
                    for p in range(s_ptr[base + r], s_ptr[base + r + 1]):
                        z += s_val[p] * psi[s_idx[p]]
                    jbuf[base + r] = z
                    acc += z.real * z.real + z.imag * z.imag
                jn[m, a] = acc
        chosen = -1
        cum = 0.0
        for m in range(n_jump):
            pm = 0.0
            for a in range(D):
                pm += ratio[a] * jn[m, a]
            pm /= W
            cum += pm
            if chosen < 0 and u[k] < cum:
                chosen = m
        if cum > 1.0:
            return _STEP_TOO_LARGE, k, n_logged
        if chosen >= 0:
            m = chosen
            tot = 0.0
            for a in range(D):
                tot += ratio[a] * jn[m, a]
            if not tot > 0.0:
                return _INVALID_JUMP, k, n_logged
            base = m * n
            for a in range(D):
                if ell[a] == -np.inf:
                    continue
                if jn[m, a] <= 1e-28 * smax2[m, a] * nrm[a]:
                    ell[a] = -np.inf
                    nrm[a] = 0.0
                    for r in range(off[a], off[a + 1]):
                        psi[r] = 0.0
                else:
                    nrm[a] = jn[m, a]
                    for r in range(off[a], off[a + 1]):
                        psi[r] = jbuf[base + r]
            jump_steps[n_logged] = step
            jump_ops[n_logged] = m
            n_logged += 1
            if track:
                for a in range(D):
                    if ls[a] == -np.inf:
                        continue
                    _left_multiply(B, s_dense[m], boff, off, a, scratch)
                    _rescale_products(B, boff, ls, a)
            _fold(psi, off, ell, nrm, ratio)
        else:
            for a in range(D):
                if ell[a] == -np.inf:
                    continue
                acc = 0.0
                for r in range(off[a], off[a + 1]):
                    z = 0j
                    for p in range(x_ptr[r], x_ptr[r + 1]):
                        z += x_val[p] * psi[x_idx[p]]
                    buf[r] = z
                    acc += z.real * z.real + z.imag * z.imag
                nrm[a] = acc
                # X0 is block diagonal, so the block can be overwritten right away
                for r in range(off[a], off[a + 1]):
                    psi[r] = buf[r]
            if track:
                do_rescale = (step + 1) % rescale_every == 0
                for a in range(D):
                    if ls[a] == -np.inf:
                        continue
                    _left_multiply(B, x_dense, boff, off, a, scratch)
                    if do_rescale:
                        _rescale_products(B, boff, ls, a)
            if (step + 1) % fold_every == 0:
                _fold(psi, off, ell, nrm, ratio)
        if check_freeze:
            best = 0
            bestw = -1.0
            for a in range(D):
                wa = ratio[a] * nrm[a]
                if wa > bestw:
                    bestw = wa
                    best = a
            rest = 0.0
            for a in range(D):
                if a != best:
                    rest += ratio[a] * nrm[a]
            if rest <= eps * (rest + bestw):
                return _FROZE, k + 1, n_logged
    return _OK, n_steps, n_logged


def _block_diag_csr(blocks: Sequence[np.ndarray]) -> sp.csr_matrix:
    mat = sp.block_diag(blocks, format="csr", dtype=complex)
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


class Propagator:
    """Model operators in the block basis, laid out for the compiled kernel."""

    def __init__(self, model: ModelSpec, dt: float):
        st = model.structure
        self.model = model
        self.dt = dt
        self.structure = st
        self.dims = np.asarray(st.dims, dtype=np.int64)
        self.off = st.offsets
        self.D = len(st)
        self.n = st.dim_total
        hb = st.to_block_basis(model.H)
        lbs = [st.to_block_basis(L) for L in model.jump_ops]
        rates = model.rates
        o = self.off

        def blocks(m):
            return [np.ascontiguousarray(m[o[a]:o[a + 1], o[a]:o[a + 1]]) for a in range(self.D)]

        heff = hb.copy()
        for L, g in zip(lbs, rates):
            heff -= 0.5j * g * (L.conj().T @ L)
        x0 = np.eye(self.n, dtype=complex) - 1j * dt * heff
        self.x0_blocks = blocks(x0)
        self.s_blocks = [blocks(math.sqrt(g * dt) * L) for L, g in zip(lbs, rates)]
        x_csr = _block_diag_csr(self.x0_blocks)
        s_csr = sp.vstack([_block_diag_csr(b) for b in self.s_blocks], format="csr") if self.s_blocks else \
            sp.csr_matrix((0, self.n), dtype=complex)
        s_csr.sort_indices()
        self.x_ptr, self.x_idx, self.x_val = (x_csr.indptr.astype(np.int64), x_csr.indices.astype(np.int64),
                                              x_csr.data.astype(complex))
        self.s_ptr, self.s_idx, self.s_val = (s_csr.indptr.astype(np.int64), s_csr.indices.astype(np.int64),
                                              s_csr.data.astype(complex))
        self.n_jump = len(self.s_blocks)
        self.smax2 = np.array([[np.sum(np.abs(b) ** 2) for b in bl] for bl in self.s_blocks]).reshape(
            self.n_jump, self.D)
        self.boff = np.concatenate([[0], np.cumsum(self.dims ** 2)]).astype(np.int64)
        self.x_dense = np.concatenate([b.ravel() for b in self.x0_blocks])
        self.s_dense = (np.array([np.concatenate([b.ravel() for b in bl]) for bl in self.s_blocks])
                        if self.s_blocks else np.zeros((0, int(self.boff[-1])), dtype=complex))
        self.u_block = st.block_basis() if st.basis is not None else None
        self.diag_masks = {k: np.asarray(v, dtype=bool)[st.order] if st.basis is None else None
                           for k, v in model.diagnostics.items()}


@dataclass(frozen=True)
class Snapshot:
    """What observers see at each recorded sample."""

    step: int
    t: float
    log_w: np.ndarray
    probs: np.ndarray
    jump_count: int
    frozen: bool


@dataclass(eq=False)
class TrajectoryRecord:
    seed: int
    stream: tuple[int, ...]
    labels: list
    times: np.ndarray
    log_w: np.ndarray
    probs: np.ndarray
    jump_steps: np.ndarray
    jump_ops: np.ndarray
    n_steps: int
    dt: float
    freeze_step: int | None
    initial_state: np.ndarray
    final_state: np.ndarray
    log_sv: list[np.ndarray] | None = None
    states: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    error: dict | None = None

    @property
    def freeze_time(self) -> float | None:
        return None if self.freeze_step is None else self.freeze_step * self.dt

    @property
    def jump_log(self) -> list[tuple[int, int]]:
        return list(zip(self.jump_steps.tolist(), self.jump_ops.tolist()))

    @property
    def initial_weights(self) -> np.ndarray:
        return self.probs[0]


def trajectory_rng(seed: int, stream: Sequence[int] = ()) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, stream) so workers never share state."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(stream))))


class _Engine:
    def __init__(self, prop: Propagator, cfg: UnravelingConfig, psi0_block: np.ndarray):
        self.prop, self.cfg = prop, cfg
        D, n = prop.D, prop.n
        off = prop.off
        self.psi = np.ascontiguousarray(psi0_block, dtype=complex).copy()
        self.buf = np.zeros(n, dtype=complex)
        self.jbuf = np.zeros(max(prop.n_jump, 1) * n, dtype=complex)
        self.ell = np.zeros(D)
        self.nrm = np.zeros(D)
        for a in range(D):
            w = float(np.vdot(self.psi[off[a]:off[a + 1]], self.psi[off[a]:off[a + 1]]).real)
            if w == 0.0:
                self.ell[a] = -np.inf
            else:
                self.nrm[a] = w
        self.ratio = np.ones(D)
        _fold(self.psi, off, self.ell, self.nrm, self.ratio)
        self.jn = np.zeros((max(prop.n_jump, 1), D))
        self.track = cfg.track_products
        nb_ = int(prop.boff[-1])
        self.B = np.zeros(nb_, dtype=complex)
        for a in range(D):
            d = int(prop.dims[a])
            self.B[prop.boff[a]:prop.boff[a + 1]] = np.eye(d, dtype=complex).ravel()
        self.ls = np.zeros(D)
        self.scratch = np.zeros(int(np.max(prop.dims)) ** 2, dtype=complex)

    def advance(self, u, step0, check_freeze):
        p = self.prop
        js = np.zeros(len(u), dtype=np.int64)
        jo = np.zeros(len(u), dtype=np.int64)
        status, done, nl = _advance(
            len(u), u, step0, self.cfg.freeze_epsilon, check_freeze,
            self.psi, self.buf, self.jbuf, self.ell, self.nrm, self.ratio, p.off,
            p.x_ptr, p.x_idx, p.x_val, p.s_ptr, p.s_idx, p.s_val, p.n_jump, p.smax2, self.jn,
            32, js, jo,
            self.track, self.B, self.ls, p.boff, p.x_dense, p.s_dense, self.cfg.rescale_stride, self.scratch)
        return status, done, js[:nl], jo[:nl]

    def log_w(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.ell + np.log(self.nrm)

    def state_block(self) -> np.ndarray:
        """Normalised full state in the block basis."""
        lw = self.log_w()
        probs = _softmax(lw)
        out = np.zeros_like(self.psi)
        off = self.prop.off
        for a in range(self.prop.D):
            if probs[a] > 0 and self.nrm[a] > 0:
                out[off[a]:off[a + 1]] = self.psi[off[a]:off[a + 1]] * math.sqrt(probs[a] / self.nrm[a])
        return out

    def log_singular_values(self) -> list[np.ndarray]:
        p = self.prop
        out = []
        for a in range(p.D):
            d = int(p.dims[a])
            if self.ls[a] == -np.inf:
                out.append(np.full(d, -np.inf))
                continue
            b = self.B[p.boff[a]:p.boff[a + 1]].reshape(d, d)
            s = np.linalg.svd(b, compute_uv=False)
            with np.errstate(divide="ignore"):
                out.append(self.ls[a] + np.log(s))
        return out

    def products(self) -> list[tuple[float, np.ndarray]]:
        """(log scale, rescaled matrix) per subspace; the product equals exp(scale) * matrix."""
        p = self.prop
        return [(float(self.ls[a]), self.B[p.boff[a]:p.boff[a + 1]].reshape(int(p.dims[a]), -1).copy())
                for a in range(p.D)]


def _softmax(lw: np.ndarray) -> np.ndarray:
    finite = np.isfinite(lw)
    out = np.zeros_like(lw)
    if not finite.any():
        return out
    m = np.max(lw[finite])
    e = np.where(finite, np.exp(np.where(finite, lw - m, 0.0)), 0.0)
    return e / e.sum()


Observer = Callable[[Snapshot], "bool | None"]


def run_trajectory(model: ModelSpec, cfg: UnravelingConfig, observers: Sequence[Observer] = (),
                   stream: Sequence[int] = (), propagator: Propagator | None = None,
                   products_out: list | None = None) -> TrajectoryRecord:
    """Propagate one trajectory to ``cfg.t_max`` and record it every ``record_stride`` steps.

    The result depends only on (model, cfg, stream).  An observer returning True
    stops the run; with ``cfg.early_stop`` the run also stops once a freeze has
    been confirmed for ``grace_fraction * n_steps`` further steps.
    ``products_out``, if given, receives (step, products) at each record when
    ``cfg.track_products`` is on.
    """
    prop = propagator if propagator is not None and propagator.dt == cfg.dt else Propagator(model, cfg.dt)
    st = model.structure
    rng = trajectory_rng(cfg.seed, stream)
    psi0 = model.initial_vector(rng)
    eng = _Engine(prop, cfg, st.vector_to_block_basis(psi0))
    n_total = cfg.n_steps
    grace = int(math.ceil(cfg.grace_fraction * n_total))
    stride = cfg.record_stride

    times, lws, prs, svs, states = [], [], [], [], []
    jsteps, jops = [], []
    diag_max = {k: 0.0 for k in model.diagnostics}
    freeze_step = None
    error = None

    def record(step):
        lw = eng.log_w()
        pr = _softmax(lw)
        times.append(step * cfg.dt)
        lws.append(lw)
        prs.append(pr)
        need_state = cfg.record_states or model.diagnostics
        if need_state:
            sb = eng.state_block()
            for k, mask in prop.diag_masks.items():
                if mask is not None:
                    diag_max[k] = max(diag_max[k], float(np.sum(np.abs(sb[mask]) ** 2)))
            if cfg.record_states:
                states.append(st.vector_from_block_basis(sb))
        if cfg.track_products:
            svs.append(eng.log_singular_values())
            if products_out is not None:
                products_out.append((step, eng.products()))
        snap = Snapshot(step, step * cfg.dt, lw, pr, sum(len(j) for j in jsteps), freeze_step is not None)
        return any(bool(obs(snap)) for obs in observers)

    stop = record(0)
    if freeze_step is None and _frozen_now(eng, cfg.freeze_epsilon):
        freeze_step = 0
    step = 0
    u_pool = np.empty(0)
    while not stop and step < n_total:
        target = min((step // stride + 1) * stride, n_total)
        if cfg.early_stop and freeze_step is not None:
            target = min(target, freeze_step + grace)
        need = target - step
        if need <= 0:
            break  # grace window already used up at the freeze step
        if len(u_pool) < need:
            u_pool = np.concatenate([u_pool, rng.random(max(need - len(u_pool), stride))])
        status, done, js, jo = eng.advance(u_pool[:need], step, freeze_step is None)
        u_pool = u_pool[done:]
        jsteps.append(js)
        jops.append(jo)
        step += done
        if status == _STEP_TOO_LARGE:
            error = {"kind": "timestep", "step": step, "message": "jump probabilities sum above 1; reduce dt"}
            break
        if status == _INVALID_JUMP:
            error = {"kind": "invalid_jump", "step": step, "message": "jump onto a zero vector"}
            break
        if status == _FROZE:
            freeze_step = step
            stop = record(step)
            continue
        stop = record(step)
        if cfg.early_stop and freeze_step is not None and step >= freeze_step + grace:
            break

    log_sv = None
    if cfg.track_products:
        log_sv = [np.array([s[a] for s in svs]) for a in range(prop.D)]
    final = st.vector_from_block_basis(eng.state_block())
    diags = {f"max_{k}_population": v for k, v in diag_max.items()}
    return TrajectoryRecord(
        seed=cfg.seed, stream=tuple(stream), labels=st.labels,
        times=np.asarray(times), log_w=np.asarray(lws), probs=np.asarray(prs),
        jump_steps=np.concatenate(jsteps) if jsteps else np.zeros(0, dtype=np.int64),
        jump_ops=np.concatenate(jops) if jops else np.zeros(0, dtype=np.int64),
        n_steps=step, dt=cfg.dt, freeze_step=freeze_step,
        initial_state=psi0, final_state=final, log_sv=log_sv,
        states=np.asarray(states) if cfg.record_states else None,
        diagnostics=diags, error=error,
    )


def _frozen_now(eng: _Engine, eps: float) -> bool:
    w = eng.ratio * eng.nrm
    best = int(np.argmax(w))
    rest = float(np.sum(np.delete(w, best)))
    return rest <= eps * (rest + w[best])


def raise_for_error(rec: TrajectoryRecord) -> TrajectoryRecord:
    if rec.error is None:
        return rec
    cls = TimestepError if rec.error["kind"] == "timestep" else InvalidJumpError
    raise cls(f"trajectory stream {rec.stream}, step {rec.error['step']}: {rec.error['message']}")


def _run_chunk(args):
    recipe, cfg_dict, indices = args
    from .models import build_model

    model = build_model(recipe)
    cfg = UnravelingConfig.from_dict(cfg_dict)
    prop = Propagator(model, cfg.dt)
    return [run_trajectory(model, cfg, stream=(i,), propagator=prop) for i in indices]


def run_ensemble(model: ModelSpec, cfg: UnravelingConfig, n_traj: int, workers: int = 1,
                 propagator: Propagator | None = None) -> list[TrajectoryRecord]:
    """Independent trajectories on streams (cfg.seed, i), i = 0..n_traj-1.

    Failed trajectories come back with ``error`` set; healthy ones are
    unaffected.  Output order and content do not depend on ``workers``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    t0 = time.perf_counter()
    if workers <= 1:
        prop = propagator if propagator is not None and propagator.dt == cfg.dt else Propagator(model, cfg.dt)
        out = [run_trajectory(model, cfg, stream=(i,), propagator=prop) for i in range(n_traj)]
    else:
        chunks = [list(range(n_traj))[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, [(model.recipe(), cfg.to_dict(), c) for c in chunks]))
        by_index = {}
        for c, recs in zip(chunks, parts):
            by_index.update(zip(c, recs))
        out = [by_index[i] for i in range(n_traj)]
    failed = failure_manifest(out)
    if failed:
        log.warning("%d of %d trajectories failed", len(failed), n_traj)
    log.info("ensemble of %d trajectories in %.1fs", n_traj, time.perf_counter() - t0)
    return out


def failure_manifest(records: Sequence[TrajectoryRecord]) -> list[dict]:
    return [{"stream": list(r.stream), **r.error} for r in records if r.error is not None]


def ensemble_density_matrix(records: Sequence[TrajectoryRecord], sample: int = -1) -> np.ndarray:
    """(1/N) sum |psi><psi| at one recorded sample (requires ``record_states``)."""
    psis = np.array([r.states[sample] for r in records])
    return psis.T @ psis.conj() / len(records)
