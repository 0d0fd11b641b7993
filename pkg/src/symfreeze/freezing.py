"""Freezing diagnostics: subspace weights, evolution products, freeze times and ensemble statistics.

The compiled engine in :mod:`symfreeze.trajectory` tracks weights and
products internally.  :func:`update_weights` and :func:`update_product` are the
plain reference versions, used by :func:`replay` to re-derive a recorded
trajectory step by step from its jump log.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .models import InitialState, ModelSpec
from .symmetry import BlockStructure
from .trajectory import Propagator, TrajectoryRecord, UnravelingConfig, run_ensemble

log = logging.getLogger(__name__)

NON_FREEZING_BAND = math.log(100.0)
# below this relative norm a block counts as annihilated by a branch
_ANNIHILATED = 1e-28


def _blocks(vec_b: np.ndarray, offsets) -> list[np.ndarray]:
    return [vec_b[offsets[a]:offsets[a + 1]] for a in range(len(offsets) - 1)]


def probabilities(log_w: np.ndarray) -> np.ndarray:
    """exp(log w - logsumexp(log w)), with exact zeros for -inf entries."""
    log_w = np.asarray(log_w, dtype=float)
    finite = np.isfinite(log_w)
    if not finite.any():
        raise ValueError("all subspace weights are zero")
    out = np.zeros_like(log_w)
    out[finite] = np.exp(log_w[finite] - logsumexp(log_w[finite]))
    return out


def loser_mass(log_w: np.ndarray) -> np.ndarray:
    """1 - max_alpha p(alpha) for each row of ``log_w``, computed without cancellation.

    Working with ratios to the leading weight keeps the result accurate to a few
    ulps even when 1 - max p is far below the resolution of max p itself.
    """
    lw = np.atleast_2d(np.asarray(log_w, dtype=float))
    top = lw.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        r = np.exp(lw - top)
    r[~np.isfinite(lw)] = 0.0
    r[np.arange(len(r)), np.argmax(lw, axis=1)] = 0.0
    rest = r.sum(axis=1)
    return rest / (1.0 + rest)


@dataclass(frozen=True)
class WeightLedger:
    log_w: np.ndarray
    probs: np.ndarray
    log_norm: float = 0.0

    @classmethod
    def from_state(cls, psi: np.ndarray, structure: BlockStructure) -> "WeightLedger":
        phi = structure.vector_to_block_basis(psi)
        w = np.array([float(np.vdot(b, b).real) for b in _blocks(phi, structure.offsets)])
        with np.errstate(divide="ignore"):
            lw = np.log(w)
        return cls(lw, probabilities(lw), float(logsumexp(lw[np.isfinite(lw)])))


def update_weights(ledger: WeightLedger, psi: np.ndarray, branch_op: np.ndarray,
                   structure: BlockStructure) -> WeightLedger:
    """Advance the ledger across one step that applied ``branch_op`` to the normalised ``psi``.

    With psi_alpha(t) = A_alpha psi_alpha(0) / N(t), the block weight obeys
    w(alpha, t+dt) = w(alpha, t) * |X_alpha psi_alpha|^2 / |psi_alpha|^2.
    """
    phi = structure.vector_to_block_basis(psi)
    new = structure.vector_to_block_basis(branch_op @ psi)
    lw = ledger.log_w.copy()
    xnorm = np.linalg.norm(branch_op)
    for a, (b0, b1) in enumerate(zip(_blocks(phi, structure.offsets), _blocks(new, structure.offsets))):
        if not np.isfinite(lw[a]):
            continue
        n0 = float(np.vdot(b0, b0).real)
        n1 = float(np.vdot(b1, b1).real)
        if n0 == 0.0 or n1 <= _ANNIHILATED * xnorm ** 2 * n0:
            lw[a] = -np.inf
        else:
            lw[a] += math.log(n1) - math.log(n0)
    finite = np.isfinite(lw)
    return WeightLedger(lw, probabilities(lw), float(logsumexp(lw[finite])))


@dataclass(frozen=True)
class ProductTracker:
    """Rescaled running products B_alpha with exp(log_scale) * B_alpha = A_alpha."""

    blocks: tuple[np.ndarray, ...]
    log_scale: np.ndarray
    steps: int = 0
    snapshots: tuple[tuple[float, tuple[np.ndarray, ...]], ...] = ()

    @classmethod
    def identity(cls, dims: Sequence[int]) -> "ProductTracker":
        return cls(tuple(np.eye(d, dtype=complex) for d in dims), np.zeros(len(dims)))

    def product(self, alpha: int) -> np.ndarray:
        return math.exp(self.log_scale[alpha]) * self.blocks[alpha] if np.isfinite(self.log_scale[alpha]) \
            else np.zeros_like(self.blocks[alpha])

    def log_singular_values(self) -> list[np.ndarray]:
        out = []
        for b, s in zip(self.blocks, self.log_scale):
            if not np.isfinite(s):
                out.append(np.full(b.shape[0], -np.inf))
                continue
            sv = np.linalg.svd(b, compute_uv=False)
            with np.errstate(divide="ignore"):
                out.append(s + np.log(sv))
        return out


def top_singular_overlap(block: np.ndarray, phi: np.ndarray) -> float:
    """|<v_1|phi>|^2 / |phi|^2 with v_1 the leading right singular vector of ``block``.

    A value near zero flags an initial state that misses the growing direction,
    in which case the weight tracks a lower singular value instead.
    """
    n2 = float(np.vdot(phi, phi).real)
    if n2 == 0.0:
        return float("nan")
    _, _, vh = np.linalg.svd(block)
    return float(abs(np.vdot(vh[0], phi)) ** 2 / n2)


def update_product(tracker: ProductTracker, branch_blocks: Sequence[np.ndarray], rescale_stride: int = 100,
                   force_rescale: bool = False, snapshot_t: float | None = None) -> ProductTracker:
    """Left-multiply every B_alpha by its branch block; rescale by the Frobenius norm on schedule."""
    steps = tracker.steps + 1
    rescale = force_rescale or steps % rescale_stride == 0
    blocks, scale = [], tracker.log_scale.copy()
    for a, (b, x) in enumerate(zip(tracker.blocks, branch_blocks)):
        if not np.isfinite(scale[a]):
            blocks.append(b)
            continue
        nb = x @ b
        if rescale:
            fro = np.linalg.norm(nb)
            if fro < 1e-300:
                scale[a] = -np.inf
                nb = np.zeros_like(nb)
            else:
                scale[a] += math.log(fro)
                nb = nb / fro
        blocks.append(nb)
    out = ProductTracker(tuple(blocks), scale, steps, tracker.snapshots)
    if snapshot_t is not None:
        out = replace(out, snapshots=tracker.snapshots + ((snapshot_t, tuple(out.log_singular_values())),))
    return out


@dataclass
class Replay:
    times: np.ndarray
    ledgers: list[WeightLedger]
    tracker: ProductTracker
    products: list[list[np.ndarray]]


def replay(model: ModelSpec, record: TrajectoryRecord, cfg: UnravelingConfig, rescale_stride: int = 100) -> Replay:
    """Re-run a recorded trajectory branch by branch in plain numpy.

    Ledgers and full products are captured at the record's sample times.
    Intended for short runs; costs a few dense matvecs per step.
    """
    st = model.structure
    prop = Propagator(model, cfg.dt)
    off = st.offsets
    u = st.block_basis()
    x0 = np.zeros((st.dim_total, st.dim_total), dtype=complex)
    for a, b in enumerate(prop.x0_blocks):
        x0[off[a]:off[a + 1], off[a]:off[a + 1]] = b
    x0_full = u @ x0 @ u.conj().T
    s_full = []
    for bl in prop.s_blocks:
        m = np.zeros_like(x0)
        for a, b in enumerate(bl):
            m[off[a]:off[a + 1], off[a]:off[a + 1]] = b
        s_full.append(u @ m @ u.conj().T)
    jumps = dict(record.jump_log)
    sample_steps = np.rint(record.times / cfg.dt).astype(int)
    psi = record.initial_state / np.linalg.norm(record.initial_state)
    ledger = WeightLedger.from_state(psi, st)
    tracker = ProductTracker.identity(st.dims)
    ledgers, products = [], []

    def capture(step):
        ledgers.append(ledger)
        products.append([tracker.product(a) for a in range(len(st))])

    want = set(sample_steps.tolist())
    if 0 in want:
        capture(0)
    for k in range(record.n_steps):
        if k in jumps:
            X, xb = s_full[jumps[k]], prop.s_blocks[jumps[k]]
        else:
            X, xb = x0_full, prop.x0_blocks
        ledger = update_weights(ledger, psi, X, st)
        tracker = update_product(tracker, xb, rescale_stride, force_rescale=k in jumps)
        psi = X @ psi
        psi /= np.linalg.norm(psi)
        if k + 1 in want:
            capture(k + 1)
    return Replay(record.times, ledgers, tracker, products)


# ---------------------------------------------------------------------------
# freeze detection

@dataclass(frozen=True)
class FreezeReport:
    frozen: bool
    destination: int | None
    freeze_time: float | None
    final_probs: np.ndarray
    non_freezing_pairs: tuple[tuple[int, int], ...] = ()

    def to_dict(self, labels: Sequence | None = None) -> dict:
        lab = (lambda a: labels[a]) if labels is not None else (lambda a: a)
        return {
            "frozen": self.frozen,
            "destination": None if self.destination is None else self.destination,
            "destination_label": None if self.destination is None else _jsonable(lab(self.destination)),
            "freeze_time": self.freeze_time,
            "final_probs": [float(p) for p in self.final_probs],
            "non_freezing_pairs": [list(p) for p in self.non_freezing_pairs],
            "non_freezing_pair_labels": [[_jsonable(lab(a)), _jsonable(lab(b))] for a, b in self.non_freezing_pairs],
        }


def _jsonable(x):
    if isinstance(x, tuple):
        return list(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _history(history):
    if isinstance(history, TrajectoryRecord):
        return history.times, history.log_w
    times, log_w = history
    return np.asarray(times, dtype=float), np.asarray(log_w, dtype=float)


def detect_freeze(history, epsilon: float = 1e-10, band: float = NON_FREEZING_BAND,
                  tail_fraction: float = 1.0 / 3.0) -> FreezeReport:
    """First recorded time with max p >= 1 - epsilon (tested as loser mass <= epsilon).

    ``history`` is a :class:`TrajectoryRecord` or a ``(times, log_w)`` pair.
    When nothing freezes, subspace pairs with initial weight whose log-weight
    difference stays within ``band`` over the last ``tail_fraction`` of the
    run are reported as non-freezing.
    """
    times, log_w = _history(history)
    if len(times) == 0:
        raise ValueError("empty history")
    final = probabilities(log_w[-1])
    hit = np.flatnonzero(loser_mass(log_w) <= epsilon)
    if hit.size:
        k = int(hit[0])
        return FreezeReport(True, int(np.argmax(log_w[k])), float(times[k]), final)
    start = times[0] + (1.0 - tail_fraction) * (times[-1] - times[0])
    tail = log_w[times >= start - 1e-12]
    live = np.flatnonzero(np.isfinite(log_w[0]))
    pairs = []
    for i, a in enumerate(live):
        for b in live[i + 1:]:
            diff = np.abs(tail[:, a] - tail[:, b])
            if np.all(np.isfinite(diff)) and np.max(diff) <= band:
                pairs.append((int(a), int(b)))
    return FreezeReport(False, None, None, final, tuple(pairs))


def frozen_stays_frozen(record: TrajectoryRecord, epsilon: float = 1e-10) -> bool:
    rep = detect_freeze(record, epsilon)
    if not rep.frozen:
        return True
    after = record.log_w[record.times >= rep.freeze_time]
    return bool(np.all(loser_mass(after) <= epsilon))


def gap_growth_monotone(record: TrajectoryRecord, tail_fraction: float = 1.0 / 3.0, slack: float = 1.0) -> bool:
    """Log-weight gap between the winner and every live loser never shrinks by more than ``slack``
    over the final stretch of the run, and ends larger than it started."""
    t = record.times
    tail = record.log_w[t >= t[0] + (1 - tail_fraction) * (t[-1] - t[0]) - 1e-12]
    if len(tail) < 2:
        return True
    win = int(np.argmax(tail[-1]))
    for a in range(tail.shape[1]):
        if a == win or not np.isfinite(tail[0, a]):
            continue
        gap = tail[:, win] - tail[:, a]
        if np.any(~np.isfinite(gap)):
            continue
        if gap[-1] <= gap[0]:
            return False
        if np.any(np.maximum.accumulate(gap) - gap > slack):
            return False
    return True


# ---------------------------------------------------------------------------
# ensembles

@dataclass
class EnsembleFreezeStats:
    bin_edges: np.ndarray
    pdf: np.ndarray
    cdf: np.ndarray
    n_total: int
    n_unfrozen: int
    mean_freeze_time: float | None
    sem_freeze_time: float | None
    destination_counts: dict[int, int]
    coherence: dict[float, np.ndarray] = field(default_factory=dict)

    @property
    def n_frozen(self) -> int:
        return self.n_total - self.n_unfrozen

    def destination_fractions(self) -> dict[int, tuple[float, float]]:
        """fraction and binomial standard error per destination, relative to frozen trajectories."""
        n = self.n_frozen
        out = {}
        for a, c in sorted(self.destination_counts.items()):
            f = c / n
            out[a] = (f, math.sqrt(f * (1 - f) / n))
        return out


def _probs_at(record: TrajectoryRecord, t: float) -> np.ndarray:
    # last sample at or before t; a run stopped early after freezing keeps its final state
    k = int(np.searchsorted(record.times, t + 1e-9, side="right")) - 1
    return record.probs[max(k, 0)]


def ensemble_stats(records: Sequence[TrajectoryRecord], bins="fd", t_snapshots: Sequence[float] = (),
                   epsilon: float = 1e-10) -> EnsembleFreezeStats:
    """Freeze-time PDF/CDF, destinations and coherence matrices C(t) = <p(a,t) p(a',t)>."""
    recs = [r for r in records if r.error is None]
    if not recs:
        raise ValueError("no records to aggregate")
    reports = [detect_freeze(r, epsilon) for r in recs]
    ft = np.array([rep.freeze_time for rep in reports if rep.frozen])
    n_unfrozen = len(recs) - len(ft)
    if len(ft):
        edges = np.histogram_bin_edges(ft, bins=bins)
        counts, edges = np.histogram(ft, bins=edges)
        widths = np.diff(edges)
        pdf = counts / (len(recs) * widths)
        cdf = np.cumsum(counts) / len(recs)
        mean = float(ft.mean())
        sem = float(ft.std(ddof=1) / math.sqrt(len(ft))) if len(ft) > 1 else 0.0
    else:
        edges, pdf, cdf, mean, sem = np.zeros(1), np.zeros(0), np.zeros(0), None, None
    dest: dict[int, int] = {}
    for rep in reports:
        if rep.frozen:
            dest[rep.destination] = dest.get(rep.destination, 0) + 1
    coh = {}
    for t in t_snapshots:
        p = np.array([_probs_at(r, t) for r in recs])
        coh[float(t)] = p.T @ p / len(recs)
    return EnsembleFreezeStats(edges, pdf, cdf, len(recs), n_unfrozen, mean, sem, dest, coh)


def is_unimodal(pdf: np.ndarray, smooth: int = 3) -> bool:
    """Single peak after a short moving-average smoothing of the histogram."""
    if len(pdf) < 3:
        return True
    k = np.ones(smooth) / smooth
    s = np.convolve(pdf, k, mode="same")
    d = np.sign(np.diff(s))
    d = d[d != 0]
    return int(np.sum(d[1:] > d[:-1])) == 0


# ---------------------------------------------------------------------------
# freeze time versus spectral gap

@dataclass
class GapRow:
    gamma: float
    gap: float
    mean_freeze_time: float | None
    sem_freeze_time: float | None
    n_frozen: int
    n_traj: int
    divergent: bool


@dataclass
class GapFit:
    slope: float | None
    c_free: float | None
    c_fixed: float | None
    fit_range: tuple[float, float] | None
    applicable: bool


def fit_inverse_gap(rows: Sequence[GapRow], gamma_range: tuple[float, float] | None = None) -> GapFit:
    """Fit log t = s log(1/gap) + log c, plus the slope-one estimate c = exp(mean log(t * gap))."""
    use = [r for r in rows if not r.divergent and r.mean_freeze_time is not None
           and (gamma_range is None or gamma_range[0] <= r.gamma <= gamma_range[1])]
    if len(use) < 2:
        return GapFit(None, None, None, None, False)
    x = np.log([1.0 / r.gap for r in use])
    y = np.log([r.mean_freeze_time for r in use])
    if np.ptp(x) == 0:
        return GapFit(None, None, None, None, False)
    slope, icept = np.polyfit(x, y, 1)
    c_fixed = float(np.exp(np.mean(y - x)))
    g = [r.gamma for r in use]
    return GapFit(float(slope), float(np.exp(icept)), c_fixed, (min(g), max(g)), True)


def freeze_time_vs_gap(model_factory: Callable[[float], ModelSpec], gammas: Sequence[float], pair: tuple[int, int],
                       n_traj: int, cfg: UnravelingConfig, t_max_over_gap: float | None = 200.0,
                       min_frozen_fraction: float = 0.5, workers: int = 1,
                       progress: Callable[[GapRow], None] | None = None) -> tuple[list[GapRow], GapFit]:
    """Mean freeze time for trajectories started across ``pair`` alongside the pair's spectral gap.

    ``t_max_over_gap`` stretches each run to that many inverse gaps.  Entries
    with a closed gap or with fewer than ``min_frozen_fraction`` of runs frozen
    are flagged divergent and excluded from the fit.
    """
    from .liouvillian import sector_spectrum

    rows = []
    for g in gammas:
        model = model_factory(g).with_initial_state(InitialState(sectors=tuple(pair)))
        spec = sector_spectrum(model.H, model.jumps, model.structure, tuple(pair))
        c = replace(cfg, early_stop=True, grace_fraction=0.0)
        if spec.gap_closed:
            rows.append(GapRow(float(g), spec.gap, None, None, 0, 0, True))
        else:
            if t_max_over_gap is not None:
                c = replace(c, t_max=max(cfg.t_max, t_max_over_gap / spec.gap))
            c = replace(c, record_stride=max(c.record_stride, c.n_steps // 200))
            recs = run_ensemble(model, c, n_traj, workers=workers)
            stats = ensemble_stats(recs, epsilon=c.freeze_epsilon)
            divergent = stats.n_frozen < min_frozen_fraction * n_traj
            rows.append(GapRow(float(g), spec.gap, stats.mean_freeze_time, stats.sem_freeze_time,
                               stats.n_frozen, n_traj, divergent))
        log.info("gamma=%g gap=%.4g mean=%s", g, rows[-1].gap, rows[-1].mean_freeze_time)
        if progress is not None:
            progress(rows[-1])
    return rows, fit_inverse_gap(rows)
