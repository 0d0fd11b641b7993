"""Command-line front end.

Configuration is one JSON document; command-line flags override it.
Precedence, lowest first: built-in defaults, ``--config`` file, ``--family`` /
``--param`` / ``--seed`` / ``--out`` / ``--n-traj`` / ``--threads``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 internal-consistency failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import freezing, liouvillian, models, symmetry, trajectory
from .liouvillian import ConsistencyError, LiouvillianError, StepSizeError
from .models import ModelError, build_model
from .trajectory import InvalidJumpError, TimestepError, UnravelingConfig

log = logging.getLogger("symfreeze")

EXPERIMENTS = ("trajectory", "ensemble", "sweep-gamma", "spectrum", "detect-traceless", "steady-states",
               "validate-model")

# largest sector Liouvillian (d_a * d_b) the spectral oracle will diagonalise in detect-traceless
SPECTRAL_LIMIT = 4096


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: dict
    unraveling: UnravelingConfig = field(default_factory=UnravelingConfig)
    experiment: str = "trajectory"
    out: str = "out"
    emission: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.model, "unraveling": self.unraveling.to_dict(), "experiment": self.experiment,
                "out": self.out, "emission": self.emission}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "model" not in d:
            raise ConfigError("config needs a 'model' recipe")
        unknown = set(d) - {"model", "unraveling", "experiment", "out", "emission"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            unr = UnravelingConfig.from_dict(d.get("unraveling", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad unraveling section: {exc}") from exc
        exp = d.get("experiment", "trajectory")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {exp!r}")
        return cls(dict(d["model"]), unr, exp, str(d.get("out", "out")), dict(d.get("emission", {})))


# ---------------------------------------------------------------------------
# emission

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    if x is None:
        return "nan"
    return "%.17e" % float(x)


def write_csv(path: Path, header: list[str], rows, cfg: RunConfig) -> str:
    """CSV with the serialised config and a sha256 of the data section as leading comments."""
    body = io.StringIO()
    body.write(",".join(header) + "\n")
    for row in rows:
        body.write(",".join(_fmt(v) for v in row) + "\n")
    text = body.getvalue()
    digest = hashlib.sha256(text.encode()).hexdigest()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config: {cfg.to_json()}\n# sha256: {digest}\n")
        fh.write(text)
    return digest


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path: Path, payload: dict, cfg: RunConfig) -> str:
    data = _clean(payload)
    digest = hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()
    doc = {"config": cfg.to_dict(), "sha256": digest, **data}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def _label(x) -> str:
    return "(" + " ".join(str(v) for v in x) + ")" if isinstance(x, tuple) else str(x)


# ---------------------------------------------------------------------------
# commands

def _model(cfg: RunConfig):
    try:
        model = build_model(cfg.model)
    except TypeError as exc:
        raise ConfigError(f"bad model parameters: {exc}") from exc
    model.validate()
    return model


def cmd_trajectory(cfg: RunConfig, out: Path) -> dict:
    model = _model(cfg)
    unr = UnravelingConfig.from_dict({**cfg.unraveling.to_dict(), "track_products": True})
    stream = tuple(cfg.emission.get("stream", ()))
    prods = []
    rec = trajectory.raise_for_error(trajectory.run_trajectory(model, unr, stream=stream, products_out=prods))
    labels = [_label(x) for x in model.structure.labels]
    D = len(labels)
    header = ["t"] + [f"p_{l}" for l in labels] + [f"log_w_{l}" for l in labels]
    write_csv(out / "weights.csv", header, (np.concatenate([[t], p, w]) for t, p, w in
                                            zip(rec.times, rec.probs, rec.log_w)), cfg)
    sv_header = ["t"] + [f"log_sv{k + 1}_{l}" for a, l in enumerate(labels) for k in range(model.structure.dims[a])]
    write_csv(out / "singulars.csv", sv_header,
              (np.concatenate([[t]] + [rec.log_sv[a][i] for a in range(D)]) for i, t in enumerate(rec.times)), cfg)
    rep = freezing.detect_freeze(rec, unr.freeze_epsilon)
    st = model.structure
    phi = st.vector_to_block_basis(rec.initial_state)
    off = st.offsets
    overlap = {labels[a]: (freezing.top_singular_overlap(prods[-1][1][a][1], phi[off[a]:off[a + 1]])
                           if prods and np.isfinite(prods[-1][1][a][0]) else None) for a in range(D)}
    payload = {**rep.to_dict(model.structure.labels), "n_jumps": len(rec.jump_steps), "t_end": rec.times[-1],
               "diagnostics": {**rec.diagnostics, "top_singular_overlap": overlap}}
    write_json(out / "freeze_report.json", payload, cfg)
    return payload


def cmd_ensemble(cfg: RunConfig, out: Path, n_traj: int, threads: int) -> dict:
    model = _model(cfg)
    recs = trajectory.run_ensemble(model, cfg.unraveling, n_traj, workers=threads)
    failures = trajectory.failure_manifest(recs)
    if len(failures) == len(recs):
        raise TimestepError(f"all {len(recs)} trajectories failed: {failures[0]['message']}")
    snaps = [float(t) for t in cfg.emission.get("snapshot_times", [cfg.unraveling.t_max])]
    stats = freezing.ensemble_stats(recs, bins=cfg.emission.get("bins", "fd"), t_snapshots=snaps,
                                    epsilon=cfg.unraveling.freeze_epsilon)
    labels = model.structure.labels
    if len(stats.pdf):
        write_csv(out / "freeze_hist.csv", ["bin_left", "bin_right", "pdf", "cdf"],
                  zip(stats.bin_edges[:-1], stats.bin_edges[1:], stats.pdf, stats.cdf), cfg)
    else:
        write_csv(out / "freeze_hist.csv", ["bin_left", "bin_right", "pdf", "cdf"], [], cfg)
    fr = stats.destination_fractions() if stats.n_frozen else {}
    write_csv(out / "destinations.csv", ["alpha", "label", "count", "fraction", "stderr"],
              ([a, _label(labels[a]), stats.destination_counts[a], f, e] for a, (f, e) in fr.items()), cfg)
    write_csv(out / "coherence_matrix.csv", ["t", "alpha", "alpha_prime", "value"],
              ([t, a, b, c[a, b]] for t, c in stats.coherence.items() for a in range(len(c)) for b in range(len(c))),
              cfg)
    payload = {
        "n_traj": n_traj, "n_frozen": stats.n_frozen, "n_unfrozen": stats.n_unfrozen,
        "mean_freeze_time": stats.mean_freeze_time, "sem_freeze_time": stats.sem_freeze_time,
        "destinations": {str(a): {"label": _label(labels[a]), "fraction": f, "stderr": e} for a, (f, e) in fr.items()},
        "failures": failures,
    }
    write_json(out / "summary.json", payload, cfg)
    return payload


def cmd_sweep_gamma(cfg: RunConfig, out: Path, n_traj: int, threads: int) -> dict:
    em = cfg.emission
    gammas = [float(g) for g in em.get("gammas", [])]
    if not gammas:
        raise ConfigError("sweep-gamma needs emission.gammas")
    pair = tuple(em.get("pair", ()))
    if len(pair) != 2:
        raise ConfigError("sweep-gamma needs emission.pair = [alpha, alpha_prime]")
    family = cfg.model["family"]
    base = dict(cfg.model.get("params", {}))

    def factory(g):
        return build_model({"family": family, "params": {**base, "gamma": g}})

    rows, fit = freezing.freeze_time_vs_gap(factory, gammas, pair, n_traj, cfg.unraveling,
                                            t_max_over_gap=em.get("t_max_over_gap", 200.0), workers=threads)
    write_csv(out / "gap_vs_gamma.csv", ["gamma", "gap"], ((r.gamma, r.gap) for r in rows), cfg)
    write_csv(out / "freezetime_vs_gamma.csv",
              ["gamma", "mean_freeze_time", "sem", "n_frozen", "n_traj", "divergent"],
              ((r.gamma, r.mean_freeze_time, r.sem_freeze_time, r.n_frozen, r.n_traj, r.divergent) for r in rows),
              cfg)
    payload = {"applicable": fit.applicable, "slope": fit.slope, "c_free": fit.c_free, "c_fixed": fit.c_fixed,
               "fit_gamma_range": fit.fit_range, "pair": list(pair),
               "divergent_gammas": [r.gamma for r in rows if r.divergent]}
    ref = em.get("reference_c")
    if ref is not None and fit.applicable:
        payload["reference_c"] = ref
        payload["ratio_to_reference"] = fit.c_fixed / ref
    write_json(out / "fit.json", payload, cfg)
    return payload


def cmd_spectrum(cfg: RunConfig, out: Path) -> dict:
    model = _model(cfg)
    st = model.structure
    pairs = [tuple(p) for p in cfg.emission.get("pairs", [])] or \
        [(a, b) for a in range(len(st)) for b in range(a, len(st))]
    rows, gaps = [], []
    for p in pairs:
        spec = liouvillian.sector_spectrum(model.H, model.jumps, st, p)
        rows.extend((p[0], p[1], z.real, z.imag) for z in np.sort_complex(spec.eigenvalues))
        gaps.append((p[0], p[1], spec.gap, spec.gap_closed))
    write_csv(out / "spectrum.csv", ["alpha", "alpha_prime", "re", "im"], rows, cfg)
    write_csv(out / "gaps.csv", ["alpha", "alpha_prime", "gap", "closed"], gaps, cfg)
    return {"pairs": len(pairs), "closed": [[a, b] for a, b, _, c in gaps if c and a != b]}


def cmd_steady_states(cfg: RunConfig, out: Path) -> dict:
    model = _model(cfg)
    ss = liouvillian.steady_states(model.H, model.jumps, model.structure)
    labels = model.structure.labels
    payload = {"count": len(ss), "states": [
        {"sector": s.sector, "label": _label(labels[s.sector]), "degeneracy": s.degeneracy, "residual": s.residual,
         "populations": np.real(np.diag(s.rho))} for s in ss]}
    write_json(out / "steady_states.json", payload, cfg)
    return {"count": len(ss)}


def _similar_pairs(model, pairs):
    hb = symmetry.BlockOperator.from_operator(model.H, model.structure)
    jb = [symmetry.BlockOperator.from_operator(L, model.structure) for L in model.jump_ops]
    return {p: symmetry.check_similar(hb, jb, p) for p in pairs}


def cmd_detect_traceless(cfg: RunConfig, out: Path) -> dict:
    model = _model(cfg)
    st = model.structure
    init = models.InitialState(sectors=model.initial_state.sectors)
    model = model.with_initial_state(init)
    t0 = time.perf_counter()
    rec = trajectory.raise_for_error(trajectory.run_trajectory(model, cfg.unraveling))
    rep = freezing.detect_freeze(rec, cfg.unraveling.freeze_epsilon)
    heur_time = time.perf_counter() - t0
    heur = set(rep.non_freezing_pairs)

    dims = st.dims
    oversized = max(dims) ** 2 > SPECTRAL_LIMIT
    spectral = None
    spec_time = None
    if not oversized:
        t0 = time.perf_counter()
        modes = liouvillian.detect_traceless_modes(st, model.H, model.jumps)
        spec_time = time.perf_counter() - t0
        spectral = {m.pair: m for m in modes}
    sim = _similar_pairs(model, sorted(heur | set(spectral or ())))
    labels = st.labels
    classified = []
    for p in sorted(heur | set(spectral or ())):
        if spectral is not None and p in spectral:
            kind = "traceless"
        elif sim[p].similar:
            kind = "similar"
        else:
            kind = "unexplained"
        classified.append({"pair": list(p), "labels": [_label(labels[p[0]]), _label(labels[p[1]])],
                           "class": kind, "heuristic": p in heur,
                           "spectral": None if spectral is None else p in spectral})
    disagreements = []
    if spectral is not None:
        # similar pairs do not freeze without any traceless mode, so they are not disagreements
        disagreements = [list(p) for p in sorted(heur ^ set(spectral)) if not (p in heur and sim[p].similar)]
    payload = {
        "heuristic": {"frozen": rep.frozen, "non_freezing_pairs": sorted(heur), "t_max": cfg.unraveling.t_max,
                      "seconds": heur_time},
        "spectral": {"skipped": oversized, "pairs": None if spectral is None else sorted(spectral),
                     "seconds": spec_time},
        "pairs": classified,
        "disagreements": disagreements,
    }
    write_json(out / "traceless_report.json", payload, cfg)
    return payload


def cmd_validate_model(cfg: RunConfig, out: Path) -> dict:
    model = build_model(cfg.model)
    ok = symmetry.verify_strong_symmetry(model.H, model.jump_ops, model.symmetry_matrix())
    st = model.structure
    pairs = [(a, b) for a in range(len(st)) for b in range(a + 1, len(st)) if st.dims[a] == st.dims[b]]
    sim = _similar_pairs(model, pairs) if ok else {}
    payload = {"strong_symmetry": ok, "dim": model.dim, "subspace_dims": st.dims,
               "labels": [_label(x) for x in st.labels],
               "declared_matches_inferred": models.declared_matches_inferred(model),
               "similar_pairs": [{"pair": list(p), "phases": v.phases, "permutation": v.permutation}
                                 for p, v in sim.items() if v.similar]}
    write_json(out / "validate.json", payload, cfg)
    if not ok:
        raise ConsistencyError("declared symmetry does not commute with H and the jump operators")
    return payload


def cmd_models_list() -> dict:
    import inspect

    out = {}
    for name, fn in models.FAMILIES.items():
        target = {"qubit_number": models.qubit_dephasing_toy, "qubit_sigma_z": models.qubit_dephasing_toy}.get(name, fn)
        sig = inspect.signature(target)
        out[name] = {k: v.default for k, v in sig.parameters.items() if k != "variant"}
    return out


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--family", help="model family (overrides config)")
    common.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                        help="model parameter override, value parsed as JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--n-traj", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="symfreeze", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common])
    m = sub.add_parser("models", parents=[common])
    m.add_argument("action", choices=["list"])
    return p


def _resolve(args) -> RunConfig:
    doc: dict = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    model = dict(doc.get("model", {}))
    if args.family:
        model = {"family": args.family, "params": {}, **({"initial_state": model["initial_state"]}
                                                        if "initial_state" in model else {})}
    params = dict(model.get("params", {}))
    for kv in args.param:
        if "=" not in kv:
            raise ConfigError(f"--param expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        try:
            params[k] = json.loads(v)
        except json.JSONDecodeError:
            params[k] = v
    model["params"] = params
    if "family" not in model:
        raise ConfigError("no model family given (use --config or --family)")
    doc["model"] = model
    doc["experiment"] = args.command
    unr = dict(doc.get("unraveling", {}))
    if args.seed is not None:
        unr["seed"] = args.seed
    doc["unraveling"] = unr
    if args.out is not None:
        doc["out"] = str(args.out)
    em = dict(doc.get("emission", {}))
    if args.n_traj is not None:
        em["n_traj"] = args.n_traj
    if args.threads is not None:
        em["threads"] = args.threads
    doc["emission"] = em
    return RunConfig.from_dict(doc)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "models":
            print(json.dumps(cmd_models_list(), indent=2))
            return 0
        cfg = _resolve(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        n_traj = int(cfg.emission.get("n_traj", 100))
        threads = int(cfg.emission.get("threads", 1))
        if n_traj < 1 or threads < 1:
            raise ConfigError("n_traj and threads must be positive")
        cmd = cfg.experiment
        if cmd == "trajectory":
            res = cmd_trajectory(cfg, out)
        elif cmd == "ensemble":
            res = cmd_ensemble(cfg, out, n_traj, threads)
        elif cmd == "sweep-gamma":
            res = cmd_sweep_gamma(cfg, out, n_traj, threads)
        elif cmd == "spectrum":
            res = cmd_spectrum(cfg, out)
        elif cmd == "steady-states":
            res = cmd_steady_states(cfg, out)
        elif cmd == "detect-traceless":
            res = cmd_detect_traceless(cfg, out)
        else:
            res = cmd_validate_model(cfg, out)
        print(json.dumps(_clean(res), sort_keys=True))
        return 0
    except (ConfigError, ModelError, symmetry.SymmetryError, KeyError) as exc:
        return _fail(2, "config", exc)
    except ConsistencyError as exc:
        return _fail(4, "consistency", exc)
    except (TimestepError, InvalidJumpError, StepSizeError, LiouvillianError, np.linalg.LinAlgError) as exc:
        return _fail(3, "numerical", exc)


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
