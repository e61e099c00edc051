"""End-to-end pipeline: data, catalog, trajectories, seeds, finder runs, matching.

Every stage reads and writes plain files under one output directory so the
CLI can run stages one at a time or all together.
"""

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import (DEFAULT_TAU_REL, build_catalog, format_subset, parse_subset,
                      read_catalog_csv)
from .errors import InvalidInputError, StageError
from .finders import METHODS, RUNNERS, CriticalPointRecord, FinderConfig, classify_terminal
from .linalg import RNG_IDENTITY, seeded_rng
from .model import Architecture, Dataset, NetworkParams, generate_dataset
from .sampler import Seed, Snapshot, Trajectory, sample_seeds, train_gd

log = logging.getLogger(__name__)

DISPLAY_FLOOR = 1e-40

TRACE_COLUMNS = ["method", "trajectory_id", "seed_id", "epoch", "sq_grad_norm", "loss",
                 "step_or_radius", "inner_iters", "accepted", "status"]
POINT_COLUMNS = ["method", "trajectory_id", "seed_id", "terminal_sq_grad_norm", "loss", "index",
                 "nullity", "converged", "matched_subset", "matched", "status", "epochs"]
TRAJECTORY_COLUMNS = ["trajectory_id", "epoch", "loss", "sq_grad_norm"]
SEED_COLUMNS = ["trajectory_id", "seed_id", "epoch"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _from_dict(cls, doc, where):
    doc = dict(doc or {})
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class DataConfig:
    n_samples: int = 256
    spectrum: object = "powers-of-two"
    seed: int = None


@dataclass
class TrajectoryConfig:
    count: int = 10
    epochs: int = 1000
    learning_rate: float = 1e-3
    snapshot_every: int = 10
    init_scale: float = 1.0
    init_seeds: list = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    widths: list = field(default_factory=lambda: [8, 4, 8])
    data: DataConfig = field(default_factory=DataConfig)
    trajectories: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    seeds_per_trajectory: int = 15
    sampling_seed: int = None
    methods: list = field(default_factory=lambda: list(METHODS))
    # options applied to every method, then per-method overrides on top
    finder: dict = field(default_factory=dict)
    finders: dict = field(default_factory=dict)
    tau_rel: float = DEFAULT_TAU_REL
    loss_rel_tol: float = 1e-5
    workers: int = 1
    dump_representatives: bool = False

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = _from_dict(DataConfig, self.data, "data")
        if isinstance(self.trajectories, dict):
            self.trajectories = _from_dict(TrajectoryConfig, self.trajectories, "trajectories")
        self.widths = [int(w) for w in self.widths]
        Architecture(self.widths)
        if not self.methods:
            raise InvalidInputError("methods must be non-empty")
        for m in self.methods:
            if m not in METHODS:
                raise InvalidInputError(f"unknown method {m!r}")
        for m in self.finders:
            if m not in METHODS:
                raise InvalidInputError(f"finder overrides for unknown method {m!r}")
        t = self.trajectories
        counts = [t.count, t.epochs, t.snapshot_every, self.seeds_per_trajectory, self.workers,
                  self.data.n_samples]
        if min(counts) < 1:
            raise InvalidInputError("counts must be positive")
        if t.init_seeds is not None and len(t.init_seeds) != t.count:
            raise InvalidInputError("init_seeds must have one entry per trajectory")
        if not (t.learning_rate > 0 and self.tau_rel > 0 and self.loss_rel_tol > 0):
            raise InvalidInputError("learning_rate, tau_rel and loss_rel_tol must be positive")
        for m in self.methods:
            self.finder_config(m)

    @classmethod
    def from_dict(cls, doc):
        return _from_dict(cls, doc, "config")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    # seeds not given explicitly derive from the master seed
    @property
    def data_seed(self):
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def init_seeds(self):
        t = self.trajectories
        if t.init_seeds is not None:
            return [int(s) for s in t.init_seeds]
        return [self.seed + 1 + i for i in range(t.count)]

    @property
    def sampler_seed(self):
        return self.seed + 10_000 if self.sampling_seed is None else self.sampling_seed

    @property
    def architecture(self):
        return Architecture(self.widths)

    def finder_config(self, method):
        opts = dict(self.finder)
        opts.update(self.finders.get(method, {}))
        opts["method"] = method
        return FinderConfig.from_dict(opts)

    def resolved(self):
        doc = asdict(self)
        doc["data"]["seed"] = self.data_seed
        doc["trajectories"]["init_seeds"] = self.init_seeds
        doc["sampling_seed"] = self.sampler_seed
        doc["finders"] = {m: self.finder_config(m).to_dict() for m in self.methods}
        return doc


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _num(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_num(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _bool(text):
    return text.strip().lower() == "true"


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Records and matching
# ---------------------------------------------------------------------------

def _point_key(rec):
    return (METHODS.index(rec.method), rec.trajectory_id, rec.seed_id)


def point_row(rec):
    """A ``critical_points.csv`` row; ``matched`` disambiguates the empty subset."""
    d = asdict(rec)
    d["matched"] = rec.matched_subset is not None
    d["matched_subset"] = "" if rec.matched_subset is None else format_subset(rec.matched_subset)
    return d


def point_from_row(row):
    matched = _bool(row.get("matched", "false"))
    return CriticalPointRecord(
        method=row["method"],
        trajectory_id=int(row["trajectory_id"]),
        seed_id=int(row["seed_id"]),
        terminal_sq_grad_norm=float(row["terminal_sq_grad_norm"]),
        loss=float(row["loss"]),
        index=int(row["index"]),
        nullity=int(row["nullity"]),
        converged=_bool(row["converged"]),
        status=row.get("status", ""),
        epochs=int(row.get("epochs") or 0),
        matched_subset=parse_subset(row.get("matched_subset", "")) if matched else None,
    )


@dataclass
class MatchOutcome:
    method: str
    trajectory_id: int
    seed_id: int
    converged: bool
    subset: tuple = None
    ambiguous: bool = False

    @property
    def matched(self):
        return self.subset is not None


@dataclass
class MatchReport:
    outcomes: list
    summary: dict

    def to_dict(self):
        return {
            "summary": self.summary,
            "runs": [
                {"method": o.method, "trajectory_id": o.trajectory_id, "seed_id": o.seed_id,
                 "converged": o.converged, "matched": o.matched,
                 "subset": None if o.subset is None else list(o.subset), "ambiguous": o.ambiguous}
                for o in self.outcomes
            ],
        }


def match_record(rec, catalog, loss_rel_tol=1e-5):
    """Catalog entries agreeing with a converged record on index and (relative) loss."""
    if not rec.converged:
        return None, False
    hits = [e for e in catalog
            if e.index == rec.index
            and abs(rec.loss - e.analytic_loss) <= loss_rel_tol * max(1.0, e.analytic_loss)]
    if not hits:
        return None, False
    best = min(hits, key=lambda e: abs(rec.loss - e.analytic_loss))
    return best, len(hits) > 1


def match_runs(records, catalog, loss_rel_tol=1e-5):
    """Match converged records against the catalog and summarize per method.

    Non-converged records are unmatched by definition and excluded from the
    match-rate denominator.
    """
    if not len(catalog):
        raise InvalidInputError("catalog is empty")
    index_of = {tuple(e.subset): e.index for e in catalog}
    outcomes = []
    summary = {}
    for rec in records:
        entry, ambiguous = match_record(rec, catalog, loss_rel_tol)
        rec.matched_subset = None if entry is None else tuple(entry.subset)
        rec.ambiguous = ambiguous
        outcomes.append(MatchOutcome(rec.method, rec.trajectory_id, rec.seed_id, rec.converged,
                                     rec.matched_subset, ambiguous))
    for method in sorted({r.method for r in records}, key=METHODS.index):
        mine = [r for r in records if r.method == method]
        conv = [r for r in mine if r.converged]
        matched = [r for r in conv if r.matched_subset is not None]
        hit = sorted({r.matched_subset for r in matched})
        saddles = [s for s in hit if index_of[s] > 0]
        gs = [r.terminal_sq_grad_norm for r in mine]
        summary[method] = {
            "runs": len(mine),
            "converged": len(conv),
            "matched": len(matched),
            "ambiguous": sum(r.ambiguous for r in matched),
            "converged_fraction": len(conv) / len(mine) if mine else 0.0,
            "match_rate": len(matched) / len(conv) if conv else None,
            "distinct_entries": len(hit),
            "distinct_saddles": len(saddles),
            "entries_hit": [format_subset(s) for s in hit],
            "max_terminal_g": max(gs) if gs else None,
            "min_terminal_g": min(gs) if gs else None,
        }
    return MatchReport(outcomes, summary)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

class Paths:
    def __init__(self, out):
        self.root = Path(out)

    def __getattr__(self, name):
        names = {
            "dataset": "dataset.json",
            "catalog": "catalog.csv",
            "representatives": "representatives",
            "trajectories": "trajectories.csv",
            "snapshots": "snapshots",
            "seeds": "seeds.csv",
            "traces": "traces.csv",
            "points": "critical_points.csv",
            "report": "match_report.json",
            "fig_traces": "fig1_traces.csv",
            "fig_scatter": "fig1_scatter.csv",
            "manifest": "manifest.json",
        }
        if name not in names:
            raise AttributeError(name)
        return self.root / names[name]

    def snapshot(self, trajectory_id, epoch):
        return self.snapshots / f"traj{trajectory_id:03d}_epoch{epoch:06d}.json"


def _require(path, stage):
    if not Path(path).exists():
        raise StageError(stage, f"missing input {path}; run the earlier stages first")


def stage_gen_data(cfg, out):
    paths = Paths(out)
    paths.root.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg.widths[0], cfg.data.n_samples, cfg.data.spectrum, cfg.data_seed)
    paths.dataset.write_text(data.to_json())
    return data


def load_dataset(out, stage="load"):
    paths = Paths(out)
    _require(paths.dataset, stage)
    return Dataset.from_json(paths.dataset.read_text())


def stage_catalog(cfg, out, data=None):
    paths = Paths(out)
    data = data if data is not None else load_dataset(out, "catalog")
    catalog = build_catalog(cfg.architecture, data, cfg.tau_rel)
    paths.catalog.write_text(catalog.to_csv())
    if cfg.dump_representatives:
        paths.representatives.mkdir(exist_ok=True)
        for e in catalog:
            name = "empty" if not e.subset else "_".join(map(str, e.subset))
            (paths.representatives / f"subset_{name}.json").write_text(e.representative.to_json())
    for e in catalog.unstable():
        log.warning("index of subset %s changes with tau_rel in [1e-8, 1e-5]", e.label or "{}")
    return catalog


def stage_train(cfg, out, data=None):
    paths = Paths(out)
    data = data if data is not None else load_dataset(out, "train")
    t = cfg.trajectories
    paths.snapshots.mkdir(parents=True, exist_ok=True)
    trajs, rows, warnings = [], [], []
    for i, seed in enumerate(cfg.init_seeds):
        traj = train_gd(cfg.architecture, data, t.init_scale, t.learning_rate, t.epochs,
                        t.snapshot_every, seed=seed, trajectory_id=i)
        if traj.status != "completed":
            warnings.append(f"trajectory {i} {traj.status}")
        eps = cfg.finder_config(cfg.methods[0]).epsilon_crit
        if any(s.sq_grad_norm <= eps for s in traj.snapshots):
            warnings.append(f"trajectory {i} reached the convergence criterion on its own")
        for s in traj.snapshots:
            paths.snapshot(i, s.epoch).write_text(s.params.to_json())
            rows.append({"trajectory_id": i, "epoch": s.epoch, "loss": s.loss,
                         "sq_grad_norm": s.sq_grad_norm})
        trajs.append(traj)
    _write_csv(paths.trajectories, TRAJECTORY_COLUMNS, rows)
    for w in warnings:
        log.warning(w)
    return trajs, warnings


def load_trajectories(out, stage="load"):
    paths = Paths(out)
    _require(paths.trajectories, stage)
    by_id = {}
    for row in _read_csv(paths.trajectories):
        tid, epoch = int(row["trajectory_id"]), int(row["epoch"])
        snap_path = paths.snapshot(tid, epoch)
        _require(snap_path, stage)
        params = NetworkParams.from_json(snap_path.read_text())
        traj = by_id.setdefault(tid, Trajectory(tid, -1))
        traj.snapshots.append(Snapshot(epoch, params, float(row["loss"]),
                                       float(row["sq_grad_norm"])))
    return [by_id[k] for k in sorted(by_id)]


def stage_sample_seeds(cfg, out, trajs=None):
    paths = Paths(out)
    trajs = trajs if trajs is not None else load_trajectories(out, "sample-seeds")
    rng = seeded_rng(cfg.sampler_seed)
    seeds = []
    for traj in trajs:
        seeds.extend(sample_seeds(traj, cfg.seeds_per_trajectory, rng))
    _write_csv(paths.seeds, SEED_COLUMNS,
               [{"trajectory_id": s.trajectory_id, "seed_id": s.seed_id, "epoch": s.epoch}
                for s in seeds])
    return seeds


def load_seeds(out, stage="load"):
    paths = Paths(out)
    _require(paths.seeds, stage)
    seeds = []
    for row in _read_csv(paths.seeds):
        tid, epoch = int(row["trajectory_id"]), int(row["epoch"])
        snap_path = paths.snapshot(tid, epoch)
        _require(snap_path, stage)
        seeds.append(Seed(tid, int(row["seed_id"]), epoch,
                          NetworkParams.from_json(snap_path.read_text())))
    return seeds


def _run_one(job):
    method, cfg, seed, data, tau_rel = job
    trace, terminal = RUNNERS[method](seed.params, data, cfg)
    rec = classify_terminal(terminal, data, tau_rel, cfg.epsilon_crit, method=method,
                            trajectory_id=seed.trajectory_id, seed_id=seed.seed_id,
                            status=trace.status, epochs=trace.epochs)
    rows = [{"method": method, "trajectory_id": seed.trajectory_id, "seed_id": seed.seed_id,
             "epoch": r.epoch, "sq_grad_norm": r.g, "loss": r.loss,
             "step_or_radius": r.step_or_radius, "inner_iters": r.inner_iters,
             "accepted": r.accepted, "status": trace.status} for r in trace.records]
    return rec, rows


def stage_find(cfg, out, data=None, seeds=None, methods=None):
    """Run every requested method from every seed; rows sorted by (method, trajectory, seed)."""
    paths = Paths(out)
    data = data if data is not None else load_dataset(out, "find")
    seeds = seeds if seeds is not None else load_seeds(out, "find")
    methods = list(methods or cfg.methods)
    jobs = [(m, cfg.finder_config(m), s, data, cfg.tau_rel) for m in methods for s in seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_one, jobs, chunksize=4))
    else:
        results = [_run_one(j) for j in jobs]

    points = [p for p, _ in results]
    traces = [row for _, rows in results for row in rows]
    # keep rows of methods not rerun this time
    if set(methods) != set(METHODS) and paths.points.exists() and paths.traces.exists():
        points += [point_from_row(r) for r in _read_csv(paths.points)
                   if r["method"] not in methods]
        traces += [r for r in _read_csv(paths.traces) if r["method"] not in methods]
    points.sort(key=_point_key)
    order = {m: i for i, m in enumerate(METHODS)}
    traces.sort(key=lambda r: (order[r["method"]], int(r["trajectory_id"]), int(r["seed_id"]),
                               int(r["epoch"])))
    _write_csv(paths.traces, TRACE_COLUMNS, traces)
    _write_csv(paths.points, POINT_COLUMNS, [point_row(p) for p in points])
    return points


def load_points(out, stage="load"):
    paths = Paths(out)
    _require(paths.points, stage)
    return [point_from_row(r) for r in _read_csv(paths.points)]


def load_catalog_rows(out, stage="load"):
    paths = Paths(out)
    _require(paths.catalog, stage)
    return read_catalog_csv(paths.catalog.read_text())


def stage_match(cfg, out, points=None, catalog=None):
    paths = Paths(out)
    points = points if points is not None else load_points(out, "match")
    catalog = catalog if catalog is not None else load_catalog_rows(out, "match")
    report = match_runs(points, catalog, cfg.loss_rel_tol)
    _write_csv(paths.points, POINT_COLUMNS, [point_row(p) for p in points])
    paths.report.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def emit_plot_data(out, loss_rel_tol=1e-5):
    """Write ``fig1_traces.csv`` and ``fig1_scatter.csv`` from existing outputs.

    Trace values keep their raw magnitude; ``below_floor`` marks those under
    the 1e-40 display cut-off. The scatter file has a ``catalog`` layer and a
    ``recovered`` layer (converged runs only).
    """
    paths = Paths(out)
    _require(paths.catalog, "emit-plots")
    catalog = read_catalog_csv(paths.catalog.read_text())
    points = load_points(out, "emit-plots") if paths.points.exists() else []
    conv = {(p.method, p.trajectory_id, p.seed_id): p.converged for p in points}

    trace_rows = []
    if paths.traces.exists():
        for r in _read_csv(paths.traces):
            key = (r["method"], int(r["trajectory_id"]), int(r["seed_id"]))
            g = float(r["sq_grad_norm"])
            trace_rows.append({
                "method": r["method"], "trajectory_id": key[1], "seed_id": key[2],
                "epoch": int(r["epoch"]), "sq_grad_norm": g,
                "below_floor": g < DISPLAY_FLOOR,
                "label": "converged" if conv.get(key, False) else "unconverged",
            })
    _write_csv(paths.fig_traces, ["method", "trajectory_id", "seed_id", "epoch", "sq_grad_norm",
                                  "below_floor", "label"], trace_rows)

    scatter = [{"layer": "catalog", "method": "", "trajectory_id": "", "seed_id": "",
                "loss": e.analytic_loss, "index": e.index, "subset": e.label,
                "matched": ""} for e in catalog]
    for p in points:
        if not p.converged:
            continue
        entry, _ = match_record(p, catalog, loss_rel_tol)
        scatter.append({"layer": "recovered", "method": p.method,
                        "trajectory_id": p.trajectory_id, "seed_id": p.seed_id,
                        "loss": p.loss, "index": p.index,
                        "subset": "" if entry is None else entry.label,
                        "matched": entry is not None})
    _write_csv(paths.fig_scatter, ["layer", "method", "trajectory_id", "seed_id", "loss", "index",
                                   "subset", "matched"], scatter)
    return paths.fig_traces, paths.fig_scatter


def write_manifest(cfg, out, stages, warnings=(), failure=None):
    paths = Paths(out)
    files = {}
    for p in sorted(paths.root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(paths.root))] = sha256(p)
    doc = {
        "software": {"package": "dlcrit", "version": __version__, "numpy": np.__version__},
        "rng": {"generator": RNG_IDENTITY, "master_seed": cfg.seed},
        "config": cfg.resolved(),
        "stages": stages,
        "warnings": list(warnings),
        "failure": failure,
        "files": files,
    }
    paths.manifest.write_text(json.dumps(doc, indent=2, default=str) + "\n")
    return doc


def run_experiment(cfg, out):
    """Every stage in order; the manifest records what ran and any failure."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stages, warnings = [], []
    ctx = {}

    def run(name, fn):
        t0 = time.perf_counter()
        try:
            ctx[name] = fn()
        except Exception as exc:
            stages.append({"stage": name, "ok": False, "seconds": time.perf_counter() - t0})
            write_manifest(cfg, out, stages, warnings, {"stage": name, "error": str(exc)})
            if isinstance(exc, StageError):
                raise
            raise StageError(name, str(exc)) from exc
        stages.append({"stage": name, "ok": True, "seconds": time.perf_counter() - t0})
        log.info("stage %s done in %.1fs", name, stages[-1]["seconds"])
        return ctx[name]

    data = run("gen-data", lambda: stage_gen_data(cfg, out))
    catalog = run("catalog", lambda: stage_catalog(cfg, out, data))
    trajs, train_warnings = run("train", lambda: stage_train(cfg, out, data))
    warnings.extend(train_warnings)
    seeds = run("sample-seeds", lambda: stage_sample_seeds(cfg, out, trajs))
    points = run("find", lambda: stage_find(cfg, out, data, seeds))
    report = run("match", lambda: stage_match(cfg, out, points, catalog.entries))
    run("emit-plots", lambda: emit_plot_data(out, cfg.loss_rel_tol))
    write_manifest(cfg, out, stages, warnings)
    return report
