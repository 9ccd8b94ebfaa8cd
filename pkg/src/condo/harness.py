"""Evaluation, experiment configs, sweeps and report files.

Run artifacts are laid out as::

    <out>/<run_label>/rounds.csv            one row per round (budget, teacher error)
    <out>/<run_label>/round_metrics.csv     held-out metrics after every round
    <out>/<run_label>/per_frame_errors.csv  final per-frame errors
    <out>/<run_label>/summary.json          final metrics, round series, budget totals
    <out>/<run_label>/labels.json           cached teacher labels
    <out>/<run_label>/checkpoints/round_<k>.json
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .continual import (ConDo, RetrainGT, RetrainTeacher, RoundReport, StandAlonePerScene, TeacherSpec,
                        TrainConfig, TrainOnly, run_strategy)
from .errors import ConfigError, UnknownScene
from .geometry import orientation_error_deg, position_error, quat_normalize
from .model import AprModel, forward, model_to_dict
from .world import Benchmark, BenchmarkConfig, build_benchmark

log = logging.getLogger(__name__)

GROUPS = {"train": "train-held-out", "inference": "inference-held-out"}


def fmt(x) -> str:
    """Stable 17-significant-digit float text; ints and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else format(float(x), ".17g")
    return str(x)


def _json_num(x):
    x = float(x)
    return None if math.isnan(x) else x


# ---------------------------------------------------------------------------
# metrics

@dataclass
class ErrorStats:
    median_pos_m: float
    mean_pos_m: float
    median_rot_deg: float
    mean_rot_deg: float
    n_frames: int

    @classmethod
    def of(cls, pos, rot) -> ErrorStats:
        pos = np.asarray(pos, dtype=np.float64)
        rot = np.asarray(rot, dtype=np.float64)
        if len(pos) == 0:
            nan = float("nan")
            return cls(nan, nan, nan, nan, 0)
        return cls(float(np.median(pos)), float(np.mean(pos)), float(np.median(rot)), float(np.mean(rot)), len(pos))


@dataclass
class ScanMetrics:
    scan_id: str
    scene_id: str
    group: str
    stats: ErrorStats


@dataclass
class MetricsReport:
    scans: list  # ScanMetrics, in benchmark scan order
    groups: dict  # group -> ErrorStats pooled over every held-out frame of that group
    frames: list = field(default_factory=list)  # (scan_id, frame_index, group, pos_err, rot_err)

    def group(self, name: str) -> ErrorStats:
        return self.groups[GROUPS.get(name, name)]

    def scene_group(self, scene_id: str, name: str) -> ErrorStats:
        name = GROUPS.get(name, name)
        sel = [f for f, s in zip(self.frames, self._frame_scenes()) if s == scene_id and f[2] == name]
        return ErrorStats.of([f[3] for f in sel], [f[4] for f in sel])

    def _frame_scenes(self):
        by_scan = {s.scan_id: s.scene_id for s in self.scans}
        return [by_scan[f[0]] for f in self.frames]

    def to_dict(self) -> dict:
        def stats(s):
            return {k: _json_num(v) if k != "n_frames" else v for k, v in asdict(s).items()}
        return {
            "groups": {g: stats(s) for g, s in self.groups.items()},
            "scans": [{"scan_id": s.scan_id, "scene_id": s.scene_id, "group": s.group, **stats(s.stats)}
                      for s in self.scans],
        }

    @classmethod
    def from_dict(cls, d, frames=()) -> MetricsReport:
        def stats(x):
            return ErrorStats(*(float("nan") if x[k] is None else x[k]
                                for k in ("median_pos_m", "mean_pos_m", "median_rot_deg", "mean_rot_deg")),
                              int(x["n_frames"]))
        scans = [ScanMetrics(s["scan_id"], s["scene_id"], s["group"], stats(s)) for s in d["scans"]]
        return cls(scans, {g: stats(s) for g, s in d["groups"].items()}, list(frames))


def _predictor(model_or_stub):
    if isinstance(model_or_stub, AprModel):
        return lambda sid, X: forward(model_or_stub, sid, X)
    if isinstance(model_or_stub, dict):
        def pred(sid, X):
            if sid not in model_or_stub:
                raise UnknownScene(sid)
            return forward(model_or_stub[sid], sid, X)
        return pred
    return model_or_stub


def _unit(q):
    # already-unit rows stay bit-identical, as in Pose
    q = np.asarray(q, dtype=np.float64)
    off = np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-12
    return np.where(off[:, None], quat_normalize(q), q) if off.any() else q


def evaluate(model_or_stub, benchmark: Benchmark, scans=None) -> MetricsReport:
    """Held-out errors of a model, a ``{scene: model}`` map, or a stub.

    A stub is a callable ``(scene_id, features[n, D]) -> (positions[n, 3],
    quaternions[n, 4])``. Predicted quaternions are normalized before scoring.
    """
    predict = _predictor(model_or_stub)
    scans = benchmark.all_scans if scans is None else scans
    rows, frames = [], []
    pooled = {g: ([], []) for g in GROUPS.values()}
    for scan in scans:
        idx = scan.holdout_indices
        group = GROUPS[scan.role]
        if len(idx) == 0:
            rows.append(ScanMetrics(scan.scan_id, scan.scene_id, group, ErrorStats.of([], [])))
            continue
        t, r = predict(scan.scene_id, scan.features[idx])
        pe = position_error(t, scan.positions[idx])
        re_ = orientation_error_deg(_unit(r), scan.orientations[idx])
        rows.append(ScanMetrics(scan.scan_id, scan.scene_id, group, ErrorStats.of(pe, re_)))
        pooled[group][0].append(pe)
        pooled[group][1].append(re_)
        frames.extend((scan.scan_id, int(i), group, float(p), float(q)) for i, p, q in zip(idx, pe, re_))
    groups = {g: ErrorStats.of(np.concatenate(p) if p else [], np.concatenate(q) if q else [])
              for g, (p, q) in pooled.items()}
    return MetricsReport(rows, groups, frames)


# ---------------------------------------------------------------------------
# configuration

def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = {}
    for k, v in data.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_teacher(d: dict) -> TeacherSpec:
    spec = _strict(TeacherSpec, d, "teacher")
    if spec.kind not in ("oracle", "gt", "retrieval", "odometry"):
        raise ConfigError(f"teacher: unknown kind {spec.kind!r}")
    return spec


def parse_strategy(d: dict, default_teacher: TeacherSpec):
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("strategy: expected an object with a 'kind'")
    kind = d["kind"]
    rest = {k: v for k, v in d.items() if k != "kind"}
    allowed = {"train_only": set(), "condo": {"teacher", "budget_rate"}, "retrain_gt": {"budget_rate"},
               "retrain_teacher": {"teacher", "budget_rate"}, "standalone": {"inner"}}
    if kind not in allowed:
        raise ConfigError(f"strategy: unknown kind {kind!r}")
    if set(rest) - allowed[kind]:
        raise ConfigError(f"strategy {kind}: unknown keys {sorted(set(rest) - allowed[kind])}")
    teacher = parse_teacher(rest["teacher"]) if "teacher" in rest else default_teacher
    if kind == "train_only":
        return TrainOnly()
    if kind == "condo":
        return ConDo(teacher, float(rest.get("budget_rate", 1.0)))
    if kind == "retrain_gt":
        rate = rest.get("budget_rate")
        return RetrainGT(None if rate is None else float(rate))
    if kind == "retrain_teacher":
        rate = rest.get("budget_rate")
        return RetrainTeacher(teacher, None if rate is None else float(rate))
    return StandAlonePerScene(parse_strategy(rest.get("inner", {"kind": "condo"}), default_teacher))


DEFAULT_B = {"condition_shift": 4200.0, "novel_pose": 1800.0, "multi_scene": 1800.0}
SWEEP_DEFAULTS = {
    "budget": [1.0, 0.5, 0.25, 0.125, 0.01],
    "buffer": [0.1, 0.25, 0.5, 1.0],
    "teacher": [
        {"kind": "oracle", "sigma_t": 0.02, "sigma_r": 0.5},
        {"kind": "oracle", "sigma_t": 0.2, "sigma_r": 2.0},
        {"kind": "retrieval"},
        {"kind": "odometry", "sigma_t": 0.02, "sigma_r": 0.2},
        {"kind": "gt"},
    ],
}


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    strategies: list = field(default_factory=lambda: [TrainOnly(), ConDo(), RetrainGT()])
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    sweep_axis: str | None = None
    sweep_values: list | None = None
    seed: int = 0
    output_dir: str = "runs"
    parallel: int = 1
    checkpoints: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        allowed = {"benchmark", "strategies", "train", "teacher", "sweep", "seed", "output_dir", "parallel",
                   "checkpoints"}
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        bench = _strict(BenchmarkConfig, dict(d.get("benchmark", {})), "benchmark")
        if isinstance(bench.scene, tuple):
            raise ConfigError("benchmark.scene must be an object")
        from .world import PRESETS
        if bench.preset not in PRESETS:
            raise ConfigError(f"benchmark: unknown preset {bench.preset!r}")
        try:
            bench.scene_params()
        except ValueError as exc:
            raise ConfigError(f"benchmark.scene: {exc}") from exc
        train_d = dict(d.get("train", {}))
        train_d.setdefault("b", DEFAULT_B[bench.preset])
        train = _strict(TrainConfig, train_d, "train")
        teacher = parse_teacher(dict(d.get("teacher", {})))
        strategies = [parse_strategy(s, teacher) for s in d.get("strategies", [{"kind": "train_only"},
                                                                             {"kind": "condo"},
                                                                             {"kind": "retrain_gt"}])]
        sweep = d.get("sweep")
        axis = values = None
        if sweep is not None:
            if not isinstance(sweep, dict) or set(sweep) - {"axis", "values"} or "axis" not in sweep:
                raise ConfigError("sweep: expected {'axis': ..., 'values': [...]}")
            axis = sweep["axis"]
            if axis not in SWEEP_DEFAULTS:
                raise ConfigError(f"sweep: unknown axis {axis!r}")
            values = list(sweep.get("values", SWEEP_DEFAULTS[axis]))
        return cls(bench, strategies, train, teacher, axis, values, int(d.get("seed", 0)),
                   str(d.get("output_dir", "runs")), int(d.get("parallel", 1)), bool(d.get("checkpoints", True)))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# runs

def strategy_label(strategy) -> str:
    if isinstance(strategy, TrainOnly):
        return "train_only"
    if isinstance(strategy, ConDo):
        s = f"condo[{strategy.teacher.label}]"
        return s if strategy.budget_rate == 1.0 else f"{s}-rate{strategy.budget_rate:g}"
    if isinstance(strategy, (RetrainGT, RetrainTeacher)):
        base = "retrain_gt" if isinstance(strategy, RetrainGT) else f"retrain_teacher[{strategy.teacher.label}]"
        return f"{base}-{'unlimited' if strategy.budget_rate is None else f'rate{strategy.budget_rate:g}'}"
    return f"standalone[{strategy_label(strategy.inner)}]"


def safe_dirname(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_")


def total_unlabeled_frames(benchmark: Benchmark) -> int:
    from .world import NewInferenceScan
    return sum(len(ev.scan.train_indices) for ev in benchmark.events if isinstance(ev, NewInferenceScan))


def expand_runs(config: ExperimentConfig, benchmark: Benchmark) -> list:
    """(run_label, strategy, TrainConfig) triples; Train-only is always included."""
    runs = []
    if config.sweep_axis is None:
        runs = [(strategy_label(s), s, config.train) for s in config.strategies]
    elif config.sweep_axis == "budget":
        for rate in config.sweep_values:
            rate = float(rate)
            for s in (ConDo(config.teacher, rate), RetrainGT(rate)):
                runs.append((strategy_label(s), s, config.train))
    elif config.sweep_axis == "buffer":
        total = total_unlabeled_frames(benchmark)
        for frac in config.sweep_values:
            cap = max(1, math.ceil(float(frac) * total))
            runs.append((f"{strategy_label(ConDo(config.teacher))}-buffer{float(frac):g}", ConDo(config.teacher),
                         replace(config.train, buffer_capacity=cap)))
    elif config.sweep_axis == "teacher":
        for t in config.sweep_values:
            spec = t if isinstance(t, TeacherSpec) else parse_teacher(dict(t))
            s = ConDo(spec)
            runs.append((strategy_label(s), s, config.train))
    if not any(isinstance(s, TrainOnly) for _, s, _ in runs):
        runs.insert(0, ("train_only", TrainOnly(), config.train))
    labels = [r[0] for r in runs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate run labels {labels}")
    return runs


@dataclass
class RunArtifacts:
    label: str
    results: list  # RoundResult
    round_metrics: list  # MetricsReport per round
    label_cache: dict
    trained_frame_ids: set | None

    @property
    def final(self) -> MetricsReport:
        return self.round_metrics[-1]

    def total_granted(self) -> int:
        return sum(r.report.granted_iters for r in self.results)

    def total_used(self) -> int:
        return sum(r.report.used_iters for r in self.results)


def execute_run(benchmark: Benchmark, label: str, strategy, train: TrainConfig, seed: int,
                initial_cache: dict | None = None) -> RunArtifacts:
    states = []
    results = run_strategy(benchmark, strategy, train, seed, initial_cache, states)
    metrics = [evaluate(r.model, benchmark) for r in results]
    cache = {}
    audit = None
    for st in states:
        cache.update(st.label_cache)
        if st.trained_frame_ids is not None:
            audit = (audit or set()) | st.trained_frame_ids
    return RunArtifacts(label, results, metrics, cache, audit)


def run_summary(art: RunArtifacts) -> dict:
    return {
        "run_label": art.label,
        "final": art.final.to_dict(),
        "rounds": [{"round_id": r.round_id, "event_kind": r.report.event_kind, "scan_id": r.report.scan_id,
                    "granted_iters": r.report.granted_iters, "used_iters": r.report.used_iters,
                    "teacher_median_pos_err_m": _json_num(r.report.teacher_median_pos_err_m),
                    "teacher_median_rot_err_deg": _json_num(r.report.teacher_median_rot_err_deg),
                    "metrics": m.to_dict()}
                   for r, m in zip(art.results, art.round_metrics)],
        "total_granted_iters": art.total_granted(),
        "total_used_iters": art.total_used(),
    }


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def write_run(art: RunArtifacts, run_dir, checkpoints: bool = True) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(run_dir / "rounds.csv", RoundReport.CSV_COLUMNS,
               [[getattr(r.report, c) for c in RoundReport.CSV_COLUMNS] for r in art.results])
    stat_cols = ("median_pos_m", "mean_pos_m", "median_rot_deg", "mean_rot_deg", "n_frames")
    rows = []
    for r, m in zip(art.results, art.round_metrics):
        for s in m.scans:
            rows.append([r.round_id, s.scan_id, s.scene_id, s.group, *(getattr(s.stats, c) for c in stat_cols)])
        for g, st in m.groups.items():
            rows.append([r.round_id, "*", "*", g, *(getattr(st, c) for c in stat_cols)])
    _write_csv(run_dir / "round_metrics.csv", ("round_id", "scan_id", "scene_id", "group", *stat_cols), rows)
    _write_csv(run_dir / "per_frame_errors.csv", ("scan_id", "frame_index", "group", "pos_err_m", "rot_err_deg"),
               art.final.frames)
    with open(run_dir / "summary.json", "w") as f:
        json.dump(run_summary(art), f, indent=1, sort_keys=True)
    with open(run_dir / "labels.json", "w") as f:
        json.dump({k: v.to_dict() for k, v in sorted(art.label_cache.items())}, f)
    if checkpoints:
        ck = run_dir / "checkpoints"
        ck.mkdir(exist_ok=True)
        for r in art.results:
            models = r.model if isinstance(r.model, dict) else {"": r.model}
            payload = {k: model_to_dict(v) for k, v in models.items()}
            with open(ck / f"round_{r.round_id}.json", "w") as f:
                json.dump(payload if isinstance(r.model, dict) else payload[""], f)
    return run_dir


def _run_job(args):
    benchmark, label, strategy, train, seed, out, checkpoints = args
    art = execute_run(benchmark, label, strategy, train, seed)
    if out is not None:
        write_run(art, Path(out) / safe_dirname(label), checkpoints)
    return art


def run_experiment(config: ExperimentConfig, out_dir=None, benchmark: Benchmark | None = None,
                   initial_cache: dict | None = None) -> dict:
    """Execute every run of ``config``; returns ``{run_label: RunArtifacts}``.

    With ``out_dir`` (or ``config.output_dir`` when ``out_dir`` is ``True``)
    every run is written under its own directory, plus ``experiment.json``.
    """
    if out_dir is True:
        out_dir = config.output_dir
    benchmark = benchmark if benchmark is not None else build_benchmark(config.benchmark)
    runs = expand_runs(config, benchmark)
    jobs = [(benchmark, label, s, tc, config.seed, out_dir, config.checkpoints) for label, s, tc in runs]
    if config.parallel > 1:
        with ProcessPoolExecutor(max_workers=config.parallel) as ex:
            arts = list(ex.map(_run_job, jobs))
    else:
        cache = initial_cache if initial_cache is not None else {}
        arts = []
        for benchmark_, label, s, tc, seed, out, ck in jobs:
            log.info("run %s", label)
            art = execute_run(benchmark_, label, s, tc, seed, cache)
            if out is not None:
                write_run(art, Path(out) / safe_dirname(label), ck)
            arts.append(art)
    result = {a.label: a for a in arts}
    if out_dir is not None:
        with open(Path(out_dir) / "experiment.json", "w") as f:
            json.dump({"runs": [{"run_label": a.label, "dir": safe_dirname(a.label)} for a in arts],
                       "sweep_axis": config.sweep_axis}, f, indent=1)
    return result


# ---------------------------------------------------------------------------
# teacher comparison

def teacher_errors(art: RunArtifacts, benchmark: Benchmark) -> ErrorStats:
    """Teacher error pooled over every labeled frame of the inference scans."""
    scans = {s.scan_id: s for s in benchmark.all_scans if s.role == "inference"}
    pos, rot = [], []
    for sid, labels in sorted(art.label_cache.items()):
        if sid in scans:
            p, r = labels.errors(scans[sid])
            pos.append(p)
            rot.append(r)
    if not pos:
        return ErrorStats.of([], [])
    return ErrorStats.of(np.concatenate(pos), np.concatenate(rot))


def teacher_sweep(config: ExperimentConfig, out_dir=None, benchmark=None, initial_cache=None) -> list:
    """ConDo once per teacher; rows of held-out metrics plus each teacher's own error."""
    values = config.sweep_values if config.sweep_axis == "teacher" and config.sweep_values else SWEEP_DEFAULTS["teacher"]
    if not values:
        raise ConfigError("teacher sweep needs at least one teacher")
    cfg = replace(config, sweep_axis="teacher", sweep_values=values)
    benchmark = benchmark if benchmark is not None else build_benchmark(cfg.benchmark)
    arts = run_experiment(cfg, out_dir, benchmark, initial_cache)
    rows = []
    for label, art in arts.items():
        te = teacher_errors(art, benchmark) if label != "train_only" else None
        tr, inf = art.final.group("train"), art.final.group("inference")
        rows.append({
            "run_label": label,
            "train_median_pos_m": tr.median_pos_m, "train_mean_pos_m": tr.mean_pos_m,
            "inference_median_pos_m": inf.median_pos_m, "inference_mean_pos_m": inf.mean_pos_m,
            "inference_median_rot_deg": inf.median_rot_deg, "inference_mean_rot_deg": inf.mean_rot_deg,
            "teacher_median_pos_m": te.median_pos_m if te else float("nan"),
            "teacher_mean_pos_m": te.mean_pos_m if te else float("nan"),
            "teacher_median_rot_deg": te.median_rot_deg if te else float("nan"),
            "teacher_mean_rot_deg": te.mean_rot_deg if te else float("nan"),
        })
    if out_dir is not None:
        _write_csv(Path(out_dir) / "teacher_table.csv", list(rows[0]), [list(r.values()) for r in rows])
    return rows


# ---------------------------------------------------------------------------
# reports

SCAN_COLUMNS = ("run_label", "scan_id", "scene_id", "group", "median_pos_m", "mean_pos_m",
                "median_rot_deg", "mean_rot_deg", "n_frames")
SUMMARY_COLUMNS = ("run_label", "group", "median_pos_m", "mean_pos_m", "median_rot_deg", "mean_rot_deg", "n_frames")


def _run_dirs(path: Path) -> list:
    path = Path(path)
    if (path / "summary.json").exists():
        return [path]
    dirs = sorted(p.parent for p in path.glob("*/summary.json"))
    if not dirs:
        raise FileNotFoundError(f"no run artifacts under {path}")
    return dirs


def collect_reports(path) -> list:
    """``(run_label, MetricsReport)`` for every run under ``path``."""
    out = []
    for d in _run_dirs(path):
        with open(d / "summary.json") as f:
            s = json.load(f)
        out.append((s["run_label"], MetricsReport.from_dict(s["final"])))
    return out


def emit_report(path, format: str = "csv") -> list:
    """Write the per-scan table and the strategy × group summary; returns the written files."""
    if format not in ("csv", "json"):
        raise ValueError(f"unknown report format {format!r}")
    reports = collect_reports(path)
    scan_rows, summary_rows = [], []
    for label, rep in reports:
        for s in rep.scans:
            st = s.stats
            scan_rows.append([label, s.scan_id, s.scene_id, s.group, st.median_pos_m, st.mean_pos_m,
                              st.median_rot_deg, st.mean_rot_deg, st.n_frames])
        for g in sorted(rep.groups):
            st = rep.groups[g]
            summary_rows.append([label, g, st.median_pos_m, st.mean_pos_m, st.median_rot_deg, st.mean_rot_deg,
                                 st.n_frames])
    path = Path(path)
    if format == "csv":
        a, b = path / "report_scans.csv", path / "report_summary.csv"
        _write_csv(a, SCAN_COLUMNS, scan_rows)
        _write_csv(b, SUMMARY_COLUMNS, summary_rows)
        return [a, b]
    out = path / "report.json"
    with open(out, "w") as f:
        json.dump({"runs": [{"run_label": label, "metrics": rep.to_dict()} for label, rep in reports]},
                  f, indent=1, sort_keys=True)
    return [out]


def load_report_json(path) -> dict:
    with open(path) as f:
        d = json.load(f)
    return {r["run_label"]: MetricsReport.from_dict(r["metrics"]) for r in d["runs"]}


def default_parallelism() -> int:
    return max(1, (os.cpu_count() or 1))
