"""Continual domain expansion: replay, budgets, update rounds and strategies.

A run starts from a model trained on the labeled scans, then processes the
benchmark's events in order. Every round gets an iteration grant proportional
to the number of newly revealed images, and each iteration trains on a batch
drawn uniformly from the labeled set plus the replay buffer.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import BudgetExceeded, EmptyDataset, InvalidParams
from .geometry import Pose
from .model import DISTILLED, SUPERVISED, AdamState, AprModel, TrainBatch, add_head, batch_step, init_model
from .teachers import OdometryTeacher, OracleTeacher, RetrievalTeacher, ScanLabels, label_scan
from .world import Benchmark, NewInferenceScan, NewSceneTraining, Scan

UNLIMITED = None


def derive_rng(master_seed: int, *labels) -> np.random.Generator:
    """Independent counter-based stream keyed by ``(master_seed, labels...)``."""
    digest = hashlib.sha256(repr((int(master_seed),) + tuple(str(x) for x in labels)).encode()).digest()
    key = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def derive_seed(master_seed: int, *labels) -> int:
    return int(derive_rng(master_seed, *labels).integers(2**63))


# ---------------------------------------------------------------------------
# budget

def compute_b(epochs: float, iters_per_epoch: float, batch_size: int, initial_set_size: int) -> float:
    """Average number of training iterations per image (times batch size)."""
    if min(epochs, iters_per_epoch, batch_size, initial_set_size) <= 0:
        raise InvalidParams("all budget inputs must be positive")
    return epochs * iters_per_epoch * batch_size / initial_set_size


def round_iterations(n_new_images: int, b: float, batch_size: int) -> int:
    if n_new_images <= 0:
        return 0
    return math.ceil(n_new_images * b / batch_size)


@dataclass
class BudgetLedger:
    b: float
    batch_size: int
    grants: list = field(default_factory=list)  # (round_id, iterations)
    consumed: list = field(default_factory=list)  # (round_id, iterations)

    def __post_init__(self):
        if self.b <= 0 or self.batch_size <= 0:
            raise InvalidParams("b and batch_size must be positive")

    def grant(self, round_id, iterations: int) -> int:
        self.grants.append((round_id, int(iterations)))
        self.consumed.append((round_id, 0))
        return int(iterations)

    def consume(self, round_id, iterations: int = 1) -> None:
        rid, used = self.consumed[-1]
        granted = self.grants[-1][1]
        if rid != round_id or used + iterations > granted:
            raise BudgetExceeded(f"round {round_id}: {used + iterations} iterations exceed grant {granted}")
        self.consumed[-1] = (rid, used + iterations)

    @property
    def total_granted(self) -> int:
        return sum(g for _, g in self.grants)

    @property
    def total_used(self) -> int:
        return sum(u for _, u in self.consumed)


# ---------------------------------------------------------------------------
# replay

class Item(NamedTuple):
    scene_id: str
    features: np.ndarray
    target: Pose
    source: str
    frame_id: str


@dataclass
class ReplayBuffer:
    capacity: int | None = UNLIMITED
    items: list = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity is not None and self.capacity <= 0:
            raise InvalidParams("buffer capacity must be positive or unlimited")

    def __len__(self):
        return len(self.items)


def reservoir_insert(buffer: ReplayBuffer, item, rng: np.random.Generator) -> ReplayBuffer:
    """Reservoir sampling: the i-th item replaces slot alpha if alpha <= N, alpha ~ U[1, i]."""
    buffer.seen_count += 1
    i = buffer.seen_count
    if buffer.capacity is None or len(buffer.items) < buffer.capacity:
        buffer.items.append(item)
    else:
        alpha = int(rng.integers(1, i + 1))
        if alpha <= buffer.capacity:
            buffer.items[alpha - 1] = item
    return buffer


def sample_batch(labeled: list, pool: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> TrainBatch:
    """Uniform draw with replacement from the labeled set and the buffer together."""
    n_l, n_p = len(labeled), len(pool.items)
    if n_l + n_p == 0:
        raise EmptyDataset("nothing to sample from")
    idx = rng.integers(0, n_l + n_p, size=batch_size)
    items = [labeled[j] if j < n_l else pool.items[j - n_l] for j in idx]
    return TrainBatch.from_items(items)


def gt_items(scan: Scan) -> list:
    return [Item(scan.scene_id, scan.features[i], scan.pose(i), SUPERVISED, scan.frame_id(i))
            for i in scan.train_indices]


def distilled_items(scan: Scan, labels: ScanLabels) -> list:
    return [Item(scan.scene_id, scan.features[i], Pose(p, q), DISTILLED, scan.frame_id(i))
            for i, p, q in zip(labels.frame_indices, labels.positions, labels.orientations)]


# ---------------------------------------------------------------------------
# teachers and strategies

@dataclass(frozen=True)
class TeacherSpec:
    """Serializable description of a teacher, built per scene on demand."""
    kind: str = "oracle"  # oracle | gt | retrieval | odometry
    sigma_t: float = 0.02
    sigma_r: float = 0.5
    use_invariant_dims_only: bool = True

    @property
    def label(self) -> str:
        if self.kind == "oracle":
            return f"oracle({self.sigma_t:g}m/{self.sigma_r:g}deg)"
        if self.kind == "odometry":
            return f"odometry({self.sigma_t:g}m/{self.sigma_r:g}deg)"
        if self.kind == "retrieval" and not self.use_invariant_dims_only:
            return "retrieval(all-dims)"
        return self.kind


def build_teacher(spec: TeacherSpec, benchmark: Benchmark, scene_id: str):
    if spec.kind == "gt":
        return OracleTeacher(0.0, 0.0, kind="gt")
    if spec.kind == "oracle":
        return OracleTeacher(spec.sigma_t, spec.sigma_r)
    if spec.kind == "odometry":
        return OdometryTeacher(spec.sigma_t, spec.sigma_r)
    if spec.kind == "retrieval":
        refs = [s for s in benchmark.all_scans if s.scene_id == scene_id and s.role == "train"]
        return RetrievalTeacher.from_scans(benchmark.scene(scene_id), refs, spec.use_invariant_dims_only)
    raise InvalidParams(f"unknown teacher kind {spec.kind!r}")


@dataclass(frozen=True)
class TrainOnly:
    name = "train_only"


@dataclass(frozen=True)
class ConDo:
    teacher: TeacherSpec = TeacherSpec()
    budget_rate: float = 1.0
    name = "condo"


@dataclass(frozen=True)
class RetrainGT:
    budget_rate: float | None = UNLIMITED  # None: converge on all revealed data
    name = "retrain_gt"


@dataclass(frozen=True)
class RetrainTeacher:
    teacher: TeacherSpec = TeacherSpec()
    budget_rate: float | None = UNLIMITED
    name = "retrain_teacher"


@dataclass(frozen=True)
class StandAlonePerScene:
    inner: object = ConDo()
    name = "standalone"


def _check_rate(rate):
    if rate is not None and not rate > 0:
        raise InvalidParams("budget_rate must be positive (or unlimited)")


@dataclass(frozen=True)
class TrainConfig:
    b: float = 300.0
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden_dims: tuple = (256, 256)
    feat_dim: int = 128
    s_t_init: float = 0.0
    s_r_init: float = -3.0
    buffer_capacity: int | None = UNLIMITED
    reservoir_includes_labeled: bool = False
    audit: bool = False


@dataclass
class RoundReport:
    round_id: int
    event_kind: str
    scan_id: str
    granted_iters: int
    used_iters: int
    teacher_median_pos_err_m: float = float("nan")
    teacher_median_rot_err_deg: float = float("nan")
    wallclock_s: float = 0.0
    mean_loss: float = float("nan")

    CSV_COLUMNS = ("round_id", "event_kind", "scan_id", "granted_iters", "used_iters",
                   "teacher_median_pos_err_m", "teacher_median_rot_err_deg", "wallclock_s")


@dataclass
class RunState:
    model: AprModel
    adam: AdamState
    buffer: ReplayBuffer
    labeled: list
    ledger: BudgetLedger
    label_cache: dict = field(default_factory=dict)  # scan_id -> ScanLabels
    trained_frame_ids: set | None = None


@dataclass
class RoundResult:
    round_id: int
    model: object  # AprModel, or {scene_id: AprModel} for per-scene runs
    report: RoundReport


def _scaling(benchmark: Benchmark, scene_id: str):
    lo, hi = benchmark.scene(scene_id).workspace
    return 0.5 * (lo + hi), 0.5 * (hi - lo)


def _new_model(benchmark, scene_ids, cfg: TrainConfig, seed: int) -> AprModel:
    D = benchmark.scenes[0].feature_dim
    return init_model(D, cfg.hidden_dims, cfg.feat_dim, list(scene_ids), seed,
                      s_t=cfg.s_t_init, s_r=cfg.s_r_init,
                      head_scaling={s: _scaling(benchmark, s) for s in scene_ids})


def _adam(cfg: TrainConfig) -> AdamState:
    return AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def train_iterations(state: RunState, round_id, n_iters: int, cfg: TrainConfig, rng) -> float:
    """Spend exactly ``n_iters`` granted iterations; returns the last mean loss."""
    state.ledger.grant(round_id, n_iters)
    loss = float("nan")
    for _ in range(n_iters):
        batch = sample_batch(state.labeled, state.buffer, cfg.batch_size, rng)
        if state.trained_frame_ids is not None:
            state.trained_frame_ids.update(batch.frame_ids.tolist())
        loss = batch_step(state.model, batch, state.adam)
        state.ledger.consume(round_id)
    return loss


def _unique_scenes(scans):
    out = []
    for s in scans:
        if s.scene_id not in out:
            out.append(s.scene_id)
    return out


def initial_state(benchmark: Benchmark, scans: list, cfg: TrainConfig, seed: int, tag="initial") -> RunState:
    """Model trained from scratch on the GT frames of ``scans`` for ceil(|S| b / batch) iterations."""
    scene_ids = _unique_scenes(scans)
    model = _new_model(benchmark, scene_ids, cfg, derive_seed(seed, tag, "init"))
    state = RunState(model, _adam(cfg), ReplayBuffer(cfg.buffer_capacity), [],
                     BudgetLedger(cfg.b, cfg.batch_size),
                     trained_frame_ids=set() if cfg.audit else None)
    rng = derive_rng(seed, tag, "train")
    for scan in scans:
        _add_labeled(state, gt_items(scan), cfg, rng)
    n = len(state.labeled) + len(state.buffer)
    train_iterations(state, 0, round_iterations(n, cfg.b, cfg.batch_size), cfg, rng)
    return state


def _add_labeled(state: RunState, items, cfg: TrainConfig, rng):
    if cfg.reservoir_includes_labeled:
        for it in items:
            reservoir_insert(state.buffer, it, rng)
    else:
        state.labeled.extend(items)


def _teacher_report(labels: ScanLabels, scan: Scan):
    if len(labels) == 0:
        return float("nan"), float("nan")
    ep, er = labels.errors(scan)
    return float(np.median(ep)), float(np.median(er))


def get_labels(state: RunState, scan: Scan, teacher_spec: TeacherSpec, benchmark: Benchmark, seed: int) -> ScanLabels:
    """Teacher labels for ``scan``, computed once and cached on the state."""
    if scan.scan_id not in state.label_cache:
        teacher = build_teacher(teacher_spec, benchmark, scan.scene_id)
        rng = derive_rng(seed, "teacher", teacher_spec.label, scan.scan_id)
        state.label_cache[scan.scan_id] = label_scan(teacher, scan, rng)
    return state.label_cache[scan.scan_id]


def run_round(state: RunState, round_id: int, event, teacher_spec: TeacherSpec, benchmark: Benchmark,
              cfg: TrainConfig, seed: int, budget_rate: float = 1.0) -> RoundReport:
    """Process one event in place and train for the round's grant."""
    t0 = time.perf_counter()
    rng = derive_rng(seed, "round", round_id)
    b = cfg.b * budget_rate
    if isinstance(event, NewInferenceScan):
        scan = event.scan
        labels = get_labels(state, scan, teacher_spec, benchmark, seed)
        items = distilled_items(scan, labels)
        for it in items:
            reservoir_insert(state.buffer, it, rng)
        tp, tr = _teacher_report(labels, scan)
        kind, scan_id = "inference", scan.scan_id
    elif isinstance(event, NewSceneTraining):
        if event.scene_id not in state.model.head_ids:
            add_head(state.model, event.scene_id, derive_seed(seed, "head", event.scene_id),
                     scaling=_scaling(benchmark, event.scene_id))
        items = [it for scan in event.scans for it in gt_items(scan)]
        _add_labeled(state, items, cfg, rng)
        tp = tr = float("nan")
        kind, scan_id = "new_scene", "+".join(s.scan_id for s in event.scans)
    else:
        raise InvalidParams(f"unknown event {event!r}")
    granted = round_iterations(len(items), b, cfg.batch_size)
    loss = train_iterations(state, round_id, granted, cfg, rng)
    used = state.ledger.consumed[-1][1]
    if used != granted:
        raise BudgetExceeded(f"round {round_id}: used {used} of {granted}")
    return RoundReport(round_id, kind, scan_id, granted, used, tp, tr, time.perf_counter() - t0, loss)


def _initial_report(state: RunState, scans) -> RoundReport:
    g = state.ledger.grants[-1][1]
    return RoundReport(0, "initial", "+".join(s.scan_id for s in scans), g, state.ledger.consumed[-1][1])


def _event_scans(event):
    return [event.scan] if isinstance(event, NewInferenceScan) else list(event.scans)


def run_strategy(benchmark: Benchmark, strategy, cfg: TrainConfig, seed: int,
                 initial_cache: dict | None = None, state_out: list | None = None) -> list:
    """Run ``strategy`` on ``benchmark``; returns one :class:`RoundResult` per round.

    Round 0 is the model after initial training. ``initial_cache`` lets runs
    sharing (benchmark, cfg, seed) reuse the identical initial model.
    ``state_out`` receives the final :class:`RunState` objects (for audits).
    """
    if isinstance(strategy, StandAlonePerScene):
        return _run_standalone(benchmark, strategy, cfg, seed, initial_cache, state_out)

    def start(scans, tag):
        # the buffer starts empty unless labeled data goes through the reservoir
        base = cfg if cfg.reservoir_includes_labeled else replace(cfg, buffer_capacity=UNLIMITED)
        key = (id(benchmark), tag, base, seed, tuple(s.scan_id for s in scans))
        if initial_cache is not None and key in initial_cache:
            st = initial_cache[key]
        else:
            st = initial_state(benchmark, scans, base, seed, tag)
            if initial_cache is not None:
                initial_cache[key] = st
        st = _copy_state(st)
        st.buffer.capacity = cfg.buffer_capacity
        return st

    if isinstance(strategy, TrainOnly):
        # every labeled scan (including later scenes' training scans) up front
        labeled = list(benchmark.initial_training)
        for ev in benchmark.events:
            if isinstance(ev, NewSceneTraining):
                labeled.extend(ev.scans)
        state = start(labeled, "initial-all" if len(labeled) > len(benchmark.initial_training) else "initial")
        if state_out is not None:
            state_out.append(state)
        return [RoundResult(0, state.model.copy(), _initial_report(state, labeled))]

    state = start(benchmark.initial_training, "initial")
    results = [RoundResult(0, state.model.copy(), _initial_report(state, benchmark.initial_training))]

    if isinstance(strategy, ConDo):
        _check_rate(strategy.budget_rate)
        for k, ev in enumerate(benchmark.events, start=1):
            rep = run_round(state, k, ev, strategy.teacher, benchmark, cfg, seed, strategy.budget_rate)
            results.append(RoundResult(k, state.model.copy(), rep))
        if state_out is not None:
            state_out.append(state)
        return results

    if isinstance(strategy, (RetrainGT, RetrainTeacher)):
        _check_rate(strategy.budget_rate)
        teacher_spec = strategy.teacher if isinstance(strategy, RetrainTeacher) else None
        revealed_train = list(benchmark.initial_training)
        revealed_inf = []
        label_cache = {}
        for k, ev in enumerate(benchmark.events, start=1):
            t0 = time.perf_counter()
            new = _event_scans(ev)
            if isinstance(ev, NewInferenceScan):
                revealed_inf.extend(new)
            else:
                revealed_train.extend(new)
            n_new = sum(len(s.train_indices) for s in new)
            scenes = _unique_scenes(revealed_train + revealed_inf)
            model = _new_model(benchmark, scenes, cfg, derive_seed(seed, strategy.name, k, "init"))
            st = RunState(model, _adam(cfg), ReplayBuffer(UNLIMITED), [], state.ledger,
                          label_cache, state.trained_frame_ids)
            tp = tr = float("nan")
            for scan in revealed_train:
                st.labeled.extend(gt_items(scan))
            for scan in revealed_inf:
                if teacher_spec is None:
                    st.labeled.extend(gt_items(scan))
                else:
                    labels = get_labels(st, scan, teacher_spec, benchmark, seed)
                    st.labeled.extend(distilled_items(scan, labels))
                    if scan is ev_scan(ev):
                        tp, tr = _teacher_report(labels, scan)
            if strategy.budget_rate is None:
                n_iters = round_iterations(len(st.labeled), cfg.b, cfg.batch_size)
            else:
                n_iters = round_iterations(n_new, cfg.b * strategy.budget_rate, cfg.batch_size)
            rng = derive_rng(seed, strategy.name, k, "train")
            loss = train_iterations(st, k, n_iters, cfg, rng)
            rep = RoundReport(k, ev.kind, "+".join(s.scan_id for s in new), n_iters,
                              st.ledger.consumed[-1][1], tp, tr, time.perf_counter() - t0, loss)
            results.append(RoundResult(k, model.copy(), rep))
            state = st
        if state_out is not None:
            state_out.append(state)
        return results

    raise InvalidParams(f"unknown strategy {strategy!r}")


def ev_scan(ev):
    return ev.scan if isinstance(ev, NewInferenceScan) else None


def _copy_state(st: RunState) -> RunState:
    adam = AdamState(st.adam.lr, st.adam.beta1, st.adam.beta2, st.adam.eps, st.adam.step,
                     {k: v.copy() for k, v in st.adam.m.items()},
                     {k: v.copy() for k, v in st.adam.v.items()}, dict(st.adam.counts))
    ledger = BudgetLedger(st.ledger.b, st.ledger.batch_size, list(st.ledger.grants), list(st.ledger.consumed))
    buf = ReplayBuffer(st.buffer.capacity, list(st.buffer.items), st.buffer.seen_count)
    return RunState(st.model.copy(), adam, buf, list(st.labeled), ledger, dict(st.label_cache),
                    None if st.trained_frame_ids is None else set(st.trained_frame_ids))


def scene_benchmark(benchmark: Benchmark, scene_id: str) -> Benchmark:
    """The events of one scene only; a scene revealed later starts from its training scans."""
    initial = [s for s in benchmark.initial_training if s.scene_id == scene_id]
    events = []
    for ev in benchmark.events:
        if isinstance(ev, NewSceneTraining) and ev.scene_id == scene_id:
            initial.extend(ev.scans)
        elif isinstance(ev, NewInferenceScan) and ev.scan.scene_id == scene_id:
            events.append(ev)
    return Benchmark([benchmark.scene(scene_id)], initial, events, name=f"{benchmark.name}:{scene_id}")


def _run_standalone(benchmark, strategy, cfg, seed, initial_cache, state_out) -> list:
    per_scene = {}
    for scene in benchmark.scenes:
        sub = scene_benchmark(benchmark, scene.scene_id)
        if not sub.initial_training:
            continue
        per_scene[scene.scene_id] = run_strategy(sub, strategy.inner, cfg, derive_seed(seed, scene.scene_id),
                                                 initial_cache, state_out)
    # stitch per-scene rounds back into the global event order
    current = {sid: res[0].model for sid, res in per_scene.items()
               if any(s.scene_id == sid for s in benchmark.initial_training)}
    next_round = {sid: 1 for sid in per_scene}
    granted = sum(res[0].report.granted_iters for sid, res in per_scene.items() if sid in current)
    results = [RoundResult(0, dict(current), RoundReport(0, "initial", "", granted, granted))]
    for k, ev in enumerate(benchmark.events, start=1):
        if isinstance(ev, NewSceneTraining):
            res = per_scene[ev.scene_id][0]
            current[ev.scene_id] = res.model
            rep = RoundReport(k, "new_scene", res.report.scan_id, res.report.granted_iters, res.report.used_iters)
        else:
            sid = ev.scan.scene_id
            res = per_scene[sid][next_round[sid]]
            next_round[sid] += 1
            current[sid] = res.model
            r = res.report
            rep = RoundReport(k, r.event_kind, r.scan_id, r.granted_iters, r.used_iters,
                              r.teacher_median_pos_err_m, r.teacher_median_rot_err_deg, r.wallclock_s, r.mean_loss)
        results.append(RoundResult(k, dict(current), rep))
    return results
