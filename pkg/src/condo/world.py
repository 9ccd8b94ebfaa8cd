"""Synthetic scenes, observations and scans with controllable domain shift.

An observation is a vector of random sinusoidal features of the camera pose
and a scalar scene condition ``c`` (0 is the training condition). Only the
first ``ceil(D * condition_sensitive_fraction)`` features see ``c``; the rest
are condition-invariant and stand in for robust, scene-agnostic descriptors.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import InfeasibleSplit, InvalidParams
from .geometry import Pose, quat_from_axis_angle, quat_multiply, quat_normalize, quat_slerp

log = logging.getLogger(__name__)

INPUT_DIM = 8  # 3 position + 4 quaternion + 1 condition


@dataclass(frozen=True)
class SceneParams:
    feature_dim: int = 128
    workspace_min: tuple = (-20.0, -20.0, 0.0)
    workspace_max: tuple = (20.0, 20.0, 4.0)
    condition_sensitive_fraction: float = 0.5
    obs_noise_sigma: float = 0.01
    # std of projection weights on scaled position / quaternion / condition inputs
    position_scale: float = 3.0
    orientation_scale: float = 1.0
    condition_scale: float = 3.0


@dataclass(eq=False)
class SceneSpec:
    scene_id: str
    seed: int
    params: SceneParams
    projection: np.ndarray  # (D, 8)
    bias: np.ndarray  # (D,)

    @property
    def feature_dim(self) -> int:
        return self.params.feature_dim

    @property
    def obs_noise_sigma(self) -> float:
        return self.params.obs_noise_sigma

    @property
    def workspace(self):
        return np.asarray(self.params.workspace_min), np.asarray(self.params.workspace_max)

    @property
    def n_condition_sensitive(self) -> int:
        return math.ceil(self.params.feature_dim * self.params.condition_sensitive_fraction)

    @property
    def invariant_dims(self) -> np.ndarray:
        return np.arange(self.n_condition_sensitive, self.feature_dim)


def make_scene(scene_id: str, seed: int, params: SceneParams | None = None) -> SceneSpec:
    params = params or SceneParams()
    lo = np.asarray(params.workspace_min, dtype=np.float64)
    hi = np.asarray(params.workspace_max, dtype=np.float64)
    if params.feature_dim < INPUT_DIM:
        raise InvalidParams(f"feature_dim must be >= {INPUT_DIM}")
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise InvalidParams("workspace must be a non-degenerate 3D box")
    if not 0.0 <= params.condition_sensitive_fraction <= 1.0:
        raise InvalidParams("condition_sensitive_fraction must lie in [0, 1]")
    if params.obs_noise_sigma < 0:
        raise InvalidParams("obs_noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    D = params.feature_dim
    scales = np.array([params.position_scale] * 3 + [params.orientation_scale] * 4 + [params.condition_scale])
    projection = rng.standard_normal((D, INPUT_DIM)) * scales
    bias = rng.uniform(-np.pi, np.pi, size=D)
    n_sens = math.ceil(D * params.condition_sensitive_fraction)
    projection[n_sens:, 7] = 0.0
    return SceneSpec(scene_id, int(seed), params, projection, bias)


def _render_inputs(scene: SceneSpec, positions, orientations, c):
    lo, hi = scene.workspace
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    orientations = np.atleast_2d(np.asarray(orientations, dtype=np.float64))
    scaled = 2.0 * (positions - lo) / (hi - lo) - 1.0
    if np.any(np.abs(scaled) > 1.0):
        log.warning("scene %s: %d poses rendered outside the workspace", scene.scene_id,
                    int(np.any(np.abs(scaled) > 1.0, axis=1).sum()))
    cond = np.full((len(positions), 1), float(c))
    return np.concatenate([scaled, orientations, cond], axis=1)


def render_batch(scene: SceneSpec, positions, orientations, c: float, rng: np.random.Generator | None = None):
    x = _render_inputs(scene, positions, orientations, c)
    features = np.sin(x @ scene.projection.T + scene.bias)
    sigma = scene.params.obs_noise_sigma
    if sigma > 0:
        if rng is None:
            raise InvalidParams("rng required when obs_noise_sigma > 0")
        features = features + rng.standard_normal(features.shape) * sigma
    return features


def render(scene: SceneSpec, pose: Pose, c: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Observation (feature vector) of ``pose`` under condition ``c``."""
    return render_batch(scene, pose.position[None], pose.orientation[None], c, rng)[0]


@dataclass(eq=False)
class Scan:
    scan_id: str
    scene_id: str
    condition: float
    positions: np.ndarray  # (n, 3)
    orientations: np.ndarray  # (n, 4)
    features: np.ndarray  # (n, D)
    holdout_mask: np.ndarray  # (n,) bool
    role: str  # "train" | "inference"

    def __len__(self):
        return len(self.positions)

    def pose(self, i: int) -> Pose:
        return Pose(self.positions[i], self.orientations[i])

    @property
    def frames(self):
        return [(self.pose(i), self.features[i]) for i in range(len(self))]

    def frame_id(self, i: int) -> str:
        return f"{self.scan_id}/{i}"

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.holdout_mask)

    @property
    def holdout_indices(self) -> np.ndarray:
        return np.flatnonzero(self.holdout_mask)


@dataclass(frozen=True)
class TrajectoryParams:
    n_frames: int
    waypoints: np.ndarray  # (k, 3) positions visited in order
    max_step: float
    seed: int
    orientation_waypoints: np.ndarray | None = None  # (k, 4); random if None
    yaw_range_deg: float = 120.0
    tilt_range_deg: float = 10.0


def random_orientation_waypoints(k: int, rng: np.random.Generator, yaw_range_deg=120.0, tilt_range_deg=10.0):
    """Camera-like orientations: yaw in ±yaw_range, small roll/pitch."""
    yaw = np.radians(rng.uniform(-yaw_range_deg, yaw_range_deg, size=k))
    pitch = np.radians(rng.uniform(-tilt_range_deg, tilt_range_deg, size=k))
    roll = np.radians(rng.uniform(-tilt_range_deg, tilt_range_deg, size=k))
    qz = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    qy = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), pitch)
    qx = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), roll)
    q = quat_normalize(quat_multiply(quat_multiply(qz, qy), qx))
    return np.where(q[:, :1] < 0, -q, q)


def generate_scan(scene: SceneSpec, traj: TrajectoryParams, c: float, role: str, scan_id: str) -> Scan:
    waypoints = np.asarray(traj.waypoints, dtype=np.float64)
    if traj.n_frames < 2 or waypoints.ndim != 2 or waypoints.shape[1] != 3 or len(waypoints) < 2:
        raise InvalidParams("need n_frames >= 2 and at least two 3D waypoints")
    if role not in ("train", "inference"):
        raise InvalidParams(f"unknown scan role {role!r}")
    rng = np.random.default_rng(traj.seed)
    if traj.orientation_waypoints is None:
        qw = random_orientation_waypoints(len(waypoints), rng, traj.yaw_range_deg, traj.tilt_range_deg)
    else:
        qw = quat_normalize(traj.orientation_waypoints)
        if qw.shape != (len(waypoints), 4):
            raise InvalidParams("orientation_waypoints must match waypoints")

    seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise InvalidParams("trajectory has zero length")
    step = total / (traj.n_frames - 1)
    if step > traj.max_step:
        raise InvalidParams(f"frame spacing {step:.4g} m exceeds max_step {traj.max_step:.4g} m")

    s = np.linspace(0.0, total, traj.n_frames)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg[idx] > 0, (s - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    positions = waypoints[idx] + frac[:, None] * (waypoints[idx + 1] - waypoints[idx])
    orientations = np.empty((traj.n_frames, 4))
    for j in np.unique(idx):
        sel = idx == j
        orientations[sel] = quat_slerp(qw[j], qw[j + 1], frac[sel])
    orientations = quat_normalize(orientations)

    features = render_batch(scene, positions, orientations, c, rng)
    return Scan(scan_id, scene.scene_id, float(c), positions, orientations, features,
                np.zeros(traj.n_frames, dtype=bool), role)


def split_holdout(scan: Scan, fraction: float = 1 / 8, segment_len: int = 16,
                  rng: np.random.Generator | None = None) -> Scan:
    """Hold out ``round(n * fraction / segment_len)`` contiguous blocks of frames.

    Block starts are drawn uniformly over all non-overlapping arrangements.
    """
    if not 0.0 < fraction < 1.0 or segment_len < 1:
        raise InvalidParams("need 0 < fraction < 1 and segment_len >= 1")
    n = len(scan)
    k = int(round(n * fraction / segment_len))
    if k == 0 or k * segment_len > n:
        raise InfeasibleSplit(f"cannot place {k} blocks of {segment_len} frames in a scan of {n}")
    rng = rng if rng is not None else np.random.default_rng()
    slots = n - k * segment_len + k
    picks = np.sort(rng.choice(slots, size=k, replace=False))
    starts = picks + np.arange(k) * (segment_len - 1)
    mask = np.zeros(n, dtype=bool)
    for s in starts:
        mask[s:s + segment_len] = True
    return replace(scan, holdout_mask=mask)


# ---------------------------------------------------------------------------
# Benchmarks

@dataclass(frozen=True)
class NewInferenceScan:
    scan: Scan
    kind = "inference"


@dataclass(frozen=True)
class NewSceneTraining:
    scene_id: str
    scans: tuple
    kind = "new_scene"


RoundEvent = Union[NewInferenceScan, NewSceneTraining]


@dataclass(eq=False)
class Benchmark:
    scenes: list
    initial_training: list
    events: list
    name: str = ""

    def scene(self, scene_id: str) -> SceneSpec:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)

    @property
    def all_scans(self) -> list:
        scans = list(self.initial_training)
        for ev in self.events:
            scans.extend([ev.scan] if isinstance(ev, NewInferenceScan) else ev.scans)
        return scans

    def validate(self):
        ids = {s.scene_id for s in self.scenes}
        seen = set()
        for scan in self.all_scans:
            if scan.scene_id not in ids:
                raise InvalidParams(f"scan {scan.scan_id} references unknown scene {scan.scene_id}")
            if scan.scan_id in seen:
                raise InvalidParams(f"scan {scan.scan_id} appears twice")
            seen.add(scan.scan_id)


@dataclass
class BenchmarkConfig:
    preset: str = "condition_shift"
    seed: int = 0
    n_frames: int = 1024
    n_train_scans: int = 3
    inference_conditions: tuple = (0.4, 0.8, 1.0)
    n_inference_scans: int = 3  # novel_pose / multi_scene, per scene
    n_scenes: int = 3  # multi_scene
    n_initial_scenes: int = 2  # multi_scene
    holdout_fraction: float = 1 / 8
    segment_len: int = 16
    max_step: float = 0.25
    lateral_jitter: float = 1.5  # per-scan waypoint jitter (m) on shared routes
    scene: dict = field(default_factory=dict)  # SceneParams overrides

    def scene_params(self) -> SceneParams:
        try:
            return replace(SceneParams(), **{k: tuple(v) if isinstance(v, list) else v
                                             for k, v in self.scene.items()})
        except TypeError as exc:
            raise InvalidParams(str(exc)) from exc


PRESETS = ("condition_shift", "novel_pose", "multi_scene")


def _loop_route(params: SceneParams, margin=0.25, n_per_side=4):
    """Closed rectangular route inset from the workspace border."""
    lo = np.asarray(params.workspace_min, dtype=np.float64)
    hi = np.asarray(params.workspace_max, dtype=np.float64)
    span = hi - lo
    a = lo + margin * span
    b = hi - margin * span
    z = 0.5 * (lo[2] + hi[2])
    corners = [(a[0], a[1]), (b[0], a[1]), (b[0], b[1]), (a[0], b[1]), (a[0], a[1])]
    pts = []
    for (x0, y0), (x1, y1) in zip(corners[:-1], corners[1:]):
        for t in np.linspace(0.0, 1.0, n_per_side, endpoint=False):
            pts.append((x0 + t * (x1 - x0), y0 + t * (y1 - y0), z))
    pts.append(pts[0])
    return np.array(pts)


def _region_walk(lo, hi, k, rng, z):
    """Serpentine waypoints covering the box [lo, hi] (xy)."""
    rows = max(2, k // 3)
    ys = np.linspace(lo[1], hi[1], rows)
    pts = []
    for r, y in enumerate(ys):
        xs = (lo[0], hi[0]) if r % 2 == 0 else (hi[0], lo[0])
        for x in np.linspace(xs[0], xs[1], 3):
            pts.append((x, y, z))
    pts = np.array(pts)
    jitter = rng.uniform(-0.05, 0.05, size=pts.shape) * np.array([hi[0] - lo[0], hi[1] - lo[1], 0.0])
    return np.clip(pts + jitter, np.array([lo[0], lo[1], z]), np.array([hi[0], hi[1], z]))


def _fit_frames(waypoints, n_frames, max_step):
    length = np.linalg.norm(np.diff(waypoints, axis=0), axis=1).sum()
    if length / (n_frames - 1) > max_step:
        raise InvalidParams(
            f"route of {length:.1f} m needs more than {n_frames} frames at max_step {max_step} m")


def _shared_route_scans(scene, cfg, rng, conditions, role, prefix):
    params = scene.params
    route = _loop_route(params)
    base_q = random_orientation_waypoints(len(route), np.random.default_rng(scene.seed + 1))
    base_q[-1] = base_q[0]
    _fit_frames(route, cfg.n_frames, cfg.max_step)
    scans = []
    for j, c in enumerate(conditions):
        seed = int(rng.integers(2**63))
        srng = np.random.default_rng(seed)
        jitter = srng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter, size=route.shape) * np.array([1, 1, 0.2])
        jitter[-1] = jitter[0]
        wps = route + jitter
        # keep the route length within max_step budget after jitter
        length = np.linalg.norm(np.diff(wps, axis=0), axis=1).sum()
        if length / (cfg.n_frames - 1) > cfg.max_step:
            wps = route
        tilt = quat_from_axis_angle(srng.standard_normal((len(route), 3)),
                                    np.radians(srng.uniform(0.0, 3.0, size=len(route))))
        qw = quat_normalize(quat_multiply(tilt, base_q))
        qw[-1] = qw[0]
        traj = TrajectoryParams(cfg.n_frames, wps, cfg.max_step, seed, orientation_waypoints=qw)
        scan = generate_scan(scene, traj, c, role, f"{prefix}{j + 1}")
        scans.append(split_holdout(scan, cfg.holdout_fraction, cfg.segment_len, srng))
    return scans


def _region_scans(scene, cfg, rng, regions, role, prefix, c=0.0):
    lo, hi = scene.workspace
    z = 0.5 * (lo[2] + hi[2])
    scans = []
    for j, (rlo, rhi) in enumerate(regions):
        seed = int(rng.integers(2**63))
        srng = np.random.default_rng(seed)
        wps = _region_walk(rlo, rhi, 9, srng, z)
        _fit_frames(wps, cfg.n_frames, cfg.max_step)
        traj = TrajectoryParams(cfg.n_frames, wps, cfg.max_step, seed)
        scan = generate_scan(scene, traj, c, role, f"{prefix}{j + 1}")
        scans.append(split_holdout(scan, cfg.holdout_fraction, cfg.segment_len, srng))
    return scans


def _novel_pose_regions(scene, n_train, n_inf):
    """Disjoint xy boxes tiling the inner workspace in a row; train boxes first."""
    lo, hi = scene.workspace
    inner_lo = lo + 0.1 * (hi - lo)
    inner_hi = hi - 0.1 * (hi - lo)
    n = n_train + n_inf
    edges = np.linspace(inner_lo[0], inner_hi[0], n + 1)
    gap = 0.02 * (hi[0] - lo[0])
    boxes = [(np.array([edges[i] + gap, inner_lo[1]]), np.array([edges[i + 1] - gap, inner_hi[1]]))
             for i in range(n)]
    # interleave so inference regions neighbour the training ones
    order = list(range(0, n, 2)) + list(range(1, n, 2))
    boxes = [boxes[i] for i in order]
    return boxes[:n_train], boxes[n_train:]


def build_benchmark(config: BenchmarkConfig | None = None) -> Benchmark:
    cfg = config or BenchmarkConfig()
    if cfg.preset not in PRESETS:
        raise InvalidParams(f"unknown preset {cfg.preset!r}; expected one of {PRESETS}")
    if cfg.n_frames < cfg.segment_len:
        raise InvalidParams("n_frames must be >= segment_len")
    rng = np.random.default_rng(cfg.seed)
    params = cfg.scene_params()

    if cfg.preset == "condition_shift":
        scene = make_scene("scene0", int(rng.integers(2**63)), params)
        train = _shared_route_scans(scene, cfg, rng, [0.0] * cfg.n_train_scans, "train", "train")
        inf = _shared_route_scans(scene, cfg, rng, list(cfg.inference_conditions), "inference", "infer")
        bm = Benchmark([scene], train, [NewInferenceScan(s) for s in inf], name=cfg.preset)
    elif cfg.preset == "novel_pose":
        scene = make_scene("scene0", int(rng.integers(2**63)), params)
        tr_boxes, inf_boxes = _novel_pose_regions(scene, cfg.n_train_scans, cfg.n_inference_scans)
        train = _region_scans(scene, cfg, rng, tr_boxes, "train", "train")
        inf = _region_scans(scene, cfg, rng, inf_boxes, "inference", "infer")
        bm = Benchmark([scene], train, [NewInferenceScan(s) for s in inf], name=cfg.preset)
    else:
        if not 1 <= cfg.n_initial_scenes <= cfg.n_scenes:
            raise InvalidParams("need 1 <= n_initial_scenes <= n_scenes")
        scenes, initial, events = [], [], []
        per_scene = []
        for k in range(cfg.n_scenes):
            scene = make_scene(f"scene{k}", int(rng.integers(2**63)), params)
            tr_boxes, inf_boxes = _novel_pose_regions(scene, cfg.n_train_scans, cfg.n_inference_scans)
            train = _region_scans(scene, cfg, rng, tr_boxes, "train", f"{scene.scene_id}-train")
            inf = _region_scans(scene, cfg, rng, inf_boxes, "inference", f"{scene.scene_id}-infer")
            scenes.append(scene)
            per_scene.append((scene, train, inf))
        for scene, train, inf in per_scene[:cfg.n_initial_scenes]:
            initial.extend(train)
        # old-scene inference scans first, then each new scene's training and inference in turn
        for scene, train, inf in per_scene[:cfg.n_initial_scenes]:
            events.extend(NewInferenceScan(s) for s in inf)
        for scene, train, inf in per_scene[cfg.n_initial_scenes:]:
            events.append(NewSceneTraining(scene.scene_id, tuple(train)))
            events.extend(NewInferenceScan(s) for s in inf)
        bm = Benchmark(scenes, initial, events, name=cfg.preset)
    bm.validate()
    return bm


# ---------------------------------------------------------------------------
# JSON round trip (float repr is the shortest exact decimal, so f64 survives)

def _scan_to_dict(s: Scan) -> dict:
    return {
        "scan_id": s.scan_id, "scene_id": s.scene_id, "condition": s.condition, "role": s.role,
        "positions": s.positions.tolist(), "orientations": s.orientations.tolist(),
        "features": s.features.tolist(), "holdout_mask": s.holdout_mask.astype(int).tolist(),
    }


def _scan_from_dict(d: dict) -> Scan:
    return Scan(d["scan_id"], d["scene_id"], float(d["condition"]),
                np.array(d["positions"], dtype=np.float64), np.array(d["orientations"], dtype=np.float64),
                np.array(d["features"], dtype=np.float64), np.array(d["holdout_mask"], dtype=bool), d["role"])


def benchmark_to_dict(bm: Benchmark) -> dict:
    scenes = []
    for s in bm.scenes:
        p = s.params
        scenes.append({
            "scene_id": s.scene_id, "seed": s.seed,
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in p.__dict__.items()},
            "projection": s.projection.tolist(), "bias": s.bias.tolist(),
        })
    events = []
    for ev in bm.events:
        if isinstance(ev, NewInferenceScan):
            events.append({"kind": "inference", "scan_ids": [ev.scan.scan_id]})
        else:
            events.append({"kind": "new_scene", "scene_id": ev.scene_id,
                           "scan_ids": [s.scan_id for s in ev.scans]})
    return {
        "name": bm.name,
        "scenes": scenes,
        "scans": [_scan_to_dict(s) for s in bm.all_scans],
        "initial_training": [s.scan_id for s in bm.initial_training],
        "events": events,
    }


def benchmark_from_dict(d: dict) -> Benchmark:
    scenes = []
    for s in d["scenes"]:
        params = SceneParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in s["params"].items()})
        scenes.append(SceneSpec(s["scene_id"], int(s["seed"]), params,
                                np.array(s["projection"], dtype=np.float64), np.array(s["bias"], dtype=np.float64)))
    scans = {s["scan_id"]: _scan_from_dict(s) for s in d["scans"]}
    events = []
    for ev in d["events"]:
        if ev["kind"] == "inference":
            events.append(NewInferenceScan(scans[ev["scan_ids"][0]]))
        else:
            events.append(NewSceneTraining(ev["scene_id"], tuple(scans[i] for i in ev["scan_ids"])))
    bm = Benchmark(scenes, [scans[i] for i in d["initial_training"]], events, name=d.get("name", ""))
    bm.validate()
    return bm


def save_benchmark(bm: Benchmark, path) -> None:
    with open(path, "w") as f:
        json.dump(benchmark_to_dict(bm), f)


def load_benchmark(path) -> Benchmark:
    with open(path) as f:
        return benchmark_from_dict(json.load(f))
