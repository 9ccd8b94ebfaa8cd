"""Scene-agnostic teachers that pseudo-label unlabeled scans.

Three analogs of real localization systems are provided:

* :class:`OracleTeacher` - the ground truth plus i.i.d. noise (a structure
  based localizer with small error).
* :class:`RetrievalTeacher` - nearest-neighbour lookup of the observation in a
  labeled reference set, returning the reference pose.
* :class:`OdometryTeacher` - relative poses with per-step noise integrated from
  a known first pose, so the error drifts along the scan.

Only frames outside the held-out mask are ever labeled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams
from .geometry import Pose, compose, orientation_error_deg, perturb_pose, position_error, relative
from .world import Scan


@dataclass(frozen=True)
class OracleTeacher:
    sigma_t: float = 0.0
    sigma_r: float = 0.0
    kind: str = "oracle"

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise InvalidParams("teacher noise must be non-negative")


@dataclass(frozen=True, eq=False)
class RetrievalTeacher:
    ref_features: np.ndarray  # (m, D)
    ref_positions: np.ndarray  # (m, 3)
    ref_orientations: np.ndarray  # (m, 4)
    dims: np.ndarray | None = None  # feature dims used for matching; None = all
    kind: str = "retrieval"

    def __post_init__(self):
        if len(self.ref_features) == 0:
            raise InvalidParams("retrieval teacher needs a non-empty reference set")

    @classmethod
    def from_scans(cls, scene, scans, use_invariant_dims_only: bool = True) -> RetrievalTeacher:
        """Reference map built from the labeled (non-held-out) frames of ``scans``."""
        idx = [s.train_indices for s in scans]
        feats = np.concatenate([s.features[i] for s, i in zip(scans, idx)])
        pos = np.concatenate([s.positions[i] for s, i in zip(scans, idx)])
        ori = np.concatenate([s.orientations[i] for s, i in zip(scans, idx)])
        dims = scene.invariant_dims if use_invariant_dims_only else None
        return cls(feats, pos, ori, dims)


@dataclass(frozen=True)
class OdometryTeacher:
    step_sigma_t: float = 0.0
    step_sigma_r: float = 0.0
    kind: str = "odometry"

    def __post_init__(self):
        if self.step_sigma_t < 0 or self.step_sigma_r < 0:
            raise InvalidParams("teacher noise must be non-negative")


@dataclass(frozen=True)
class TeacherLabel:
    pose: Pose
    teacher_kind: str


@dataclass(eq=False)
class ScanLabels:
    """Cached teacher output for one scan: one row per labeled frame."""
    scan_id: str
    teacher_kind: str
    frame_indices: np.ndarray  # (k,) indices into the scan
    positions: np.ndarray  # (k, 3)
    orientations: np.ndarray  # (k, 4)

    def __len__(self):
        return len(self.frame_indices)

    def labels(self) -> list:
        return [TeacherLabel(Pose(p, q), self.teacher_kind) for p, q in zip(self.positions, self.orientations)]

    def errors(self, scan: Scan):
        """Per-frame position (m) and orientation (deg) error against ground truth."""
        gt_p = scan.positions[self.frame_indices]
        gt_q = scan.orientations[self.frame_indices]
        return position_error(self.positions, gt_p), orientation_error_deg(self.orientations, gt_q)

    def to_dict(self) -> dict:
        return {"scan_id": self.scan_id, "teacher_kind": self.teacher_kind,
                "frame_indices": self.frame_indices.tolist(),
                "positions": self.positions.tolist(), "orientations": self.orientations.tolist()}

    @classmethod
    def from_dict(cls, d) -> ScanLabels:
        return cls(d["scan_id"], d["teacher_kind"], np.array(d["frame_indices"], dtype=int),
                   np.array(d["positions"], dtype=np.float64).reshape(-1, 3),
                   np.array(d["orientations"], dtype=np.float64).reshape(-1, 4))


def oracle_predict(teacher: OracleTeacher, frame, rng: np.random.Generator) -> TeacherLabel:
    """Label one ``(observation, gt_pose)`` frame by perturbing the ground truth."""
    _, gt = frame
    return TeacherLabel(perturb_pose(gt, teacher.sigma_t, teacher.sigma_r, rng), teacher.kind)


def _nearest(teacher: RetrievalTeacher, queries: np.ndarray, chunk: int = 256) -> np.ndarray:
    ref = teacher.ref_features if teacher.dims is None else teacher.ref_features[:, teacher.dims]
    q = queries if teacher.dims is None else queries[:, teacher.dims]
    out = np.empty(len(q), dtype=int)
    for s in range(0, len(q), chunk):
        d = q[s:s + chunk, None, :] - ref[None, :, :]
        # argmin returns the first minimum: ties go to the lowest reference index
        out[s:s + chunk] = np.argmin(np.sum(d * d, axis=2), axis=1)
    return out


def retrieval_predict(teacher: RetrievalTeacher, obs) -> TeacherLabel:
    j = _nearest(teacher, np.atleast_2d(np.asarray(obs, dtype=np.float64)))[0]
    return TeacherLabel(Pose(teacher.ref_positions[j], teacher.ref_orientations[j]), teacher.kind)


def odometry_label_scan(teacher: OdometryTeacher, scan: Scan, anchor: Pose | None,
                        rng: np.random.Generator, frame_indices=None) -> list:
    """Integrate noisy relative poses from ``anchor`` over the given frames.

    ``frame_indices`` defaults to every frame; the first listed frame is
    labeled with ``anchor`` exactly (its ground truth when ``anchor`` is None).
    """
    idx = np.arange(len(scan)) if frame_indices is None else np.asarray(frame_indices)
    if len(idx) == 0:
        raise InvalidParams("odometry needs a non-empty scan")
    current = anchor if anchor is not None else scan.pose(idx[0])
    labels = [TeacherLabel(current, teacher.kind)]
    prev_gt = scan.pose(idx[0])
    for i in idx[1:]:
        gt = scan.pose(i)
        rel = perturb_pose(relative(prev_gt, gt), teacher.step_sigma_t, teacher.step_sigma_r, rng)
        current = compose(current, rel)
        labels.append(TeacherLabel(current, teacher.kind))
        prev_gt = gt
    return labels


def label_scan(teacher, scan: Scan, rng: np.random.Generator) -> ScanLabels:
    """Label every non-held-out frame of ``scan``; held-out frames are never touched."""
    idx = scan.train_indices
    if len(idx) == 0:
        return ScanLabels(scan.scan_id, teacher.kind, idx, np.zeros((0, 3)), np.zeros((0, 4)))
    if isinstance(teacher, OracleTeacher):
        poses = [oracle_predict(teacher, (scan.features[i], scan.pose(i)), rng).pose for i in idx]
        pos = np.stack([p.position for p in poses])
        ori = np.stack([p.orientation for p in poses])
    elif isinstance(teacher, RetrievalTeacher):
        j = _nearest(teacher, scan.features[idx])
        pos = teacher.ref_positions[j].copy()
        ori = teacher.ref_orientations[j].copy()
    elif isinstance(teacher, OdometryTeacher):
        labels = odometry_label_scan(teacher, scan, None, rng, frame_indices=idx)
        pos = np.stack([lb.pose.position for lb in labels])
        ori = np.stack([lb.pose.orientation for lb in labels])
    else:
        raise InvalidParams(f"unknown teacher type {type(teacher).__name__}")
    return ScanLabels(scan.scan_id, teacher.kind, idx.copy(), pos, ori)
