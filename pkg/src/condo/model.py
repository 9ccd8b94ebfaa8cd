"""Multi-head absolute pose regressor with hand-written backprop and Adam.

The network is ``f = h ∘ g``: a tanh MLP backbone ``g`` shared by all scenes
and one linear head ``h`` per scene producing 3 position and 4 raw quaternion
outputs. Each head carries a fixed affine map from its normalized position
output to scene coordinates so that heads start near the scene's extent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateScene, EmptyDataset, InvalidParams, NearZeroQuaternion, UnknownScene
from .geometry import Pose

SUPERVISED = "supervised"
DISTILLED = "distilled"


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(eq=False)
class AprModel:
    """Parameters live in ``params`` keyed by name so the optimizer can walk them.

    Keys: ``backbone.{i}.W`` / ``backbone.{i}.b``, ``head.{scene}.W`` /
    ``head.{scene}.b``, ``s_t`` and ``s_r`` (0-d arrays).
    """
    params: dict
    n_backbone: int
    head_ids: list
    position_center: dict  # scene -> (3,) offset added to the position output
    position_scale: dict  # scene -> (3,) multiplier on the position output

    @property
    def s_t(self) -> float:
        return float(self.params["s_t"])

    @property
    def s_r(self) -> float:
        return float(self.params["s_r"])

    @property
    def input_dim(self) -> int:
        return self.params["backbone.0.W"].shape[0]

    @property
    def feat_dim(self) -> int:
        return self.params[f"backbone.{self.n_backbone - 1}.W"].shape[1]

    def backbone_layers(self):
        return [(self.params[f"backbone.{i}.W"], self.params[f"backbone.{i}.b"]) for i in range(self.n_backbone)]

    def head(self, scene_id):
        if scene_id not in self.head_ids:
            raise UnknownScene(scene_id)
        return self.params[f"head.{scene_id}.W"], self.params[f"head.{scene_id}.b"]

    def copy(self) -> AprModel:
        return AprModel({k: v.copy() for k, v in self.params.items()}, self.n_backbone, list(self.head_ids),
                        {k: v.copy() for k, v in self.position_center.items()},
                        {k: v.copy() for k, v in self.position_scale.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(D: int, hidden_dims=(256, 256), feat_dim: int = 128, initial_scene_ids=("scene0",),
               seed: int = 0, s_t: float = 0.0, s_r: float = -3.0, head_scaling: dict | None = None) -> AprModel:
    dims = [D, *hidden_dims, feat_dim]
    if any(int(d) <= 0 for d in dims):
        raise InvalidParams(f"layer sizes must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"backbone.{i}.W"] = glorot(rng, a, b)
        params[f"backbone.{i}.b"] = np.zeros(b)
    params["s_t"] = np.array(float(s_t))
    params["s_r"] = np.array(float(s_r))
    model = AprModel(params, len(dims) - 1, [], {}, {})
    head_scaling = head_scaling or {}
    for k, sid in enumerate(initial_scene_ids):
        add_head(model, sid, seed=int(rng.integers(2**63)), scaling=head_scaling.get(sid))
    return model


def add_head(model: AprModel, scene_id: str, seed: int, scaling=None) -> AprModel:
    """Attach a freshly initialized regression head; nothing else is touched.

    ``scaling`` is an optional ``(center, scale)`` pair of 3-vectors mapping
    the head's normalized position output to scene coordinates.
    """
    if scene_id in model.head_ids:
        raise DuplicateScene(scene_id)
    rng = np.random.default_rng(seed)
    model.params[f"head.{scene_id}.W"] = glorot(rng, model.feat_dim, 7)
    model.params[f"head.{scene_id}.b"] = np.zeros(7)
    center, scale = scaling if scaling is not None else (np.zeros(3), np.ones(3))
    model.position_center[scene_id] = np.asarray(center, dtype=np.float64).reshape(3).copy()
    model.position_scale[scene_id] = np.asarray(scale, dtype=np.float64).reshape(3).copy()
    model.head_ids.append(scene_id)
    return model


def _backbone_forward(model: AprModel, X):
    acts = [X]
    h = X
    for W, b in model.backbone_layers():
        h = np.tanh(h @ W + b)
        acts.append(h)
    return acts


def _head_forward(model, scene_id, feat):
    W, b = model.head(scene_id)
    y = feat @ W + b
    t = model.position_center[scene_id] + model.position_scale[scene_id] * y[:, :3]
    return t, y[:, 3:], y


def forward(model: AprModel, scene_id: str, obs):
    """Predicted position and raw (unnormalized) quaternion.

    ``obs`` may be a single feature vector or an ``(n, D)`` batch; outputs
    follow the same leading shape.
    """
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    X = obs[None] if single else obs
    model.head(scene_id)
    feat = _backbone_forward(model, X)[-1]
    t, r, _ = _head_forward(model, scene_id, feat)
    return (t[0], r[0]) if single else (t, r)


def pose_loss(t, r_raw, target: Pose, s_t: float, s_r: float):
    """Weighted pose loss with learnable balance terms and its gradients.

    Returns ``(loss, dL/dt, dL/dr_raw, dL/ds_t, dL/ds_r)``.
    """
    t = np.asarray(t, dtype=np.float64)
    r_raw = np.asarray(r_raw, dtype=np.float64)
    q = np.asarray(target.orientation, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq <= 1e-12:
        raise NearZeroQuaternion("target orientation has near-zero norm")
    q = q / nq
    dt = t - target.position
    dr = r_raw - q
    a = float(np.linalg.norm(dt))
    b = float(np.linalg.norm(dr))
    et, er = np.exp(-s_t), np.exp(-s_r)
    loss = a * et + s_t + b * er + s_r
    gt = et * dt / a if a >= 1e-12 else np.zeros(3)
    gr = er * dr / b if b >= 1e-12 else np.zeros(4)
    return loss, gt, gr, 1.0 - a * et, 1.0 - b * er


def _batch_terms(t, r, tgt_t, tgt_q, s_t, s_r):
    """Vectorized per-item losses and gradients w.r.t. t, r."""
    nq = np.linalg.norm(tgt_q, axis=1, keepdims=True)
    if np.any(nq <= 1e-12):
        raise NearZeroQuaternion("target orientation has near-zero norm")
    dt = t - tgt_t
    dr = r - tgt_q / nq
    a = np.sqrt(np.sum(dt * dt, axis=1))
    b = np.sqrt(np.sum(dr * dr, axis=1))
    et, er = np.exp(-s_t), np.exp(-s_r)
    losses = a * et + s_t + b * er + s_r
    ga = np.where(a >= 1e-12, et / np.where(a >= 1e-12, a, 1.0), 0.0)
    gb = np.where(b >= 1e-12, er / np.where(b >= 1e-12, b, 1.0), 0.0)
    return losses, ga[:, None] * dt, gb[:, None] * dr, a, b


@dataclass(eq=False)
class TrainBatch:
    scene_ids: np.ndarray  # (B,) str
    features: np.ndarray  # (B, D)
    positions: np.ndarray  # (B, 3) target
    orientations: np.ndarray  # (B, 4) target
    sources: np.ndarray  # (B,) SUPERVISED | DISTILLED
    frame_ids: np.ndarray  # (B,) str

    def __len__(self):
        return len(self.features)

    @classmethod
    def from_items(cls, items) -> TrainBatch:
        """Build from ``(scene_id, obs, target Pose, source[, frame_id])`` tuples."""
        items = list(items)
        if not items:
            raise EmptyDataset("a training batch needs at least one item")
        return cls(
            np.array([it[0] for it in items]),
            np.stack([np.asarray(it[1], dtype=np.float64) for it in items]),
            np.stack([it[2].position for it in items]),
            np.stack([it[2].orientation for it in items]),
            np.array([it[3] for it in items]),
            np.array([it[4] if len(it) > 4 else "" for it in items]),
        )


def loss_and_grads(model: AprModel, batch: TrainBatch):
    """Mean loss over the batch and gradients for every touched parameter."""
    if len(batch) == 0:
        raise EmptyDataset("empty batch")
    B = len(batch)
    s_t, s_r = model.s_t, model.s_r
    acts = _backbone_forward(model, batch.features)
    feat = acts[-1]
    dfeat = np.zeros_like(feat)
    grads = {}
    total = 0.0
    sum_a = sum_b = 0.0
    for sid in np.unique(batch.scene_ids):
        sel = np.flatnonzero(batch.scene_ids == sid)
        W, _ = model.head(str(sid))
        f = feat[sel]
        t, r, _ = _head_forward(model, str(sid), f)
        losses, gt, gr, a, b = _batch_terms(t, r, batch.positions[sel], batch.orientations[sel], s_t, s_r)
        total += losses.sum()
        sum_a += a.sum()
        sum_b += b.sum()
        dy = np.concatenate([gt * model.position_scale[str(sid)], gr], axis=1) / B
        grads[f"head.{sid}.W"] = f.T @ dy
        grads[f"head.{sid}.b"] = dy.sum(axis=0)
        dfeat[sel] = dy @ W.T
    g = dfeat
    for i in range(model.n_backbone - 1, -1, -1):
        g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"backbone.{i}.W"] = acts[i].T @ g
        grads[f"backbone.{i}.b"] = g.sum(axis=0)
        if i > 0:
            g = g @ model.params[f"backbone.{i}.W"].T
    grads["s_t"] = np.array(1.0 - np.exp(-s_t) * sum_a / B)
    grads["s_r"] = np.array(1.0 - np.exp(-s_r) * sum_b / B)
    return total / B, grads


def per_item_losses(model: AprModel, batch: TrainBatch) -> np.ndarray:
    out = np.empty(len(batch))
    feat = _backbone_forward(model, batch.features)[-1]
    for sid in np.unique(batch.scene_ids):
        sel = np.flatnonzero(batch.scene_ids == sid)
        t, r, _ = _head_forward(model, str(sid), feat[sel])
        out[sel] = _batch_terms(t, r, batch.positions[sel], batch.orientations[sel], model.s_t, model.s_r)[0]
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # per-parameter update counts for bias correction

    def update(self, model: AprModel, grads: dict) -> None:
        """One Adam step on the parameters present in ``grads``."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            p = model.params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
                self.counts[k] = 0
            self.counts[k] += 1
            n = self.counts[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            tmp = np.multiply(g, g, out=np.empty_like(p))
            tmp *= 1.0 - b2
            v += tmp
            step_size = self.lr * np.sqrt(1.0 - b2**n) / (1.0 - b1**n)
            # eps scaled so the update matches the textbook bias-corrected form
            np.sqrt(v, out=tmp)
            tmp += self.eps * np.sqrt(1.0 - b2**n)
            np.divide(m, tmp, out=tmp)
            tmp *= step_size
            if p.ndim == 0:
                model.params[k] = p - tmp
            else:
                p -= tmp


def batch_step(model: AprModel, batch: TrainBatch, adam: AdamState):
    """Compute the mean mixed loss and apply one Adam update in place."""
    loss, grads = loss_and_grads(model, batch)
    adam.update(model, grads)
    return loss


def gradient_check(model: AprModel, scene_id: str, obs, target, epsilon: float = 1e-5,
                   max_per_param: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``obs`` / ``target`` may be a single observation and Pose, or an
    ``(n, D)`` array with a list of Poses; ``scene_id`` may then also be a
    per-item list to mix heads in one batch. With ``max_per_param`` set, at most
    that many entries of every parameter array are probed.
    """
    if not 0 < epsilon <= 1e-2:
        raise InvalidParams("epsilon must lie in (0, 1e-2]")
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    targets = [target] if isinstance(target, Pose) else list(target)
    scenes = [scene_id] * len(obs) if isinstance(scene_id, str) else list(scene_id)
    batch = TrainBatch.from_items((s, o, p, SUPERVISED) for s, o, p in zip(scenes, obs, targets))
    _, grads = loss_and_grads(model, batch)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for k, p in model.params.items():
        analytic = grads.get(k, np.zeros_like(p))
        flat_idx = np.arange(p.size)
        if max_per_param is not None and p.size > max_per_param:
            flat_idx = rng.choice(p.size, size=max_per_param, replace=False)
        for j in flat_idx:
            idx = np.unravel_index(j, p.shape) if p.ndim else ()
            old = model.params[k][idx] if p.ndim else float(model.params[k])
            _set(model, k, idx, old + epsilon)
            lp = per_item_losses(model, batch).mean()
            _set(model, k, idx, old - epsilon)
            lm = per_item_losses(model, batch).mean()
            _set(model, k, idx, old)
            numeric = (lp - lm) / (2.0 * epsilon)
            a = float(analytic[idx]) if p.ndim else float(analytic)
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def _set(model, k, idx, value):
    if model.params[k].ndim == 0:
        model.params[k] = np.array(value)
    else:
        model.params[k][idx] = value


# ---------------------------------------------------------------------------
# checkpoints

def model_to_dict(model: AprModel) -> dict:
    return {
        "n_backbone": model.n_backbone,
        "head_ids": list(model.head_ids),
        "s_t": model.s_t,
        "s_r": model.s_r,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.items() if k not in ("s_t", "s_r")},
        "position_center": {k: v.tolist() for k, v in model.position_center.items()},
        "position_scale": {k: v.tolist() for k, v in model.position_scale.items()},
    }


def model_from_dict(d: dict) -> AprModel:
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
    params["s_t"] = np.array(float(d["s_t"]))
    params["s_r"] = np.array(float(d["s_r"]))
    return AprModel(params, int(d["n_backbone"]), list(d["head_ids"]),
                    {k: np.array(v) for k, v in d["position_center"].items()},
                    {k: np.array(v) for k, v in d["position_scale"].items()})


def save_checkpoint(model: AprModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f)


def load_checkpoint(path) -> AprModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
