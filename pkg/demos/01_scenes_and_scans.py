"""A synthetic scene, how conditions change what the camera sees, and a benchmark.

Observations are smooth functions of the camera pose. Half of the feature
dimensions also depend on a scalar condition (lighting, season), the other
half do not. A pose regressor trained at one condition sees shifted inputs
at another, which is the domain gap continual updates have to close.
"""
import numpy as np

from condo.geometry import Pose, quat_from_axis_angle
from condo.world import BenchmarkConfig, SceneParams, build_benchmark, make_scene, render

scene = make_scene("office", seed=3, params=SceneParams(obs_noise_sigma=0.0))
pose = Pose([2.0, -4.0, 1.5], quat_from_axis_angle([0, 0, 1], np.radians(30)))

day, night = render(scene, pose, 0.0), render(scene, pose, 1.0)
inv = scene.invariant_dims
print(f"feature dim {scene.feature_dim}, condition-sensitive dims {scene.n_condition_sensitive}")
print(f"change on condition-invariant dims: {np.abs(day[inv] - night[inv]).max():.1e}")
print(f"change on condition-sensitive dims: {np.abs(day[:scene.n_condition_sensitive] - night[:scene.n_condition_sensitive]).mean():.3f} (mean abs)")

bench = build_benchmark(BenchmarkConfig("condition_shift", seed=0, n_frames=512, max_step=0.5))
print(f"\nbenchmark {bench.name!r}: {len(bench.initial_training)} labeled scans, {len(bench.events)} arriving scans")
for scan in bench.all_scans:
    step = np.linalg.norm(np.diff(scan.positions, axis=0), axis=1).mean()
    print(f"  {scan.scan_id:8s} role={scan.role:9s} c={scan.condition:.1f} frames={len(scan)} "
          f"held-out={int(scan.holdout_mask.sum())} mean step={step:.3f} m")
