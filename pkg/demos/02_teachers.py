"""Scene-agnostic teachers label an unseen scan, each with its own error profile.

* oracle: ground truth plus small Gaussian noise (a structure-based localizer)
* retrieval: pose of the nearest labeled training frame (image retrieval)
* odometry: integrated noisy relative motion from an exact first pose (SLAM/VIO)

Held-out frames are never labeled.
"""
import numpy as np

from condo.continual import TeacherSpec, build_teacher
from condo.teachers import label_scan
from condo.world import BenchmarkConfig, build_benchmark

bench = build_benchmark(BenchmarkConfig("condition_shift", seed=0, n_frames=512, max_step=0.5))
scan = bench.events[-1].scan
print(f"labeling {scan.scan_id} (condition {scan.condition}), {len(scan.train_indices)} of {len(scan)} frames\n")

specs = [TeacherSpec("oracle", 0.02, 0.5), TeacherSpec("oracle", 0.2, 2.0), TeacherSpec("retrieval"),
         TeacherSpec("retrieval", use_invariant_dims_only=False), TeacherSpec("odometry", 0.02, 0.2)]
print(f"{'teacher':24s} {'median m':>9s} {'mean m':>9s} {'median deg':>11s}")
for spec in specs:
    labels = label_scan(build_teacher(spec, bench, scan.scene_id), scan, np.random.default_rng(0))
    pos, rot = labels.errors(scan)
    print(f"{spec.label:24s} {np.median(pos):9.3f} {pos.mean():9.3f} {np.median(rot):11.2f}")

# odometry drift grows along the scan; the first labeled frame is exact
labels = label_scan(build_teacher(specs[-1], bench, scan.scene_id), scan, np.random.default_rng(0))
pos, _ = labels.errors(scan)
print("\nodometry error at labeled frames 0, 100, 200, ...:", np.round(pos[::100], 3))
