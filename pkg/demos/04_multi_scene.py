"""Growing one model across scenes: a shared backbone with one head per scene.

A new scene arrives with labeled training scans; a head is added without
touching the existing ones, and replay keeps sampling from every scene.
"""
import numpy as np

from condo.continual import ConDo, StandAlonePerScene, TeacherSpec, TrainConfig, TrainOnly, run_strategy
from condo.harness import evaluate
from condo.model import add_head, forward, init_model
from condo.world import BenchmarkConfig, build_benchmark

bench = build_benchmark(BenchmarkConfig("multi_scene", seed=0, n_frames=256, n_train_scans=2,
                                        n_inference_scans=2, max_step=1.0))
print("events:", [getattr(ev, "scene_id", None) or ev.scan.scan_id for ev in bench.events])

# adding a head leaves the old scenes' predictions bit-identical
m = init_model(bench.scenes[0].feature_dim, (64, 64), 32, ["scene0"], seed=0)
x = bench.initial_training[0].features[:8]
before = forward(m, "scene0", x)
add_head(m, "scene2", seed=1)
print("old head unchanged after add_head:", all(np.array_equal(a, b) for a, b in zip(before, forward(m, "scene0", x))))

cfg = TrainConfig(b=100.0, hidden_dims=(128, 128), feat_dim=64)
cache = {}
teacher = TeacherSpec("oracle", 0.02, 0.5)
rows = {}
for name, strategy in {"train only": TrainOnly(), "ConDo": ConDo(teacher),
                       "stand-alone ConDo": StandAlonePerScene(ConDo(teacher))}.items():
    final = run_strategy(bench, strategy, cfg, seed=0, initial_cache=cache)[-1].model
    rep = evaluate(final, bench)
    rows[name] = {s.scene_id: rep.scene_group(s.scene_id, "inference").median_pos_m for s in bench.scenes}

print(f"\n{'inference median (m)':22s}" + "".join(f"{s.scene_id:>9s}" for s in bench.scenes))
for name, per in rows.items():
    print(f"{name:22s}" + "".join(f"{v:9.3f}" for v in per.values()))
