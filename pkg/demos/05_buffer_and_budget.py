"""How much replay memory and compute does ConDo need?

Sweeps the replay buffer size (as a fraction of all collected frames) and
the per-round budget rate, on a smaller condition-shift benchmark.
"""
import math
from dataclasses import replace

from condo.continual import ConDo, RetrainGT, TeacherSpec, TrainConfig, TrainOnly, run_strategy
from condo.harness import evaluate, total_unlabeled_frames
from condo.world import BenchmarkConfig, build_benchmark

bench = build_benchmark(BenchmarkConfig("condition_shift", seed=0, n_frames=384, max_step=0.5))
cfg = TrainConfig(b=120.0, hidden_dims=(128, 128), feat_dim=64)
teacher = TeacherSpec("oracle", 0.02, 0.5)
cache = {}


def infer_median(strategy, train=cfg):
    final = run_strategy(bench, strategy, train, seed=0, initial_cache=cache)[-1].model
    return evaluate(final, bench).group("inference").median_pos_m


print(f"train only: {infer_median(TrainOnly()):.3f} m")
total = total_unlabeled_frames(bench)
print("\nbuffer fraction -> inference median (m)")
for frac in (0.1, 0.25, 1.0):
    cap = math.ceil(frac * total)
    print(f"  {frac:5.2f} ({cap:4d} frames)  {infer_median(ConDo(teacher), replace(cfg, buffer_capacity=cap)):.3f}")

print("\nbudget rate -> ConDo vs retrain-with-GT (m)")
for rate in (1.0, 0.25, 0.01):
    print(f"  {rate:5.2f}  {infer_median(ConDo(teacher, rate)):.3f}  {infer_median(RetrainGT(rate)):.3f}")
