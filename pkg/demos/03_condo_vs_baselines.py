"""Continual updates against a fixed model and from-scratch retraining.

Three strategies on the condition-shift benchmark:

* Train only: the deployed model never changes.
* ConDo: every arriving scan is pseudo-labeled by a teacher, added to the
  replay buffer, and the model is fine-tuned for N*b/batch iterations.
* Retrain with GT: after every scan, a fresh model is trained on everything
  revealed so far with true labels (an upper bound that costs much more).

Runs in about a minute and a half on one core.
"""
import time

from condo.continual import ConDo, RetrainGT, TeacherSpec, TrainConfig, TrainOnly, run_strategy
from condo.harness import evaluate
from condo.world import BenchmarkConfig, build_benchmark

bench = build_benchmark(BenchmarkConfig("condition_shift", seed=0, n_frames=512, max_step=0.5))
cfg = TrainConfig(b=150.0)
cache = {}  # all strategies start from the same initial model

strategies = {
    "train only": TrainOnly(),
    "ConDo (oracle teacher)": ConDo(TeacherSpec("oracle", 0.02, 0.5)),
    "retrain with GT": RetrainGT(None),
}
runs = {}
print(f"{'strategy':24s} {'train m':>8s} {'infer m':>8s} {'infer deg':>10s} {'iterations':>11s} {'time':>6s}")
for name, strategy in strategies.items():
    t0 = time.perf_counter()
    results = runs[name] = run_strategy(bench, strategy, cfg, seed=0, initial_cache=cache)
    report = evaluate(results[-1].model, bench)
    iters = sum(r.report.used_iters for r in results)
    tr, inf = report.group("train"), report.group("inference")
    print(f"{name:24s} {tr.median_pos_m:8.3f} {inf.median_pos_m:8.3f} {inf.median_rot_deg:10.2f} "
          f"{iters:11d} {time.perf_counter() - t0:5.0f}s")

print("\nConDo after each round (inference held-out median, m):")
for r in runs["ConDo (oracle teacher)"]:
    med = evaluate(r.model, bench).group("inference").median_pos_m
    print(f"  round {r.round_id} ({r.report.event_kind:9s} {r.report.scan_id:24s}) {med:.3f}")
