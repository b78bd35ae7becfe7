"""Three periods of a swap trial: detect, mask stale pixels, retrain, query.

Prints the per-period report and writes metrics to demo_out/metrics.csv.
Run from the repository root:  python demos/03_lifelong_trial.py   (a few minutes)
"""
import os

from lifemap.harness import ExperimentConfig, emit_report, run_experiment

os.makedirs("demo_out", exist_ok=True)
cfg = ExperimentConfig(category="Swap", tier=1, scene_seed=20, seed=20)


def show(period, mapper, out):
    tags = sorted({stage for stage, _ in out.trace})
    print(f"period {period}: decision={out.decision} regions={len(out.regions)} "
          f"mask ratio={out.mask_ratio:.3f} steps={out.steps} stages={tags}")


rep = run_experiment(cfg, on_period=show)
for p in rep.periods:
    print(f"  period {p.period}: recall={p.recall:.2f} swapped-out off target={p.query_acc_moved:.2f} "
          f"swapped-in found={p.query_acc_swapped_in:.2f} static={p.query_acc_static:.2f}")
print("wrote", emit_report(rep, "demo_out/metrics.csv"))
