"""
A quick scaling run
===================

Small regimes only; ``zklora bench --preset sizes`` runs the full set.
"""

from zklora.bench import BenchSpec, compare_reference, linear_fit, run_scaling_bench

spec = BenchSpec([(2, 256, 256, 8), (4, 256, 256, 8), (8, 256, 256, 8), (2, 512, 512, 16)], m=15, repetitions=3)
rows, timings = run_scaling_bench(spec, "bench-quick")
for r in rows:
    print(r.csv_row())

same = [r for r in rows if r.avg_lora_size == 4096]
print("verify total vs modules, R^2:", linear_fit([r.num_loras for r in same], [r.total_verify_ms for r in same])[2])
print(compare_reference(rows, reference=False).to_dict())
