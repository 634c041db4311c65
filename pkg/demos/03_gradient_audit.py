"""Audit every hand-derived gradient against central finite differences.

All backward passes in this library are written by hand (there is no
autograd underneath).  The one tool that keeps that honest is the global
gradient checker: it runs the full chain

    channel mix -> kernel aggregation -> manifold compression ->
    vectorize -> power norm -> l2 norm -> dense softmax cross-entropy

on a small random instance and compares each analytic gradient block
against (L(theta + h) - L(theta - h)) / 2h entry by entry, with the
kernel bandwidth frozen at its baseline value (it is treated as a
constant by the backward pass, so the probe must hold it fixed too).

Run:  python3 demos/03_gradient_audit.py
"""

from spd_agg import PipelineConfig, grad_check

config = PipelineConfig(in_channels=6, mixed_channels=5, transform_dim=3, num_classes=3)

for seed in (0, 1, 2):
    report = grad_check(config, seed=seed, tolerance=1e-5)
    print(f"seed {seed}:")
    for block, err in report.max_rel_err.items():
        flag = "ok" if report.block_pass[block] else "FAIL"
        print(f"  {block:<14} max rel err {err:.3e}  [{flag}]")
    print(f"  all passed: {report.all_passed}\n")

print("note: the compression block compares the raw Euclidean partial of W;")
print("the optimizer consumes its tangent projection, which entrywise")
print("finite differences cannot see.")
