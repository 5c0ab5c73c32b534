"""
Where the multiplies go
=======================

Counts for both model widths, from the closed form and from an
instrumented forward pass.
"""

from lambdakws import model as M

for name in ("lambda-resnet18", "lambda-resnet18-2"):
    spec = M.named_spec(name, num_classes=12)
    measured = M.measured_flops(M.build(spec))
    print(f"{name}: {M.count_params(spec)} parameters, {M.count_flops(spec)} multiplies "
          f"(instrumented {measured.total})")
    for part, value in M.flop_breakdown(spec).items():
        print(f"    {part:16s} {value:>9d}")
    print("    sequence length per stage:", M.temporal_trace(spec))
