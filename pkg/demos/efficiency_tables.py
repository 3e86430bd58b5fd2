"""
Parameter and Mult-Adds budget of the presets
=============================================

Counts every weight, bias and PReLU slope, and the multiply-accumulates
needed to produce one 1280x720 output image.
"""

from lffn import analysis
from lffn.arch import NetworkSpec

print(f"{'preset':<9}{'scale':>6}{'params':>12}{'mult-adds':>12}")
for preset in ("lffn", "lffn-s", "lffn-nf", "lffn-ns"):
    for scale in (2, 3, 4):
        report = analysis.count_mult_adds(NetworkSpec.preset(preset, scale))
        print(f"{preset:<9}{scale:>6}{report.total_params / 1e3:>11.1f}K"
              f"{report.total_mult_adds / 1e9:>11.1f}G")

###############################################################################
# Where the cost sits inside LFFN x4.  Backbone convs run at 320x180, the
# tail at full resolution.

report = analysis.count_mult_adds(NetworkSpec.preset("lffn", 4))
by_part = {}
for row in report.rows:
    part = row.name.split(".")[0]
    by_part[part] = by_part.get(part, 0) + row.mult_adds
for part, macs in by_part.items():
    print(f"{part:<10} {macs / 1e9:8.2f}G  ({100 * macs / report.total_mult_adds:5.1f}%)")

###############################################################################
# One spindle block against one 64-wide residual block.

print(f"spindle / residual:           {100 * analysis.block_param_ratio(False):.2f}%")
print(f"depthwise spindle / residual: {100 * analysis.block_param_ratio(True):.2f}%")
