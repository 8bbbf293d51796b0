"""Sweep the number of disclosed recommendation slots on the calibrated market.

Each (fallback, bound) cell gets its own adherence probability matched to
a 13.5% adherence rate, then all slot counts are run on common random
numbers.  Pass a period count to trade speed for precision; the ordinal
pattern is only reliable near 10^4 periods.

    python demos/disclosure_sweep.py [periods]
"""
import sys

from gspmarket import calibrate_cells, calibrated_market, ordinal_pattern, sweep
from gspmarket.counterfactual import format_table

periods = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
m = calibrated_market()
cal = calibrate_cells(m, 0.135, periods=periods, grid_step=0.005, threads=4)
for (f, b), c in cal.items():
    print(f"{f.value:>15} / {b.value:<5}  p* = {c.p_star:.3f}  rate = {c.rate:.4f}")
res = sweep(m, periods=periods, adherence={k: c.p_star for k, c in cal.items()}, threads=4)
print()
print(format_table(res), end="")
print()
for cell, verdict in ordinal_pattern(res).items():
    print(cell, verdict)
