"""
The singular set tracks a Burgers shock
=======================================

"""

from ordcut import build_cover, get_case, viscous_guide
from ordcut.bench import shock_locus

case = get_case("burgers_riemann")
grid = case.grid()
pins = case.pins(grid)

# Riemann data u = 1 | 0: sub-solutions are not unique, a viscous march picks the entropy one
guide = viscous_guide(case.op, case.rhs, grid, pins)
cover = build_cover(case.op, case.rhs, 0.1, grid, "sub", pins, guide=guide)
print(len(cover.patches), "patches, singular fraction", round(cover.gamma_fraction, 4))

locus = shock_locus(cover)
print("fitted speed", round(locus["speed"], 4), "Rankine-Hugoniot", case.oracle.shock_speed)
