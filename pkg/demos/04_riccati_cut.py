"""
A two-sided cut for u' = u^2 with u(0) = 1
==========================================

"""

import numpy as np

from ordcut import get_case, refine_cut

case = get_case("riccati")
grid = case.grid()
cut = refine_cut(case.op, case.rhs, grid, 0.4, 4, case.pins(grid), config=case.config())

for level in cut.levels:
    print(f"{level.side:5s} eps={level.epsilon:<7g} patches={level.patches:3d} "
          f"gamma={level.gamma_fraction:.4f} pass={level.defect['pass_fraction']:.3f}")
print("image defect", cut.image_defect, "allowance", cut.allowance)

# the values bracket the blow-up solution 1/(1 - t) away from t = 0.9
t = grid.axes()[0]
k = np.searchsorted(t, 0.5)
print("t=0.5: sub envelope", cut.lower.lo[k], "super envelope", cut.upper.hi[k], "exact", 1 / (1 - t[k]))
