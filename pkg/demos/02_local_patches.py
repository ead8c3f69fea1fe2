"""
Local sub- and super-solutions
==============================

"""

from ordcut import audit_patch, local_subsolution, local_supersolution, parse

# u^3 = 2 with a band of width 0.2: the value coefficient is a cube root
cube = parse("u^3 = 2", ("x",))
lo = local_subsolution(cube, 2.0, (0.5,), 0.2, bounds=((0.0, 1.0),))
hi = local_supersolution(cube, 2.0, (0.5,), 0.2, bounds=((0.0, 1.0),))
print("sub value  ", lo.poly.coeff((0,)), "vs", 1.9 ** (1 / 3))
print("super value", hi.poly.coeff((0,)), "vs", 2.1 ** (1 / 3))

# a nonlinear first order equation; the patch keeps T P - f inside [-eps, 0]
op = parse("dt(u) = u^2")
P = local_subsolution(op, 0.0, (0.3,), 0.05, bounds=((0.0, 0.9),))
print("radius", round(P.radius, 4), "defect range on the samples", P.defect_stats)

# an independent, 10x denser audit of the same ball
print("audit (ok, min, max):", audit_patch(op, 0.0, P, bounds=((0.0, 0.9),)))
