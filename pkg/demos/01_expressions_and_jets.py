"""
Equations, jets and Taylor polynomials
======================================

"""

from ordcut import JetPolynomial, free_jet_variables, jet_of, parse, poly_eval, pretty

# an equation is parsed into F(x, u, Du, ...) = f
op = parse("dt(u) + u*dx(u) = 0")
print(pretty(op), "| order", op.order, "| coords", op.coords)
print("jet variables, head first:", free_jet_variables(op))

# polynomials are stored by their jet at the centre: a_p = D^p P(center)
P = JetPolynomial((0.0, 0.0), 2, {(2, 0): 2.0, (0, 2): 2.0})
print("P(1, 1) =", poly_eval(P, (1.0, 1.0)))
print("jet of P at (1, 0):", jet_of(P, (1.0, 0.0)))
