"""
Orders on grid functions and interval completion
================================================

"""

from ordcut import Grid, IntervalFn, PiecewiseFn, graph_complete, natural_leq, parse, pullback_leq, sup_family

line = Grid(((0.0, 1.0),), (9,))
x = line.axes()[0]
u = PiecewiseFn.sample(line, lambda x: x)
v = PiecewiseFn.sample(line, lambda x: x + 100)

# the pullback order compares images under the operator, not values
dx = parse("dx(u) = 0", ("x",))
print("x <= x + 100 naturally:", natural_leq(u, v))
print("x + 100 <=_T x under d/dx:", pullback_leq(dx, v, u))

# a jump completes to an interval at the jump node only
step = IntervalFn.from_values(line, (x >= 0.5).astype(float))
done = graph_complete(step)
print("widths after completion:", done.width)

# the supremum of {x, -x} is |x|; the grid has to resolve the kink, since a
# step larger than a quarter of the range reads as a jump
grid = Grid(((-1.0, 1.0),), (21,))
s = sup_family([PiecewiseFn.sample(grid, lambda x: x), PiecewiseFn.sample(grid, lambda x: -x)])
print("sup{x, -x} on every fourth node:", s.lo[::4], "degenerate:", bool(s.degenerate.all()))
