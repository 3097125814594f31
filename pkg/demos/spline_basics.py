"""Tour of the spline layer: bases, Greville points, least-squares fits.

Run with:  python3 demos/spline_basics.py
"""

import numpy as np

from slabflow.splines import (basis_matrix, fit_least_squares,
                              greville_abscissae, open_uniform_knots)

# A quadratic basis with 8 functions on an open uniform knot vector.
kv = open_uniform_knots(degree=2, n_basis=8)
print("knots:", np.round(kv.knots, 3))

theta = np.linspace(0.0, 1.0, 9)
B = basis_matrix(kv, theta)
print("\nbasis values at 9 parameters (rows sum to 1):")
for th, row in zip(theta, B):
    print(f"  theta={th:4.2f}  sum={row.sum():.15f}  "
          f"max={row.max():.4f} at function {row.argmax()}")

# Greville abscissae: where control values act like nodal values.
grev = greville_abscissae(kv)
print("\nGreville abscissae:", np.round(grev, 4))

# Fit the sloshing tank's initial surface h(x) = 1 - 0.1 cos(pi x).
xs = np.linspace(0.0, 1.0, 400)
samples = np.stack([xs, 1.0 - 0.1 * np.cos(np.pi * xs)], axis=1)
curve = fit_least_squares(samples, kv, fixed_ends=True)
print("\ncosine-surface fit control points:")
for cp in curve.ctrl:
    print(f"  ({cp[0]:8.5f}, {cp[1]:8.5f})")

fitted = basis_matrix(kv, xs) @ curve.ctrl
err = np.abs(fitted[:, 1] - samples[:, 1]).max()
print(f"\nmax fit deviation: {err:.2e}")
print("note the end control points interpolate exactly:",
      curve.ctrl[0], curve.ctrl[-1])
