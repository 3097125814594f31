"""Space-time finite element solver for 2D free-surface flows.

Supports classical bilinear Lagrange elements and isogeometric NURBS
discretizations on structured single-patch meshes, five free-surface
displacement schemes, elastic interior mesh update, and the sloshing-tank
and die-swell benchmark cases.
"""

__version__ = "0.1.0"
