"""kineticlab: a desk-scale laboratory for linear kinetic equations with
spatially degenerate collision weights.

Subpackages by theme:

* ``phase``        grids, velocity spaces, potentials, equilibria, norms
* ``collision``    velocity-space collision operators and their gaps
* ``transport``    characteristics, wall reflection laws, transport steps
* ``control``      geometric control condition checks and occupation weights
* ``evolve``       splitting evolution, decay fits, certified rates, generators
* ``inequalities`` divergence solvers, Korn / Poincare-Lions / Stokes constants
* ``commutators``  weighted commutator chain and bracket-table verification
* ``cli``          experiment runner
"""

__version__ = "0.1.0"
