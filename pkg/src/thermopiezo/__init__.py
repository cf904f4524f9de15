"""Forward simulation and parameter identification for a 1D thermo-piezoelectric
Kelvin-Voigt solid.

Subpackage layout:

- ``grid``: uniform P1 grids, quadrature, tridiagonal algebra
- ``materials``: material parameter containers, coefficient algebra, excitation lift
- ``solver``: regularized and physical time steppers, mollification
- ``diagnostics``: energy identity, a-priori bound monitor, weak residuals
- ``observation``: surface charge observation operators, noise model
- ``inversion``: all-at-once model operator, derivatives, Landweber iteration
- ``cli``: command line entry point
"""

__version__ = "0.1.0"
