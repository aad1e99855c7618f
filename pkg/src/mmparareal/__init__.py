"""Parallel-in-time solvers coupling fine and reduced models.

Subpackages: :mod:`~mmparareal.smallmat` (small dense kernels),
:mod:`~mmparareal.engine` (Parareal drivers), :mod:`~mmparareal.msode`
(two-scale linear ODE testbed and convergence bounds),
:mod:`~mmparareal.mcmoments` (ensemble SDE fine solver and moment-ODE
coarse solver), :mod:`~mmparareal.cli` (experiment harness).
"""

from . import engine, mcmoments, msode, smallmat

__all__ = ["engine", "mcmoments", "msode", "smallmat"]
__version__ = "0.1.0"
