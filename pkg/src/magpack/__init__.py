"""Variational Gaussian wave packets for magnetic Schrodinger dynamics.

The package propagates a single thawed Gaussian wave packet by integrating
ordinary differential equations for its parameters (position, momentum,
complex width matrix, scalar phase), both in the width form and in the
symplectically factorized Hagedorn form.  A spectral grid solver provides
reference solutions of the full PDE, against which conservation laws and
convergence orders are measured by the experiment driver in
:mod:`magpack.cli`.
"""

from magpack.packet import GaussianPacket, HagedornPacket
from magpack.fields import FieldSet, Symbol, builtin, hamiltonian_symbol

__all__ = [
    "GaussianPacket",
    "HagedornPacket",
    "FieldSet",
    "Symbol",
    "builtin",
    "hamiltonian_symbol",
]

__version__ = "0.1.0"
