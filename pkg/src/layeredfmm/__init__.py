"""Electrostatics of point charges in layered dielectric media.

Library plus CLI for computing pairwise Coulomb interactions of N charges
embedded in a stack of dielectric layers in O(N) time: a classic free-space
multipole solver combined with separate fast solvers for the reaction-field
contributions of every interface, driven by Sommerfeld-type integrals of the
layer response densities.
"""

__version__ = "0.1.0"
