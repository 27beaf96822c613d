"""Viscoelastic-viscoplastic damage model for BNP/epoxy with an LSTM surrogate.

Submodules:
    tensor3   3x3 tensor helpers and Voigt packing
    material  constitutive model, local integrator and perturbation tangent
    pathgen   training-path generation and labeling
    surrogate numpy LSTM network, training and inference
    fem       small updated-Lagrangian hexahedral finite-element solver
    cli       command-line entry points
"""

__version__ = "0.1.0"
