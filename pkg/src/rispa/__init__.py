"""Power allocation with a programmable reflecting surface, end to end.

A scalar-wave scattering scene plays the role of the physical experiment:
random phase profiles go in, probe intensities come out. A forward surrogate
network learns that map from "measured" data, an inverse-design network is
trained through the frozen surrogate (with a differentiable phase quantizer
in between), and the designs are scored closed-loop against the scene,
including the obstacle-insertion / on-site retraining study.
"""

__version__ = "0.1.0"
