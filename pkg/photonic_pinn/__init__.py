"""
Photonic PINN simulator
Back-propagation-free, tensor-train-compressed optical PINN training on a
phase-domain model of MZI meshes.
"""

__version__ = "0.1.0"
