"""Mesh-anchored 3D Gaussian head engine.

Gaussians live in triangle-local frames of a parametric head mesh, follow its
blendshape/skinning deformation, receive speaker-specific detail compensation
through a latent pose, and are rendered by depth-sorted alpha compositing.
A fitter optimizes every attribute against image, attribute, and semantic
objectives, and a toy audio-to-motion translator exercises the full loss
suite at desk scale.
"""

__version__ = "0.1.0"
