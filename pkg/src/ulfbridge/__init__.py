"""Unpaired low-field to high-field MRI slice translation with a multi-step
Schrödinger bridge, diffusion-guided distribution matching and structure
preservation, at desk scale."""

__version__ = "0.1.0"
