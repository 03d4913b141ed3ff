"""Diffusion-based data augmentation for lesion segmentation, at desk scale."""

__version__ = "0.1.0"
