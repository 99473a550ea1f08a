"""Desk-scale motion-deblurring laboratory.

Motion-blur synthesis, classical non-blind deconvolution, a from-scratch
autodiff engine, and a hybrid CNN/ViT restoration network with its training
and evaluation pipeline.
"""

__version__ = "0.1.0"
