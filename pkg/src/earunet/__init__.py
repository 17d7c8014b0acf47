"""EAR-U-Net liver segmentation toolkit.

A self-contained numpy implementation of the EAR-U-Net segmentation
network (EfficientNet-style encoder, attention-gated skips, residual
decoder), its losses, the CT preprocessing/augmentation pipeline, the
training loop, slice-wise volume inference and the five volumetric
evaluation metrics, plus a CLI binding them together.
"""

__version__ = "0.1.0"
