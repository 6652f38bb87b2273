"""Joint open-set training: a coupling-flow outlier generator trained
alongside a discriminative model, image-wide and dense, plus the
evaluation machinery for OOD detection."""

__version__ = "0.1.0"
