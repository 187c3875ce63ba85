"""Model-inversion attack laboratory: logit identity loss and model augmentation."""

__version__ = "0.1.0"
