"""Domain-adversarial training with mixup for lesion segmentation, on a numpy autodiff core."""

__version__ = "0.1.0"
