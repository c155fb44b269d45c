"""Captioning-pretrained radiograph encoders and label-efficient transfer, on a numpy autodiff core."""

__version__ = "0.1.0"
