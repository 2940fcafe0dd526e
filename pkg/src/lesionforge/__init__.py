"""Skin-lesion segmentation and melanoma classification on a small numpy autodiff core."""

__version__ = "0.1.0"
