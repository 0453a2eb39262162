"""OLBP: object segmentation from personal eye fixations, on a small numpy autodiff core."""
__version__ = "0.1.0"
