"""Polyp segmentation network built on a small numpy autodiff core."""
