"""Video person re-identification with recurrent feature refinement, on a small numpy autodiff core."""

__version__ = "0.1.0"
