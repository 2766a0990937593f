"""k-space masked autoencoder for cardiac MRI phantoms, on a small numpy autodiff core."""

__version__ = "0.1.0"
