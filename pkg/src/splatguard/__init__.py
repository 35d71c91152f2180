"""Joint watermarking and edit-deterrence optimization for Gaussian splatting scenes."""

__version__ = "0.1.0"
