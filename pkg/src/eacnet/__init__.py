"""Attention-enhanced and region-cropped CNNs for facial action unit detection.

Everything is built on a small dense-tensor substrate (``eacnet.tensor``)
whose operations all carry analytic backward passes, so the full model is
trainable and finite-difference checkable on the CPU.
"""

__version__ = "0.1.0"

from .aus import AU_IDS, MINORITY_AU_IDS

__all__ = ["AU_IDS", "MINORITY_AU_IDS", "__version__"]
