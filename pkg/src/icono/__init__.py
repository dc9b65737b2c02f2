"""Character recognition in artwork images.

Classical classifiers on deep face/body features, a style-transfer
surrogate dataset, three fine-tuning pipelines, CAM explanations and
metric reporting.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
