"""Low-shot sonar scene understanding: saliency segmentation, memory-based
open-set recognition, optical-flow label consensus, and the minimal autodiff
engine they run on."""

__version__ = "0.1.0"
