"""Feature-extraction bridge for the reconstruction engine.

Runs segmentation and embedding models over image frames and writes the
results as OVTF tensors plus a scene manifest that the engine consumes
directly. The adapter is write-only glue: it never computes any fusion
math itself.
"""

__version__ = "0.1.0"
