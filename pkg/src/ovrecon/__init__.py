"""Desk-scale incremental pointmap reconstruction with an open-vocabulary
semantic segmentation head.

Subpackages:

- ``tensor_ad``: float64 tensors with reverse-mode autodiff and optimizers
- ``geometry``: poses, projection, point alignment, robust PnP, exact NN
- ``fusion``: object-level feature aggregation, attention fusion, losses
- ``pipeline``: windowed incremental reconstruction and registration
- ``ovs``: 3D segment matching, fused descriptors, similarity training
- ``metrics``: reconstruction, trajectory, and semantic evaluation
- ``ovtf`` / ``manifest`` / ``scene_io``: binary tensors, scene manifests,
  persistence
- ``cli``: the ``ovrecon`` command-line interface
"""

__version__ = "0.1.0"
