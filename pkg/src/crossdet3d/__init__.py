"""Cross-dataset 3D car detection tooling: KITTI-format conversion, depth-based
difficulty evaluation with rotated IoU, and size-statistics domain corrections."""

__version__ = "0.1.0"
