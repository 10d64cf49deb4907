"""Desk-scale detector: recurrent spatial features over CNN maps, global
IOU-k-means anchors, a YOLO-style loss, and an RNN box filter instead of NMS."""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, backward, gradient_check  # noqa: F401
