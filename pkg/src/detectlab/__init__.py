"""Desk-scale detection lab: numpy autodiff, RFB/CA blocks, WIoU losses, a grid detector and an mAP evaluator."""

__version__ = "0.1.0"
