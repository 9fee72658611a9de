"""Desk-scale federated liver segmentation: autodiff, U-Net, FL strategies and the experiment harness."""

__version__ = "0.1.0"
