"""Insulator damage classification: a numpy CNN stack (AdeNet, LeNet-5),
a handcrafted-feature random forest baseline, Grad-CAM, and the k-fold
evaluation harness that compares them."""

__version__ = "0.1.0"
