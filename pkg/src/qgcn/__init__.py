"""Quaternion graph convolution for lifting 2D skeleton sequences to 3D poses and bone orientations."""

__version__ = "0.1.0"
