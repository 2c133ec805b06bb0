"""Locate, flip and defend the critical sign bits of FP32 network weights."""

__version__ = "0.1.0"
