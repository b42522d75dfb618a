"""Intensity Scan Context loop-closure detection."""
