"""
Module: __init__.py
Description:
    ctrpose: camera-to-robot pose estimation with differentiable PnP and silhouette rendering.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Pure library code; configuration and console output live in `tools/` and `utils/`.
"""

__version__ = "0.1.0"
