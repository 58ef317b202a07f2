"""
stereovo
Weighted 2D/3D geometric residual stereo visual odometry with learned
per-pixel weight maps
"""

__version__ = '0.1.0'
