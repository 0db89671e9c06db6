"""
DepthProbe - Backend Package
Persistence for models and experiment outputs
"""

__version__ = '1.0.0'
