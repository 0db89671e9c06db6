"""
DepthProbe Core Package
Numeric kernels, the traced transformer and sequence ingestion
"""

from .errors import DepthProbeError

__all__ = ['DepthProbeError']
