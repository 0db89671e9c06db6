"""
Storage Layer Package
Weight containers, result tables and run manifests
"""

from .container import load_model, save_model
from .manifest import RunManifest, fingerprint_file
from .results import read_csv, write_csv

__all__ = ['load_model', 'save_model', 'RunManifest', 'fingerprint_file', 'read_csv', 'write_csv']
