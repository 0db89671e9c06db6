"""
Run Manifest
One manifest.json per output directory describing how its files were produced
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from config import get_config

logger = logging.getLogger(__name__)


def fingerprint_file(path: Union[str, Path]) -> str:
    """sha256 content hash of a file"""
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    """Provenance of one CLI run"""
    command: str
    config: Dict[str, Any]
    seed: int
    model_fingerprint: Optional[str] = None
    models: Dict[str, str] = field(default_factory=dict)   # label -> sha256, one entry per --model
    tool_version: str = field(default_factory=lambda: get_config().APP_VERSION)
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    outputs: List[str] = field(default_factory=list)

    def finish(self, outputs: List[Union[str, Path]]) -> 'RunManifest':
        self.outputs = sorted(Path(p).name for p in outputs)
        self.finished_at = _now()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write (or replace) the directory's manifest"""
        path = Path(out_dir) / get_config().MANIFEST_FILENAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True, default=str)
        logger.info(f"Wrote run manifest to {path}")
        return path

    @classmethod
    def read(cls, out_dir: Union[str, Path]) -> 'RunManifest':
        path = Path(out_dir) / get_config().MANIFEST_FILENAME
        with open(path, 'r', encoding='utf-8') as handle:
            return cls(**json.load(handle))
