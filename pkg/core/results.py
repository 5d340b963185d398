"""
Result persistence for SandHUM runs
"""

import hashlib
import json
import os
import logging
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd
import scipy
import yaml

from core.config import ExperimentConfig, canonical_json
from core.errors import ConfigError

logger = logging.getLogger('sandhum.core.results')

SCHEMA_VERSION = 1
FLOAT_FORMAT = '%.12e'


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, (complex, np.complexfloating)):
        return {'re': float(value.real), 'im': float(value.imag)}
    if isinstance(value, Enum):
        return value.value
    return value


class ResultWriter:
    """Writes the artifacts of one subcommand under output_dir/<command>"""

    def __init__(self, output_dir: str, command: str):
        self.root = Path(os.path.expanduser(output_dir))
        self.command = command
        self.directory = self.root / command
        self.files: List[str] = []
        self._validate_location()

    def _validate_location(self) -> None:
        """Create the output location and check that it is writable"""
        if not self.directory.exists():
            try:
                self.directory.mkdir(parents=True, exist_ok=True)
                logger.info(f"Created output location: {self.directory}")
            except Exception as e:
                logger.error(f"Failed to create output location {self.directory}: {e}")
                raise ConfigError(f"cannot create output directory {self.directory}: {e}") from e
        if not os.access(self.directory, os.W_OK):
            logger.error(f"Output location not writable: {self.directory}")
            raise ConfigError(f"output directory {self.directory} is not writable")

    def path(self, name: str) -> str:
        return str(self.directory / name)

    def record(self, name: str) -> str:
        """Path for an artifact written by the caller; listed in the manifest"""
        path = self.path(name)
        if name not in self.files:
            self.files.append(name)
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        path = self.record(name)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding='utf-8', lineterminator='\n')
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def write_json(self, name: str, payload: Dict[str, Any]) -> str:
        path = self.record(name)
        document = dict(_jsonable(payload), schema_version=SCHEMA_VERSION)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(json.dumps(document, sort_keys=True, indent=2))
            f.write('\n')
        logger.info(f"Wrote {path}")
        return path

    def write_manifest(self, experiment: ExperimentConfig) -> str:
        """manifest.json: config hash, seed, versions, tau and the only timestamp of the run"""
        resolved = _jsonable(experiment.resolved)
        manifest = {
            'command': self.command,
            'config_sha256': hashlib.sha256(canonical_json(resolved).encode('utf-8')).hexdigest(),
            'seed': experiment.seed,
            'tau': experiment.tau,
            'files': sorted(self.files),
            'versions': {
                'numpy': np.__version__,
                'scipy': scipy.__version__,
                'pandas': pd.__version__,
                'pyyaml': yaml.__version__,
            },
            'created_utc': datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ'),
        }
        return self.write_json('manifest.json', manifest)
