"""
Configuration handling for SandHUM
"""

import copy
import json
import os
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import yaml
import xdg.BaseDirectory

from core.assembly import BoundaryFamily, Mesh
from core.beam_model import LayerStack, TimeInterpretation, min_control_time, validate
from core.elements import LayerOrder
from core.errors import ConfigError, ValidationError
from core.observability import Ensemble

logger = logging.getLogger('sandhum.core.config')

OUTPUT_DIR_ENV = 'SANDHUM_OUTPUT_DIR'

DEFAULT_CONFIG = {
    'bc': 'h-N',
    'mesh': {
        'n_elements': 32,
        'y_order': 'quadratic',
    },
    'time': {
        'T': None,
        'T_factor': 1.5,  # multiple of the physical tau, used when T is not given
        'dt': None,
        'n_steps': 2000,
    },
    'ensemble': {
        'n_samples': 16,
        'seed': None,  # falls back to the top-level seed
        'mode_band': 10,
        'localized': False,
        'support': 0.1,
    },
    'control': {
        'filter_band': 20,
        'tol': 1e-10,
        'steering_tol': 1e-6,
        'max_iter': None,
        'target_modes': 5,
        'smooth_harmonics': None,
    },
    'sweep': {
        'T_grid': None,
        'T_factors': [0.2, 0.5, 0.8, 1.0, 1.2, 1.5, 2.0],
    },
    'eigen': {
        'count': 20,
        'damping_on': True,
    },
    'simulate': {
        'initial_modes': 3,
        'snapshots': [],
        'export_operators': False,
    },
    'output_dir': None,
    'seed': 0,
    'workers': 1,
}


def default_output_dir() -> str:
    return os.path.join(xdg.BaseDirectory.save_data_path('sandhum'), 'runs')


class Config:
    """Configuration manager for SandHUM.

    Experiment files are YAML, JSON or TOML and are merged over DEFAULT_CONFIG.
    """

    def __init__(self, config_path: str):
        self.config_path = config_path
        self.config_dir = os.path.dirname(config_path)
        self.config = self.load()

    @classmethod
    def from_file(cls, path: str) -> 'Config':
        if not os.path.isfile(path) or not os.access(path, os.R_OK):
            raise ConfigError(f"cannot read config file {path}", unreadable=True)
        return cls(path)

    def _read(self) -> Dict[str, Any]:
        try:
            with open(self.config_path, 'rb') as f:
                raw = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {self.config_path}: {e}", unreadable=True) from e

        try:
            if self.config_path.endswith('.toml'):
                data = tomllib.loads(raw.decode('utf-8'))
            else:
                # JSON is a subset of YAML
                data = yaml.safe_load(raw)
        except (tomllib.TOMLDecodeError, yaml.YAMLError, UnicodeDecodeError) as e:
            logger.error(f"Error parsing config {self.config_path}: {e}")
            raise ConfigError(f"cannot parse {self.config_path}: {e}") from e

        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"{self.config_path}: top level must be a mapping")
        return data

    def load(self) -> Dict[str, Any]:
        """Experiment file merged over the defaults"""
        if not os.path.exists(self.config_path):
            raise ConfigError(f"config file {self.config_path} does not exist", unreadable=True)
        merged = copy.deepcopy(DEFAULT_CONFIG)
        _deep_update(merged, self._read())
        logger.info(f"Loaded configuration from {self.config_path}")
        return merged

    def set(self, key: str, value) -> None:
        """Set a configuration value"""
        parts = key.split('.')
        current = self.config
        for part in parts[:-1]:
            if not isinstance(current.get(part), dict):
                current[part] = {}
            current = current[part]
        current[parts[-1]] = value

    def get_all(self) -> Dict[str, Any]:
        """Get the entire configuration"""
        return self.config

    def apply_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                        assignments: Sequence[str] = ()) -> None:
        """--set key.path=value pairs, then --seed / --output-dir, then the environment"""
        for item in assignments:
            if '=' not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, text = item.split('=', 1)
            try:
                value = yaml.safe_load(text)
            except yaml.YAMLError as e:
                raise ConfigError(f"--set {key}: cannot parse {text!r}: {e}") from e
            self.set(key.strip(), value)
            logger.debug(f"Override {key.strip()} = {value!r}")
        if seed is not None:
            self.set('seed', seed)
        if output_dir is not None:
            self.set('output_dir', output_dir)
        elif os.environ.get(OUTPUT_DIR_ENV):
            self.set('output_dir', os.environ[OUTPUT_DIR_ENV])


def _deep_update(target, source):
    """Recursively update a dict."""
    for key, value in source.items():
        if key in target and isinstance(target[key], dict) and isinstance(value, dict):
            _deep_update(target[key], value)
        else:
            target[key] = value


def canonical_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)


@dataclass(frozen=True)
class ControlSettings:
    filter_band: int = 20
    tol: float = 1e-10
    steering_tol: float = 1e-6
    max_iter: Optional[int] = None
    target_modes: int = 5
    smooth_harmonics: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Resolved, validated experiment"""
    stack: LayerStack
    bc: BoundaryFamily
    mesh: Mesh
    T: float
    n_steps: int
    ensemble: Ensemble
    control: ControlSettings
    T_grid: Tuple[float, ...]
    eigen_count: int
    damping_on: bool
    initial_modes: int
    snapshots: Tuple[float, ...]
    export_operators: bool
    output_dir: str
    seed: int
    workers: int
    resolved: Dict[str, Any]

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def tau(self) -> Dict[str, float]:
        return {i.value: min_control_time(self.stack, i) for i in TimeInterpretation}

    @classmethod
    def from_config(cls, config: Config) -> 'ExperimentConfig':
        data = config.get_all()
        diagnostics = []

        stack = None
        if not isinstance(data.get('stack'), dict):
            diagnostics.append('stack: block missing')
        else:
            try:
                stack = LayerStack.from_dict(data['stack'])
                diagnostics += [f"stack.{d}" for d in validate(stack)]
            except ValidationError as e:
                diagnostics += [f"stack.{d}" for d in e.diagnostics]
            except (TypeError, ValueError) as e:
                diagnostics.append(f"stack: {e}")

        try:
            bc = BoundaryFamily.parse(data.get('bc'))
        except ValueError as e:
            diagnostics.append(f"bc: {e}")
            bc = None

        mesh_block = data.get('mesh') or {}
        try:
            y_order = LayerOrder(mesh_block.get('y_order', 'quadratic'))
        except ValueError:
            diagnostics.append(f"mesh.y_order: unknown order {mesh_block.get('y_order')!r}")
            y_order = LayerOrder.QUADRATIC
        n_elements = mesh_block.get('n_elements')
        if not isinstance(n_elements, int) or n_elements < 1:
            diagnostics.append(f"mesh.n_elements: must be a positive integer, got {n_elements!r}")

        time_block = data.get('time') or {}
        ctrl_block = data.get('control') or {}
        for key, value in (('time.T', time_block.get('T')), ('time.T_factor', time_block.get('T_factor')),
                           ('time.dt', time_block.get('dt')), ('control.tol', ctrl_block.get('tol')),
                           ('control.steering_tol', ctrl_block.get('steering_tol'))):
            if value is not None and (not isinstance(value, (int, float)) or value <= 0):
                diagnostics.append(f"{key}: must be positive, got {value!r}")
        n_steps = time_block.get('n_steps')
        if time_block.get('dt') is None and (not isinstance(n_steps, int) or n_steps < 1):
            diagnostics.append(f"time.n_steps: must be a positive integer, got {n_steps!r}")

        if diagnostics:
            raise ValidationError(diagnostics)

        tau = min_control_time(stack, TimeInterpretation.PHYSICAL)
        T = float(time_block['T']) if time_block.get('T') is not None else float(time_block['T_factor']) * tau
        if time_block.get('dt') is not None:
            n_steps = max(1, int(round(T / float(time_block['dt']))))

        sweep = data.get('sweep') or {}
        if sweep.get('T_grid') is not None:
            T_grid = tuple(float(t) for t in sweep['T_grid'])
        else:
            T_grid = tuple(float(f) * tau for f in (sweep.get('T_factors') or []))
        if any(b <= a for a, b in zip(T_grid, T_grid[1:])) or any(t <= 0 for t in T_grid):
            raise ValidationError(['sweep.T_grid: must be positive and strictly increasing'])

        seed = int(data.get('seed') or 0)
        ens = data.get('ensemble') or {}
        band = ens.get('mode_band', 10)
        ensemble = Ensemble(
            n_samples=int(ens.get('n_samples', 16)),
            seed=int(ens['seed']) if ens.get('seed') is not None else seed,
            mode_band=int(band) if isinstance(band, int) else tuple(int(b) for b in band),
            localized=bool(ens.get('localized', False)),
            support=float(ens.get('support', 0.1)),
        )
        control = ControlSettings(
            filter_band=int(ctrl_block.get('filter_band', 20)),
            tol=float(ctrl_block.get('tol', 1e-10)),
            steering_tol=float(ctrl_block.get('steering_tol', 1e-6)),
            max_iter=ctrl_block.get('max_iter'),
            target_modes=int(ctrl_block.get('target_modes', 5)),
            smooth_harmonics=ctrl_block.get('smooth_harmonics'),
        )
        simulate = data.get('simulate') or {}
        eigen = data.get('eigen') or {}

        resolved = copy.deepcopy(data)
        resolved['time'] = dict(time_block, T=T, n_steps=n_steps)

        return cls(
            stack=stack, bc=bc, mesh=Mesh.uniform(stack.length, n_elements, y_order),
            T=T, n_steps=int(n_steps), ensemble=ensemble, control=control, T_grid=T_grid,
            eigen_count=int(eigen.get('count', 20)), damping_on=bool(eigen.get('damping_on', True)),
            initial_modes=int(simulate.get('initial_modes', 3)),
            snapshots=tuple(float(t) for t in simulate.get('snapshots') or []),
            export_operators=bool(simulate.get('export_operators', False)),
            output_dir=os.path.expanduser(data.get('output_dir') or default_output_dir()),
            seed=seed, workers=max(1, int(data.get('workers') or 1)), resolved=resolved,
        )
