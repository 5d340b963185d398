"""
Command-line front end for SandHUM
"""

import argparse
import logging
import sys
from typing import Callable, List, Optional

import numpy as np

from core.assembly import DiscreteSystem, assemble, export_triplets
from core.config import Config, ExperimentConfig
from core.dynamics import energy_identity_residual, integrate
from core.errors import ConfigError, SandhumError, SolverError, ValidationError
from core.hum_control import smooth_controls, synthesize_control
from core.observability import estimate_constants, time_sweep
from core.results import ResultWriter
from core.spectral import decoupled_frequency, eigen_report, eigenpairs, spectrum_frame, undamped_modes, \
    uniqueness_margin

logger = logging.getLogger('sandhum.cli')

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_USAGE = 64
EXIT_NO_INPUT = 66

COMMANDS = ('validate', 'simulate', 'eigen', 'observe', 'sweep', 'control')


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors instead of exiting with 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='sandhum', description='Multilayer sandwich beam simulation, observability and HUM control')
    parser.add_argument('command', choices=COMMANDS, help='subcommand to run')
    parser.add_argument('config', help='experiment file (.yaml, .json or .toml)')
    parser.add_argument('--seed', type=int, default=None, help='override the experiment seed')
    parser.add_argument('--output-dir', default=None, help='override output_dir')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config field, e.g. --set time.n_steps=4000')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    return parser


def load_experiment(path: str, args: argparse.Namespace) -> ExperimentConfig:
    config = Config.from_file(path)
    config.apply_overrides(seed=args.seed, output_dir=args.output_dir, assignments=args.set)
    return ExperimentConfig.from_config(config)


def _system(experiment: ExperimentConfig) -> DiscreteSystem:
    return assemble(experiment.stack, experiment.mesh, experiment.bc)


def _modal_state(system: DiscreteSystem, n_modes: int, seed: int) -> np.ndarray:
    """Random combination of the lowest undamped modes, displacement and velocity"""
    omega2, phi = undamped_modes(system, n_modes)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(n_modes), rng.standard_normal(n_modes)
    return np.concatenate([phi @ (a / np.sqrt(omega2)), phi @ b])


def cmd_validate(experiment: ExperimentConfig, writer: Optional[ResultWriter]) -> None:
    system = _system(experiment)
    logger.info(f"Configuration valid: {system.bc.value}, {system.n} dofs, "
                f"T={experiment.T:.6g}, dt={experiment.dt:.6g}, tau={experiment.tau}")


def cmd_simulate(experiment: ExperimentConfig, writer: ResultWriter) -> None:
    system = _system(experiment)
    Y0 = _modal_state(system, experiment.initial_modes, experiment.seed)
    traj = integrate(system, Y0, experiment.T, n_steps=experiment.n_steps)
    writer.write_csv('trajectory.csv', traj.to_frame())
    e0 = traj.energies[0]
    writer.write_json('simulate.json', {
        'bc': system.bc.value,
        'T': experiment.T,
        'dt': experiment.dt,
        'n_steps': experiment.n_steps,
        'energy_initial': e0,
        'energy_final': traj.energies[-1],
        'max_relative_energy_change': float(np.max(np.abs(traj.energies - e0)) / e0),
        'energy_identity_residual': energy_identity_residual(traj),
    })
    if experiment.snapshots:
        traj.save_snapshots(writer.record('snapshots.npz'), experiment.snapshots)
    if experiment.export_operators:
        for which in ('mass', 'stiffness', 'damping'):
            export_triplets(system, writer.record(f'{which}.txt'), which)


def cmd_eigen(experiment: ExperimentConfig, writer: ResultWriter) -> None:
    system = _system(experiment)
    pairs = eigenpairs(system, experiment.eigen_count, damping_on=experiment.damping_on)
    undamped = pairs if not system.is_damped or not experiment.damping_on else \
        eigenpairs(system, experiment.eigen_count, damping_on=False)
    margin = uniqueness_margin(system, undamped, system.bc)
    report = eigen_report(system, pairs, margin)
    blocks = ['beam'] + [f'layer{j + 1}' for j in range(system.stack.n_core + 1)]
    report['decoupled'] = {block: [decoupled_frequency(system.stack, system.bc, block, k) for k in range(1, 6)]
                           for block in blocks}
    writer.write_json('eigen.json', report)
    writer.write_csv('spectrum.csv', spectrum_frame(pairs))


def cmd_observe(experiment: ExperimentConfig, writer: ResultWriter) -> None:
    system = _system(experiment)
    report = estimate_constants(system, experiment.T, experiment.ensemble, n_steps=experiment.n_steps,
                                workers=experiment.workers)
    writer.write_json('observability.json', dict(report.to_dict(), seed=experiment.ensemble.seed))


def cmd_sweep(experiment: ExperimentConfig, writer: ResultWriter) -> None:
    if not experiment.T_grid:
        raise ValidationError(['sweep: T_grid or T_factors required'])
    system = _system(experiment)
    table = time_sweep(system, experiment.T_grid, experiment.ensemble, dt=experiment.dt,
                       workers=experiment.workers)
    writer.write_csv('sweep.csv', table)


def cmd_control(experiment: ExperimentConfig, writer: ResultWriter) -> None:
    system = _system(experiment)
    settings = experiment.control
    target = _modal_state(system, min(settings.target_modes, settings.filter_band), experiment.seed)
    solution = synthesize_control(system, target, experiment.T, n_steps=experiment.n_steps, tol=settings.tol,
                                  filter_band=settings.filter_band, max_iter=settings.max_iter,
                                  steering_tol=settings.steering_tol)
    writer.write_json('control.json', solution.to_dict())
    frame = solution.to_frame()
    if settings.smooth_harmonics:
        smoothed = smooth_controls(solution.times, solution.controls, int(settings.smooth_harmonics))
        for k, column in enumerate(frame.columns[1:]):
            frame[f'{column}_smooth'] = smoothed[:, k]
    writer.write_csv('control.csv', frame)
    steering = integrate(system, target, solution.T, n_steps=solution.times.size - 1, controls=solution.controls)
    writer.write_csv('steering.csv', steering.to_frame())


HANDLERS = {
    'validate': cmd_validate,
    'simulate': cmd_simulate,
    'eigen': cmd_eigen,
    'observe': cmd_observe,
    'sweep': cmd_sweep,
    'control': cmd_control,
}


def run(argv: List[str], setup: Optional[Callable[[int], None]] = None) -> int:
    """Parse argv, run one subcommand and return the process exit code"""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"sandhum: {e}", file=sys.stderr)
        return EXIT_USAGE

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    if setup is not None:
        setup(level)
    else:
        logging.getLogger('sandhum').setLevel(level)

    try:
        experiment = load_experiment(args.config, args)
        writer = None
        if args.command != 'validate':
            writer = ResultWriter(experiment.output_dir, args.command)
        HANDLERS[args.command](experiment, writer)
        if writer is not None:
            writer.write_manifest(experiment)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_NO_INPUT if e.unreadable else EXIT_VALIDATION
    except ValidationError as e:
        for line in e.diagnostics:
            print(line, file=sys.stderr)
        logger.error(f"Validation failed with {len(e.diagnostics)} problems")
        return EXIT_VALIDATION
    except SolverError as e:
        logger.error(f"Solver failure: {e}")
        print(f"sandhum: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except SandhumError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"sandhum: {e}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK
