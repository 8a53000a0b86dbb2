"""
Experiment runner: builds the trajectory, dispatches a solver, fits convergence rates and persists
histories, tangents and reports.
"""
import argparse
import dataclasses
import json
import logging
import sys
import time
from itertools import zip_longest
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from . import dao
from .base import ExperimentBase, experiment_action, registered_actions
from .cyclic_reduction import FlopModel, flop_estimate, solve_cr
from .dao import ExperimentConfig, SolveReport
from .dynamics import Trajectory, lorenz_trajectory
from .exceptions import EXIT_CONFIG_ERROR, EXIT_FAILURE, EXIT_OK, GuardViolation, LssError, SolverDivergence, \
    UserException
from .interface import CommonInterface, apply_overrides
from .kkt import BlockTridiag, KktBlocks, assemble_blocks, extreme_eigenvalues, rhs_vector, schur_blocks, \
    schur_operator
from .multigrid import CLASSIC, MATRIX_RESTRICTION, SOLUTION_RESTRICTION, MgConfig, averaging_weights, mg_solve, \
    restrict_solution
from .sensitivity import QuantityOfInterest, direct_solve, gradient, quantity_of_interest, recover_tangent, \
    time_average
from .smoothers import CONJUGATE_GRADIENT, GAUSS_SEIDEL, MINRES, SmootherSpec, conjugate_gradient, minres
from .table_schema import get_table_schema

# dense eigensolves of the spectrum probe are limited to this many block rows
SPECTRUM_GUARD_ROWS = 1024
MIN_FIT_POINTS = 3

SCHEME_TO_MG = {dao.CLASSIC_MG: CLASSIC, dao.MATRIX_MG: MATRIX_RESTRICTION, dao.SOLUTION_MG: SOLUTION_RESTRICTION}
DEFAULT_SMOOTHERS = {CLASSIC: GAUSS_SEIDEL, MATRIX_RESTRICTION: CONJUGATE_GRADIENT, SOLUTION_RESTRICTION: MINRES}


# ####### CONVERGENCE RATE

def _positive_prefix(values: np.ndarray) -> int:
    bad = np.nonzero(~(np.isfinite(values) & (values > 0)))[0]
    return int(bad[0]) if bad.size else values.size


def fit_convergence_rate(residuals: Sequence[float]) -> Tuple[float, float]:
    """
    Least-squares fit of log10 ||r|| = gamma log10 N + log10 C over cycles N = 1, 2, ...

    Args:
        residuals: residual of cycle 1, 2, ...

    Returns:
        slope gamma (the convergence rate is -gamma) and C

    Raises:
        ValueError: when fewer than 3 leading residuals are positive
    """
    values = np.asarray(residuals, dtype=float)
    usable = _positive_prefix(values)
    if usable < values.size:
        logging.warning(f'Non-positive residual at cycle {usable + 1}, fitting the first {usable} cycles only')
    if usable < MIN_FIT_POINTS:
        raise ValueError(f'A convergence rate needs at least {MIN_FIT_POINTS} positive residuals, got {usable}')
    cycles = np.arange(1, usable + 1)
    slope, intercept = np.polyfit(np.log10(cycles), np.log10(values[:usable]), 1)
    return float(slope), float(10.0 ** intercept)


def _fit_report(report: SolveReport):
    """Fits over every recorded cycle after the initial guess."""
    history = np.asarray(report.residual_history[1:], dtype=float)
    usable = _positive_prefix(history)
    if usable < MIN_FIT_POINTS:
        return
    report.gamma, report.fit_intercept = fit_convergence_rate(history[:usable])
    report.fit_range = [1, usable]


# ####### SOLVER DISPATCH

def mg_config(solver: dao.SolverConfig) -> MgConfig:
    """
    Raises:
        UserException: when the solver section does not describe a valid multigrid run
    """
    scheme = SCHEME_TO_MG[solver.scheme]
    try:
        smoother = SmootherSpec(kind=solver.smoother or DEFAULT_SMOOTHERS[scheme],
                                iterations=max(solver.nu1, solver.nu2), omega=solver.omega)
        return MgConfig(scheme=scheme, smoother=smoother, nu1=solver.nu1, nu2=solver.nu2,
                        averaging_order=solver.averaging_order, dt_c=solver.dt_c, alpha2=solver.alpha2,
                        max_cycles=solver.max_cycles, rel_tol=solver.rel_tol, coarse_solver=solver.coarse_solver)
    except ValueError as e:
        raise UserException(f'Invalid multigrid settings: {e}') from e


def _solve_system(cfg: ExperimentConfig, traj: Trajectory, blocks: KktBlocks,
                  qoi: QuantityOfInterest) -> Tuple[np.ndarray, SolveReport]:
    solver = cfg.solver
    b = rhs_vector(blocks)
    initial = float(np.linalg.norm(b))

    def gradient_of(w):
        return gradient(traj, recover_tangent(blocks, w), qoi)

    if solver.scheme in SCHEME_TO_MG:
        return mg_solve(traj, cfg.dynamics.params, cfg.dynamics.which, mg_config(solver), qoi)

    if solver.scheme in (dao.MINRES, dao.CG):
        gradients = [0.0]
        method = minres if solver.scheme == dao.MINRES else conjugate_gradient
        w, trace = method(schur_operator(blocks), np.zeros_like(b), b, solver.max_iters, rel_tol=solver.rel_tol,
                          callback=lambda x: gradients.append(gradient_of(x)))
        report = SolveReport(scheme=solver.scheme, residual_history=list(trace.residual_norms),
                             gradient_history=gradients,
                             estimated_flops=float(trace.iterations_run * blocks.m * blocks.n))
    elif solver.scheme == dao.CYCLIC_REDUCTION:
        w, report = solve_cr(schur_blocks(blocks), b)
        report.gradient_history = [0.0, gradient_of(w)]
    else:
        system = schur_blocks(blocks)
        w = direct_solve(system, b)
        report = SolveReport(scheme=solver.scheme,
                             residual_history=[initial, float(np.linalg.norm(b - system.matvec(w)))],
                             gradient_history=[0.0, gradient_of(w)])
    report.finalize(solver.rel_tol)
    return w, report


def _history_rows(report: SolveReport):
    for cycle, (residual, grad) in enumerate(zip_longest(report.residual_history, report.gradient_history)):
        yield cycle, residual, grad


def _tangent_rows(traj: Trajectory, v: np.ndarray, eta: np.ndarray):
    for i, (t, state, tangent) in enumerate(zip(traj.times, traj.states, v)):
        yield (t, *state, *tangent, eta[i - 1] if i > 0 else None)


def _persist(interface: CommonInterface, report: SolveReport):
    if interface.configuration.output.history:
        interface.write_table(get_table_schema('history'), _history_rows(report))
    interface.write_report(report)


def run_experiment(cfg: ExperimentConfig, interface: Optional[CommonInterface] = None) -> SolveReport:
    """
    Builds the trajectory, assembles the KKT system, solves it with the configured scheme and writes
    history.csv, tangent.csv and report.json to the output folder.

    Raises:
        SolverDivergence: after persisting the partial report
    """
    interface = interface or CommonInterface(cfg, logging_type=CommonInterface.LOGGING_TYPE_KEEP)
    start = time.perf_counter()
    params = cfg.dynamics.params
    qoi = quantity_of_interest(cfg.dynamics.qoi)
    traj = lorenz_trajectory(params, cfg.trajectory.dt, cfg.trajectory.m, cfg.trajectory.spinup,
                             cfg.trajectory.seed)
    blocks = assemble_blocks(traj, params, cfg.dynamics.which, cfg.solver.alpha2)

    try:
        w, report = _solve_system(cfg, traj, blocks, qoi)
    except SolverDivergence as e:
        if e.report is not None:
            e.report.config = cfg.to_dict()
            e.report.wall_time = time.perf_counter() - start
            _persist(interface, e.report)
        raise

    tangent = recover_tangent(blocks, w)
    report.final_gradient = gradient(traj, tangent, qoi)
    report.config = cfg.to_dict()
    _fit_report(report)
    report.wall_time = time.perf_counter() - start

    _persist(interface, report)
    if cfg.output.tangent:
        interface.write_table(get_table_schema('tangent'), _tangent_rows(traj, tangent.v, tangent.eta))
    logging.info(f'{cfg.solver.scheme}: d{qoi.name}/d{cfg.dynamics.which} = {report.final_gradient:.6f}, '
                 f'{report.cycles} cycles, max |eta| = {tangent.max_abs_eta:.3f}')
    return report


# ####### SWEEPS AND PROBES

def resolve_axis(axis: str) -> str:
    """
    Maps a bare field name such as `alpha2` to its dotted path `solver.alpha2`; dotted paths pass through.

    Raises:
        UserException: when no configuration section has the field
    """
    if '.' in axis:
        return axis
    for name, section in ExperimentConfig.SECTIONS.items():
        if axis in {f.name for f in dataclasses.fields(section)}:
            return f'{name}.{axis}'
    raise UserException(f'Sweep axis "{axis}" does not name a configuration field')


def sweep(cfg: ExperimentConfig, axis: str, values: List[Any],
          interface: Optional[CommonInterface] = None) -> List[tuple]:
    """
    One run per value with every other field held fixed. Failed runs become rows carrying the error.

    Returns:
        rows of (value, gamma, cycles_to_tol, flops, final_gradient, error), also written to sweep.csv
    """
    interface = interface or CommonInterface(cfg, logging_type=CommonInterface.LOGGING_TYPE_KEEP)
    path = resolve_axis(axis)
    base = cfg.to_dict()
    rows = []
    for value in values:
        folder = Path(cfg.output.folder).joinpath(f'{path}={value}').as_posix()
        data = apply_overrides(base, [f'{path}={json.dumps(value)}', f'output.folder={json.dumps(folder)}'])
        try:
            report = run_experiment(ExperimentConfig.from_dict(data))
            rows.append((value, report.gamma, report.cycles_to_tol, report.estimated_flops, report.final_gradient,
                         None))
        except (LssError, UserException, ValueError) as e:
            logging.warning(f'Sweep run {path}={value} failed: {e}')
            rows.append((value, None, None, None, None, str(e)))
    interface.write_table(get_table_schema('sweep'), rows)
    return rows


def condition_summary(system: BlockTridiag, max_rows: int = SPECTRUM_GUARD_ROWS) -> Tuple[float, float, float]:
    """Returns (lambda_min, lambda_max, kappa) of a symmetric positive definite system."""
    lambda_min, lambda_max = extreme_eigenvalues(system, max_rows=max_rows)
    return lambda_min, lambda_max, lambda_max / lambda_min


def spectrum_probe(cfg: ExperimentConfig, coarsen_levels: int,
                   interface: Optional[CommonInterface] = None) -> List[tuple]:
    """
    Extreme eigenvalues of the Schur system re-assembled on the trajectory restricted `coarsen_levels` times.

    Returns:
        rows of (level, dt, lambda_max, lambda_min, kappa), also written to spectrum.csv

    Raises:
        GuardViolation: when the fine system exceeds the dense eigensolve guard
    """
    interface = interface or CommonInterface(cfg, logging_type=CommonInterface.LOGGING_TYPE_KEEP)
    if cfg.trajectory.m > SPECTRUM_GUARD_ROWS:
        raise GuardViolation(f'Spectrum probe refused: m={cfg.trajectory.m} exceeds the guard of '
                             f'{SPECTRUM_GUARD_ROWS}')
    if cfg.trajectory.m % 2 ** coarsen_levels:
        raise UserException(f'm={cfg.trajectory.m} cannot be coarsened {coarsen_levels} times')
    params = cfg.dynamics.params
    stencil = averaging_weights(cfg.solver.averaging_order)
    traj = lorenz_trajectory(params, cfg.trajectory.dt, cfg.trajectory.m, cfg.trajectory.spinup,
                             cfg.trajectory.seed)
    rows = []
    for level in range(coarsen_levels + 1):
        if level:
            traj = restrict_solution(traj, stencil)
        system = schur_blocks(assemble_blocks(traj, params, cfg.dynamics.which, cfg.solver.alpha2))
        lambda_min, lambda_max, kappa = condition_summary(system)
        logging.debug(f'level {level}, dt={traj.dt:g}: lambda_max={lambda_max:.4e}, kappa={kappa:.4e}')
        rows.append((level, traj.dt, lambda_max, lambda_min, kappa))
    interface.write_table(get_table_schema('spectrum'), rows)
    return rows


def flops_table(model: FlopModel, max_level: int = 4) -> List[tuple]:
    """Rows of (m, levels, cr_flops, jacobi_flops, cr_expression, jacobi_expression) for m = 3, 5, 9, ..."""
    rows = []
    for level in range(1, max_level + 1):
        estimate = flop_estimate(model, 2 ** level + 1)
        rows.append((estimate.m, estimate.levels, estimate.cr_flops, estimate.jacobi_flops,
                     estimate.cr_expression, estimate.jacobi_expression))
    return rows


# ####### ACTIONS

class Experiment(ExperimentBase):

    def __init__(self, configuration: ExperimentConfig, arguments: Optional[argparse.Namespace] = None,
                 logging_type: Optional[str] = None):
        super().__init__(configuration=configuration, logging_type=logging_type)
        self.arguments = arguments or argparse.Namespace()

    def _argument(self, name: str, default=None):
        return getattr(self.arguments, name, default)

    def solve(self) -> SolveReport:
        return run_experiment(self.configuration, self)

    @experiment_action('integrate')
    def integrate(self) -> Trajectory:
        cfg = self.configuration
        traj = lorenz_trajectory(cfg.dynamics.params, cfg.trajectory.dt, cfg.trajectory.m, cfg.trajectory.spinup,
                                 cfg.trajectory.seed)
        if cfg.output.trajectory:
            self.write_table(get_table_schema('trajectory'),
                             ((t, *state) for t, state in zip(traj.times, traj.states)))
        qoi = quantity_of_interest(cfg.dynamics.qoi)
        logging.info(f'Integrated {traj.m} steps, time average of {qoi.name}: {time_average(traj, qoi):.6f}')
        return traj

    @experiment_action('sweep')
    def run_sweep(self) -> List[tuple]:
        axis = self._argument('axis')
        raw_values = self._argument('values')
        if not axis or not raw_values:
            raise UserException('The sweep action needs --axis and --values')
        return sweep(self.configuration, axis, parse_values(raw_values), self)

    @experiment_action('spectrum')
    def probe_spectrum(self) -> List[tuple]:
        return spectrum_probe(self.configuration, self._argument('levels', 5), self)

    @experiment_action('flops')
    def estimate_flops(self) -> List[tuple]:
        try:
            model = FlopModel(p=self._argument('p', 18), q=self._argument('q', 3), n=self._argument('n', 3))
            rows = flops_table(model, self._argument('max_level', 4))
        except ValueError as e:
            raise UserException(str(e)) from e
        self.write_table(get_table_schema('flops'), rows)
        return rows


def parse_values(raw: str) -> List[Any]:
    """Comma separated sweep values, each parsed as JSON when possible."""
    values = []
    for item in raw.split(','):
        item = item.strip()
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            values.append(item)
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=argparse.SUPPRESS, help='JSON experiment configuration')
    common.add_argument('--out', default=argparse.SUPPRESS, help='output folder, overrides output.folder')
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='overrides trajectory.seed')
    common.add_argument('--override', action='append', default=argparse.SUPPRESS, metavar='KEY=VALUE',
                        help='dotted-path configuration override, may be repeated')

    parser = argparse.ArgumentParser(prog='lss-shadowing', parents=[common],
                                     description='Least squares shadowing sensitivity of the Lorenz system')
    commands = parser.add_subparsers(dest='command')
    commands.add_parser('integrate', parents=[common], help='spin up and record a trajectory')
    commands.add_parser('solve', parents=[common], help='solve the shadowing system and compute the gradient')
    sweep_parser = commands.add_parser('sweep', parents=[common], help='repeat solve over one configuration field')
    sweep_parser.add_argument('--axis', required=True, help='configuration field, e.g. solver.alpha2')
    sweep_parser.add_argument('--values', required=True, help='comma separated values')
    spectrum_parser = commands.add_parser('spectrum', parents=[common], help='extreme eigenvalues per grid level')
    spectrum_parser.add_argument('--levels', type=int, default=5, help='number of coarsenings')
    flops_parser = commands.add_parser('flops', parents=[common], help='cyclic reduction operation counts')
    flops_parser.add_argument('--p', type=int, default=18, help='flops of one Jacobian-block multiply')
    flops_parser.add_argument('--q', type=int, default=3, help='iterations of one inner block solve')
    flops_parser.add_argument('--n', type=int, default=3, help='state dimension')
    flops_parser.add_argument('--max-level', dest='max_level', type=int, default=4)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Command line entry point.

    Returns:
        0 on success, 2 on configuration errors, 3 on solver divergence, 4 on guard violations, 1 otherwise
    """
    args = build_parser().parse_args(argv)
    try:
        configuration = CommonInterface.load_configuration(getattr(args, 'config', None),
                                                           getattr(args, 'override', None),
                                                           getattr(args, 'seed', None),
                                                           getattr(args, 'out', None))
        action = args.command or configuration.action
        if action not in registered_actions():
            raise UserException(f'Unknown action "{action}". Supported actions are: '
                                f'{", ".join(registered_actions())}')
        Experiment(configuration, args).execute_action(action)
    except UserException as exc:
        logging.exception(exc)
        return EXIT_CONFIG_ERROR
    except LssError as exc:
        logging.exception(exc)
        return exc.exit_code
    except Exception as exc:
        logging.exception(exc)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
