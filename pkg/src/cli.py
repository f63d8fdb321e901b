"""
Experiment runner: one subcommand per experiment, CSV artifacts and a
pass/fail summary on stdout
"""

import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from .config.logging_config import setup_logging
from .config.settings import (
    PARSERS,
    ExperimentConfig,
    config_from_env,
    config_hash,
    load_config,
)
from .tails.brownian_paths import (
    ExitSide,
    StopRule,
    exit_tail_reflection_bound,
    exit_time_tail_probe,
    fit_exit_tail_decay,
    green_function_error,
    local_time_rows,
    mean_local_time_profile,
)
from .tails.constants import (
    DEFAULT_DEPTH,
    DEFAULT_FINE_OFFSET,
    DENSITY_ITERATIONS,
    EXIT_PROBE_MAX_A,
    EXIT_PROBE_MIN_A,
    GRID_N_GEOMETRIC,
    GRID_N_LINEAR,
    MAX_LEVEL_RAISE,
)
from .tails.exceptions import (
    EXIT_INTERNAL,
    EXIT_INVALID,
    InsufficientDataError,
    NoFeasibleTauError,
    SmallValueError,
    ValidationError,
)
from .tails.galton_watson import (
    GridSpec,
    density_fixed_point,
    density_rows,
    tail_from_density,
)
from .tails.gw_tails import TailEstimate, TailMethod, gw_tail_experiment, tail_rows
from .tails.intersection_tails import (
    IntersectionFunctional,
    SelfIntersectionChebyshev,
    StartConfiguration,
    attach_self_ilt_upper_bounds,
    attach_two_phase_bounds,
    clearing_level,
    disjointness_bounds,
    disjointness_probe,
    estimate_cq,
    estimate_minimal_crossing,
    estimate_tail,
    minimal_crossing_probability,
    phase_one_probability,
    phase_threshold,
    scaling_result,
    self_ilt_chebyshev_upper,
    self_ilt_strategy_bound,
)
from .tails.offspring import (
    OffspringDistribution,
    derive_params,
    extinction_probability,
    prune,
)
from .utils.parallel import WorkQueue

logger = logging.getLogger(__name__)

TAIL_HEADER = ["epsilon", "p_hat", "ci_low", "ci_high", "method"]


@dataclass
class CommandResult:
    header: List[str]
    rows: List[Sequence[Any]]
    summary: List[str] = field(default_factory=list)
    passed: Optional[bool] = None


# Helpers


def _verdict(passed: bool) -> str:
    return "PASS" if passed else "FAIL"


def _require_distribution(config: ExperimentConfig) -> OffspringDistribution:
    if not config.distribution:
        raise ValidationError("This command needs --dist")
    return OffspringDistribution.parse(config.distribution)


def _stop_rule(text: Optional[str]) -> StopRule:
    aliases = {"exit": StopRule.EXIT_UNIT_INTERVAL, "fixed_time": StopRule.FIXED_STEPS}
    if text is None:
        return StopRule.EXIT_UNIT_INTERVAL
    key = text.strip().lower().replace("-", "_")
    if key in aliases:
        return aliases[key]
    try:
        return StopRule(key)
    except ValueError as e:
        raise ValidationError(f"Unknown stop rule {text!r}") from e


def _slope_check(estimate: TailEstimate, tolerance: float) -> Tuple[List[str], bool]:
    slope = estimate.slope
    target = estimate.target_exponent
    passed = math.isfinite(slope) and abs(slope - target) <= tolerance * abs(target)
    stderr = estimate.fit.slope_stderr if estimate.fit else math.nan
    lines = [
        f"fit: {estimate.fit_kind}",
        f"fitted exponent: {slope:.4f} (stderr {stderr:.4f})",
        f"target exponent: {target:.4f}",
        f"tolerance: {tolerance:g} relative -> {_verdict(passed)}",
    ]
    return lines, passed


def _tail_result(estimate: TailEstimate, tolerance: float) -> CommandResult:
    labels = list(estimate.labels)
    extra = [estimate.labels[k] for k in labels]
    rows = [list(row) + extra for row in tail_rows(estimate)]
    summary, passed = _slope_check(estimate, tolerance)
    summary.extend(f"{k}: {v:.6g}" for k, v in sorted(estimate.extra.items()))
    return CommandResult(
        header=TAIL_HEADER + labels, rows=rows, summary=summary, passed=passed
    )


def _functional(config: ExperimentConfig, default_m: int) -> IntersectionFunctional:
    m = config.m or (len(config.q) if config.q else default_m)
    q = config.q or (1.0,) * m
    if len(q) == 1 and m > 1:
        q = q * m
    rule = _stop_rule(config.stop_rule)
    return IntersectionFunctional(
        m=m, q_exponents=tuple(q), stop_rule=rule, horizon=config.horizon or 1.0
    )


def _grid_spec(config: ExperimentConfig) -> GridSpec:
    return GridSpec(
        n_geometric=config.grid_geometric or GRID_N_GEOMETRIC,
        n_linear=config.grid_linear or GRID_N_LINEAR,
    )


def _tail_level(
    functional: IntersectionFunctional, config: ExperimentConfig, queue: WorkQueue
) -> int:
    """The requested level, raised until explicit eps values clear the floor"""
    if not config.epsilons:
        return config.level
    level = clearing_level(
        functional,
        config.epsilons,
        config.level,
        config.level + MAX_LEVEL_RAISE,
        max(config.budget // 4, 1),
        config.seed,
        queue,
    )
    if level != config.level:
        logger.warning(
            f"Raised level {config.level} to {level} to clear the discretization floor"
        )
    return level


# Commands


def cmd_params(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Branching parameters and regime of an offspring law"""
    dist = _require_distribution(config)
    rows: List[Sequence[Any]] = []
    summary = [f"distribution: {dist.describe()}"]
    if dist.prob(0) > 0.0:
        q = extinction_probability(dist)
        rows.append(("extinction_probability", q))
        summary.append(f"extinction probability: {q:.6g}; using the pruned law")
        dist = prune(dist)
        summary.append(f"pruned: {dist.describe()}")
    params = derive_params(dist)
    rows.extend(
        [
            ("mu", params.mu),
            ("p1", params.p1),
            ("nu", params.nu),
            ("regime", params.regime.value),
        ]
    )
    summary.extend([f"mu={params.mu:.6g}", f"regime={params.regime.value}"])
    if params.tau is not None:
        rows.append(("tau", params.tau))
        summary.append(f"tau={params.tau:.6g}")
    if params.beta is not None:
        rows.extend([("beta", params.beta), ("beta_ratio", params.beta_ratio)])
        summary.append(f"beta={params.beta:.6g}, beta/(1-beta)={params.beta_ratio:.6g}")
    return CommandResult(header=["parameter", "value"], rows=rows, summary=summary)


def cmd_prune(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Extinction probability and the law of surviving lines"""
    dist = _require_distribution(config)
    q = extinction_probability(dist)
    pruned = prune(dist)
    support = range(len(pruned.truncated_probs()))
    rows = [(k, pruned.prob(k)) for k in support if pruned.prob(k) > 0.0]
    mean_ok = math.isclose(pruned.mean, dist.mean, rel_tol=1e-9)
    summary = [
        f"extinction probability: {q:.6g}",
        f"pruned: {pruned.describe()}",
        f"mean preserved: {pruned.mean:.6g} vs {dist.mean:.6g} -> {_verdict(mean_ok)}",
    ]
    return CommandResult(
        header=["k", "p_k"], rows=rows, summary=summary, passed=mean_ok
    )


def cmd_gw_density(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Discretized law of the martingale limit W"""
    dist = _require_distribution(config)
    grid = density_fixed_point(
        dist, _grid_spec(config), config.iterations or DENSITY_ITERATIONS
    )
    summary = [
        f"iterations: {grid.iterations}, converged: {grid.converged}, "
        f"last TV change: {grid.last_tv:.3e}",
        f"mean: {grid.mean:.6g}, mass beyond x_max: {grid.overflow_mass:.3e}",
    ]
    for eps in config.epsilons or ():
        summary.append(f"P{{W < {eps:g}}} = {tail_from_density(grid, eps):.6g}")
    summary.extend(grid.notes)
    return CommandResult(
        header=["bin_low", "bin_high", "mass"],
        rows=density_rows(grid),
        summary=summary,
        passed=grid.converged,
    )


def cmd_gw_tail(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Lower tail of W and its exponent fit"""
    dist = _require_distribution(config)
    try:
        method = TailMethod(config.method or TailMethod.DENSITY.value)
    except ValueError as e:
        raise ValidationError(f"Unknown method {config.method!r}") from e
    estimate = gw_tail_experiment(
        dist,
        eps_grid=config.epsilons,
        method=method,
        budget=config.budget,
        seed=config.seed,
        depth=config.depth or DEFAULT_DEPTH,
        iterations=config.iterations or DENSITY_ITERATIONS,
        grid_spec=_grid_spec(config),
        queue=queue,
    )
    return _tail_result(estimate, config.tolerance)


def cmd_bm_green(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Mean local-time profile against the Green function"""
    profile = mean_local_time_profile(config.level, config.budget, config.seed, queue)
    error = green_function_error(profile)
    passed = error < config.tolerance
    rows = [(s, x, v, 1.0 - abs(x)) for s, x, v in local_time_rows(profile)]
    summary = [
        f"level {config.level}, {config.budget} exit walks",
        f"sup |mean L - (1 - |x|)| = {error:.4f} against {config.tolerance:g} "
        f"-> {_verdict(passed)}",
    ]
    return CommandResult(
        header=["site", "x", "L_hat", "green"],
        rows=rows,
        summary=summary,
        passed=passed,
    )


def cmd_ilt_tail(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Mutual intersection local time tail and exponent fit"""
    functional = _functional(config, default_m=2)
    if functional.m < 2:
        raise ValidationError("ilt-tail needs m >= 2; use silt-tail for one walk")
    level = _tail_level(functional, config, queue)
    estimate = estimate_tail(
        functional,
        level,
        config.epsilons,
        config.budget,
        config.seed,
        queue=queue,
    )
    if functional.stop_rule is not StopRule.EXIT_UNIT_INTERVAL:
        return _tail_result(estimate, config.tolerance)

    factor = config.phase_radius or 1.0
    orientation = StartConfiguration(
        orientation=frozenset(config.orientation or (1,)),
        start_sites=(0,) * functional.m,
    )
    delta = phase_one_probability(
        functional,
        orientation,
        level,
        config.budget,
        config.seed,
        threshold=phase_threshold(functional, factor),
        queue=queue,
    )
    attach_two_phase_bounds(estimate, functional, delta.p_hat, factor)
    measured = {p.epsilon: p for p in estimate.points}
    violations = [b for b in estimate.bounds if b.p_hat > measured[b.epsilon].ci_high]
    result = _tail_result(estimate, config.tolerance)
    result.summary.append(
        f"phase-one delta: {delta.p_hat:.4g} "
        f"[{delta.ci_low:.4g}, {delta.ci_high:.4g}], "
        f"two-phase bound violations: {len(violations)}"
    )
    return result


def cmd_silt_tail(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Self-intersection local time tail with strategy and Chebyshev bounds"""
    q = config.q[0] if config.q else 1.0
    functional = IntersectionFunctional(
        m=1, q_exponents=(q,), stop_rule=_stop_rule(config.stop_rule)
    )
    level = _tail_level(functional, config, queue)
    estimate = estimate_tail(
        functional,
        level,
        config.epsilons,
        config.budget,
        config.seed,
        queue=queue,
    )

    fine_offset = config.fine_offset
    if fine_offset is None:
        fine_offset = DEFAULT_FINE_OFFSET
    upper: Optional[SelfIntersectionChebyshev] = None
    try:
        upper = self_ilt_chebyshev_upper(
            q, config.budget, config.seed, fine_offset, queue=queue
        )
        attach_self_ilt_upper_bounds(estimate, upper)
        cq = upper.cq
    except NoFeasibleTauError:
        logger.warning("No Chebyshev bound available; skipping upper bound curve")
        cq = estimate_cq(q, fine_offset, config.budget, config.seed, queue)
    result = _tail_result(estimate, config.tolerance)
    result.summary.append(f"C(q) at level {fine_offset}: {cq:.6g}")
    if level != config.level:
        result.summary.append(f"level raised to {level} to clear the floor")
    if config.n:
        n = config.n
        exact = minimal_crossing_probability(n)
        measured = estimate_minimal_crossing(n, config.budget, config.seed, queue)
        inside = measured.ci_low <= exact <= measured.ci_high
        strategy = self_ilt_strategy_bound(
            q,
            n,
            config.budget,
            config.seed,
            fine_offset=fine_offset,
            cq=cq,
            queue=queue,
        )
        result.summary.extend(
            [
                f"P{{N({n}) = 2^{n}}}: exact {exact:.6g}, "
                f"measured {measured.p_hat:.6g} "
                f"[{measured.ci_low:.6g}, {measured.ci_high:.6g}] "
                f"-> {_verdict(inside)}",
                f"strategy: eps {strategy.epsilon:.4g}, "
                f"log bound {strategy.log_bound:.4f}, "
                f"LLN probability {strategy.lln.p_hat:.4f}, "
                f"log P >= {strategy.log_probability:.4f}",
            ]
        )
        if upper is not None:
            log_upper = upper.log_upper(strategy.epsilon)
            ordered = strategy.log_probability <= log_upper
            result.summary.append(
                f"Chebyshev at eps {strategy.epsilon:.4g}: log P <= {log_upper:.4f} "
                f"-> {_verdict(ordered)}"
            )
            inside = inside and ordered
        result.passed = bool(result.passed) and inside
    return result


def cmd_disjoint(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Range disjointness of walks started at +-eps"""
    m = config.m or 2
    offset = config.eps_site or 1
    configuration = StartConfiguration.symmetric(m, config.orientation or (1,), offset)
    estimate = disjointness_probe(
        configuration, config.level, config.budget, config.seed, queue
    )
    epsilon = offset * 2.0**-config.level
    ell = len(configuration.orientation)
    lower, upper, asymptotic = disjointness_bounds(m, ell, epsilon)
    inside = estimate.ci_high >= lower and estimate.ci_low <= upper
    ratio = estimate.p_hat / asymptotic
    interval = (estimate.p_hat, estimate.ci_low, estimate.ci_high)
    row = (m, ell, epsilon, *interval, lower, upper, asymptotic)
    summary = [
        f"eps = {offset}/2^{config.level} = {epsilon:g}, |M| = {ell}",
        f"P(disjoint) = {estimate.p_hat:.4g} "
        f"[{estimate.ci_low:.4g}, {estimate.ci_high:.4g}]",
        f"bounds [{lower:.4g}, {upper:.4g}] -> {_verdict(inside)}",
        f"ratio to 2 l (m - l) eps^2: {ratio:.4f}",
    ]
    return CommandResult(
        header=[
            "m",
            "ell",
            "epsilon",
            "p_hat",
            "ci_low",
            "ci_high",
            "lower",
            "upper",
            "asymptotic",
        ],
        rows=[row],
        summary=summary,
        passed=inside,
    )


def cmd_scaling_check(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """KS check of the Brownian scaling identity"""
    functional = _functional(config, default_m=2)
    eta = config.eta or 2
    result = scaling_result(
        functional, eta, config.level, config.budget, config.seed, queue
    )
    row = (eta, result.ks, result.threshold, result.n_samples)
    summary = [
        f"eta {eta}, level {config.level}, {result.n_samples} samples per side",
        f"KS {result.ks:.4f} against threshold {result.threshold:.4f} "
        f"-> {_verdict(result.passed)}",
    ]
    return CommandResult(
        header=["eta", "ks", "threshold", "n_samples"],
        rows=[row],
        summary=summary,
        passed=result.passed,
    )


def cmd_exit_tails(config: ExperimentConfig, queue: WorkQueue) -> CommandResult:
    """Exit-time tails of several walks"""
    try:
        side = ExitSide(config.side or ExitSide.MIN.value)
    except ValueError as e:
        raise ValidationError(f"Unknown side {config.side!r}") from e
    defaults = EXIT_PROBE_MIN_A if side is ExitSide.MIN else EXIT_PROBE_MAX_A
    a_values = sorted(config.a_values or defaults)
    m_walks = config.m_walks or 1
    x_scale = config.x_scale or 1.0
    rows = []
    points = []
    for a in a_values:
        estimate = exit_time_tail_probe(
            config.level, x_scale, a, config.budget, side, m_walks, config.seed, queue
        )
        bound = exit_tail_reflection_bound(a)
        rows.append((a, estimate.p_hat, estimate.ci_low, estimate.ci_high, bound))
        points.append((a, estimate.p_hat))
    summary = [f"side {side.value}, {m_walks} walks, level {config.level}"]
    try:
        fit = fit_exit_tail_decay(points, side)
        summary.append(f"exit_tail_beta: {-fit.slope:.4f} (r^2 {fit.r_squared:.3f})")
    except (InsufficientDataError, ValidationError) as e:
        summary.append(f"exit_tail_beta: not available ({str(e)})")
    return CommandResult(
        header=["a", "p_hat", "ci_low", "ci_high", "reflection_bound"],
        rows=rows,
        summary=summary,
    )


COMMANDS: Dict[str, Callable[[ExperimentConfig, WorkQueue], CommandResult]] = {
    "params": cmd_params,
    "prune": cmd_prune,
    "gw-density": cmd_gw_density,
    "gw-tail": cmd_gw_tail,
    "bm-green": cmd_bm_green,
    "ilt-tail": cmd_ilt_tail,
    "silt-tail": cmd_silt_tail,
    "disjoint": cmd_disjoint,
    "scaling-check": cmd_scaling_check,
    "exit-tails": cmd_exit_tails,
}

# flag name -> config key, for flags that mirror config keys
_FLAGS = {
    "dist": "distribution",
    "seed": "seed",
    "threads": "threads",
    "out": "out",
    "level": "level",
    "budget": "budget",
    "method": "method",
    "iterations": "iterations",
    "depth": "depth",
    "epsilons": "epsilons",
    "m": "m",
    "q": "q",
    "stop_rule": "stop_rule",
    "horizon": "horizon",
    "eta": "eta",
    "eps_site": "eps_site",
    "orientation": "orientation",
    "n": "n",
    "fine_offset": "fine_offset",
    "a_values": "a_values",
    "x_scale": "x_scale",
    "side": "side",
    "m_walks": "m_walks",
    "tolerance": "tolerance",
    "phase_radius": "phase_radius",
    "grid_geometric": "grid_geometric",
    "grid_linear": "grid_linear",
}


def _flag_type(key: str) -> Callable[[str], Any]:
    parser = PARSERS[key]

    def convert(text: str) -> Any:
        try:
            return parser(text)
        except ValueError as e:
            message = f"invalid {key}: {text!r} ({str(e)})"
            raise argparse.ArgumentTypeError(message) from e

    return convert


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value experiment file")
    for flag, key in _FLAGS.items():
        common.add_argument(
            f"--{flag.replace('_', '-')}", dest=key, type=_flag_type(key), default=None
        )

    parser = argparse.ArgumentParser(
        prog="run_experiment", description="Small-value probability experiments"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        help_text = (func.__doc__ or name).strip()
        subparsers.add_parser(name, parents=[common], help=help_text)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < environment < config file < flags"""
    config = config_from_env()
    if args.config:
        config = load_config(args.config, config)
    overrides = {key: getattr(args, key) for key in _FLAGS.values()}
    return config.merged(overrides)


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str, result: CommandResult, digest: str, seed: int) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(result.header)
        for row in result.rows:
            writer.writerow([_format(v) for v in row])
        f.write(f"# config_hash={digest} seed={seed}\n")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one experiment

    Returns:
        0 on success, 2 for invalid input, 3 for degenerate distributions,
        4 for resource limits, 1 for anything else
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_INVALID

    try:
        config = resolve_config(args)
        queue = WorkQueue(config.threads)
        logger.info(
            f"Running {args.command} with seed {config.seed} "
            f"on {config.threads} threads"
        )
        result = COMMANDS[args.command](config, queue)
        out = config.out or f"{args.command}.csv"
        write_csv(out, result, config_hash(config, args.command), config.seed)
    except SmallValueError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {str(e)}", file=sys.stderr)
        for problem in getattr(e, "problems", []):
            print(f"  {problem}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Internal error in {args.command}: {str(e)}")
        print(f"internal error: {str(e)}", file=sys.stderr)
        return EXIT_INTERNAL

    print(f"{args.command}: wrote {out}")
    for line in result.summary:
        print(line)
    if result.passed is not None:
        print("result: PASS" if result.passed else "result: FAIL")
    return 0


def main() -> None:
    load_dotenv()
    setup_logging()
    sys.exit(run())
