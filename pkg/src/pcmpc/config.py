"""Experiment configuration: schema, validation, and assembly.

An experiment is described by one human-editable TOML document with nested
tables.  Plain matrices are row-major lists of lists; entries of the
uncertain system matrices are lists of ``{multi_index, coefficient}``
tables so ``A(theta)`` and ``B(theta)`` can carry arbitrary polynomial
parameter dependence::

    [system]
    a = [
      [[{ multi_index = [1], coefficient = 1.0 }], []],
      [[{ multi_index = [0], coefficient = 0.088 }],
       [{ multi_index = [0], coefficient = 0.819 }]],
    ]
    b = [
      [[{ multi_index = [0], coefficient = -0.005 }]],
      [[{ multi_index = [0], coefficient = -0.002 }]],
    ]
    noise_cov = [[1e-4, 0.0], [0.0, 1e-4]]

    [[uncertainty.marginals]]
    kind = "beta4"                      # or "uniform", "gaussian"
    low = 0.923
    high = 0.963
    alpha = 2.0
    beta = 5.0

    [gpc]
    max_degree = 5

    [controller]
    horizon = 60
    q = [[1.0, 0.0], [0.0, 1.0]]
    r = [[0.1]]

    [[controller.constraints]]
    c = [0.0, 1.0]
    bound = 0.17
    beta = 0.95

    [simulation]
    steps = 60
    runs = 100
    seed = 20
    x0_mean = [0.5, 0.1]
    x0_std = [0.1, 0.1]

Validation failures raise :class:`~pcmpc.errors.ConfigError` whose ``path``
names the offending field (``controller.delta``, ``system.a[0][1]``, ...).
Unknown keys are rejected so typos fail loudly.

:func:`config_to_dict` emits a canonical plain-data echo of a parsed
configuration and :func:`config_from_dict` accepts it back; the two compose
to the identity, which is what keeps the configuration embedded in a JSON
summary re-loadable and comparable with ``==``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .basis import build_basis
from .controller import ChanceConstraint, CostWeights, build_problem
from .distributions import MarginalDistribution
from .errors import ConfigError, ParameterError
from .galerkin import PolynomialMatrix, UncertainLinearSystem, project_system
from .sim import MonteCarloSetup, SmpcController, nominal_mpc_controller

__all__ = [
    "SystemConfig",
    "ConstraintConfig",
    "ControllerConfig",
    "SimulationConfig",
    "OutputConfig",
    "ExperimentConfig",
    "Experiment",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "build_system",
    "assemble_experiment",
]

_MODES = ("fixed-gain", "joint")
_TERMINALS = ("lyapunov", "zero")
_FORMATS = ("csv", "json")
_DEFAULT_HISTOGRAM_TIMES = (5, 20, 60)


# ----------------------------------------------------------------------
# schema dataclasses (plain data: tuples, floats, ints, strings)


@dataclass(frozen=True)
class SystemConfig:
    """Uncertain plant description in canonical plain-data form.

    ``a[i][j]`` and ``b[i][j]`` are tuples of ``(multi_index, coefficient)``
    terms with zero coefficients dropped and indices sorted, so structural
    equality means polynomial equality.
    """

    a: tuple
    b: tuple
    noise_gain: tuple
    noise_cov: tuple

    @property
    def n_x(self) -> int:
        return len(self.a)

    @property
    def n_u(self) -> int:
        return len(self.b[0])

    @property
    def n_w(self) -> int:
        return len(self.noise_gain[0])


@dataclass(frozen=True)
class ConstraintConfig:
    c: tuple
    bound: float
    beta: float


@dataclass(frozen=True)
class ControllerConfig:
    horizon: int
    q: tuple
    r: tuple
    mode: str
    terminal: str
    epsilon: float
    delta: float
    constraints: tuple


@dataclass(frozen=True)
class SimulationConfig:
    steps: int
    runs: int
    seed: int
    x0_mean: tuple
    x0_std: tuple
    histogram_times: tuple
    histogram_bins: int
    include_baseline: bool


@dataclass(frozen=True)
class OutputConfig:
    directory: str | None
    formats: tuple


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig
    marginals: tuple
    max_degree: int
    controller: ControllerConfig
    simulation: SimulationConfig
    output: OutputConfig


# ----------------------------------------------------------------------
# low-level field readers

_MISSING = object()


def _get(table, key, path, default=_MISSING):
    if key in table:
        return table[key]
    if default is _MISSING:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return default


def _check_unknown(table, allowed, path):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")


def _expect_table(value, path):
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a table, got {type(value).__name__}")
    return value


def _expect_list(value, path):
    if not isinstance(value, list):
        raise ConfigError(path, f"expected a list, got {type(value).__name__}")
    return value


def _expect_str(value, path):
    if not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _expect_bool(value, path):
    if not isinstance(value, bool):
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    return value


def _expect_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return int(value)


def _expect_float(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    return value


def _parse_vector(value, path, length=None):
    items = _expect_list(value, path)
    vec = tuple(_expect_float(v, f"{path}[{i}]") for i, v in enumerate(items))
    if length is not None and len(vec) != length:
        raise ConfigError(path, f"expected {length} entries, got {len(vec)}")
    return vec


def _parse_matrix(value, path, rows=None, cols=None):
    table = _expect_list(value, path)
    if not table:
        raise ConfigError(path, "matrix must have at least one row")
    out = tuple(_parse_vector(row, f"{path}[{i}]") for i, row in enumerate(table))
    width = len(out[0])
    if any(len(row) != width for row in out):
        raise ConfigError(path, "rows have inconsistent lengths")
    if rows is not None and len(out) != rows:
        raise ConfigError(path, f"expected {rows} rows, got {len(out)}")
    if cols is not None and width != cols:
        raise ConfigError(path, f"expected {cols} columns, got {width}")
    return out


def _check_symmetric_psd(matrix, path):
    mat = np.asarray(matrix, dtype=float)
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ConfigError(path, "must be symmetric")
    if mat.size and np.linalg.eigvalsh(0.5 * (mat + mat.T)).min() < -1e-10:
        raise ConfigError(path, "must be positive semidefinite")


def _parse_terms(value, path, n_params):
    """Canonicalize one polynomial entry: merge powers, drop zeros, sort."""
    items = _expect_list(value, path)
    acc: dict[tuple, float] = {}
    for t, term in enumerate(items):
        tpath = f"{path}[{t}]"
        term = _expect_table(term, tpath)
        _check_unknown(term, ("multi_index", "coefficient"), tpath)
        mi_raw = _expect_list(_get(term, "multi_index", tpath), f"{tpath}.multi_index")
        powers = tuple(
            _expect_int(v, f"{tpath}.multi_index[{d}]", minimum=0)
            for d, v in enumerate(mi_raw)
        )
        if len(powers) != n_params:
            raise ConfigError(
                f"{tpath}.multi_index",
                f"expected {n_params} powers (one per marginal), got {len(powers)}",
            )
        coeff = _expect_float(_get(term, "coefficient", tpath), f"{tpath}.coefficient")
        acc[powers] = acc.get(powers, 0.0) + coeff
    return tuple(
        (powers, coeff)
        for powers, coeff in sorted(acc.items(), key=lambda kv: (sum(kv[0]), kv[0][::-1]))
        if coeff != 0.0
    )


def _parse_poly_matrix(value, path, n_params, rows=None, cols=None):
    table = _expect_list(value, path)
    if not table:
        raise ConfigError(path, "matrix must have at least one row")
    out = []
    for i, row in enumerate(table):
        row = _expect_list(row, f"{path}[{i}]")
        out.append(
            tuple(
                _parse_terms(entry, f"{path}[{i}][{j}]", n_params)
                for j, entry in enumerate(row)
            )
        )
    width = len(out[0])
    if not width or any(len(row) != width for row in out):
        raise ConfigError(path, "rows must be nonempty and of equal length")
    if rows is not None and len(out) != rows:
        raise ConfigError(path, f"expected {rows} rows, got {len(out)}")
    if cols is not None and width != cols:
        raise ConfigError(path, f"expected {cols} columns, got {width}")
    return tuple(out)


# ----------------------------------------------------------------------
# block parsers


def _parse_marginal(table, path):
    table = _expect_table(table, path)
    kind = _expect_str(_get(table, "kind", path), f"{path}.kind")
    try:
        if kind == "uniform":
            _check_unknown(table, ("kind", "low", "high"), path)
            return MarginalDistribution.uniform(
                _expect_float(_get(table, "low", path), f"{path}.low"),
                _expect_float(_get(table, "high", path), f"{path}.high"),
            )
        if kind == "gaussian":
            _check_unknown(table, ("kind", "mean", "variance"), path)
            return MarginalDistribution.gaussian(
                _expect_float(_get(table, "mean", path), f"{path}.mean"),
                _expect_float(_get(table, "variance", path), f"{path}.variance"),
            )
        if kind == "beta4":
            _check_unknown(table, ("kind", "low", "high", "alpha", "beta"), path)
            return MarginalDistribution.beta4(
                _expect_float(_get(table, "low", path), f"{path}.low"),
                _expect_float(_get(table, "high", path), f"{path}.high"),
                _expect_float(_get(table, "alpha", path), f"{path}.alpha"),
                _expect_float(_get(table, "beta", path), f"{path}.beta"),
            )
    except ParameterError as exc:
        raise ConfigError(path, str(exc)) from exc
    raise ConfigError(f"{path}.kind", f"unknown marginal kind {kind!r}")


def _parse_uncertainty(data):
    block = _expect_table(_get(data, "uncertainty", ""), "uncertainty")
    _check_unknown(block, ("marginals",), "uncertainty")
    raw = _expect_list(_get(block, "marginals", "uncertainty"), "uncertainty.marginals")
    if not raw:
        raise ConfigError("uncertainty.marginals", "need at least one marginal")
    return tuple(
        _parse_marginal(tbl, f"uncertainty.marginals[{i}]") for i, tbl in enumerate(raw)
    )


def _parse_system(data, n_params):
    block = _expect_table(_get(data, "system", ""), "system")
    _check_unknown(
        block, ("n_x", "n_u", "n_w", "a", "b", "noise_gain", "noise_cov"), "system"
    )
    a = _parse_poly_matrix(_get(block, "a", "system"), "system.a", n_params)
    n_x = len(a)
    if any(len(row) != n_x for row in a):
        raise ConfigError("system.a", "state matrix must be square")
    b = _parse_poly_matrix(_get(block, "b", "system"), "system.b", n_params, rows=n_x)
    gain_raw = block.get("noise_gain")
    if gain_raw is None:
        noise_gain = tuple(
            tuple(1.0 if i == j else 0.0 for j in range(n_x)) for i in range(n_x)
        )
    else:
        noise_gain = _parse_matrix(gain_raw, "system.noise_gain", rows=n_x)
    n_w = len(noise_gain[0])
    noise_cov = _parse_matrix(
        _get(block, "noise_cov", "system"), "system.noise_cov", rows=n_w, cols=n_w
    )
    _check_symmetric_psd(noise_cov, "system.noise_cov")
    cfg = SystemConfig(a=a, b=b, noise_gain=noise_gain, noise_cov=noise_cov)
    for key, expected in (("n_x", cfg.n_x), ("n_u", cfg.n_u), ("n_w", cfg.n_w)):
        if key in block and _expect_int(block[key], f"system.{key}", 1) != expected:
            raise ConfigError(
                f"system.{key}", f"declared {block[key]}, matrices imply {expected}"
            )
    return cfg


def _parse_gpc(data):
    block = _expect_table(_get(data, "gpc", ""), "gpc")
    _check_unknown(block, ("max_degree",), "gpc")
    return _expect_int(_get(block, "max_degree", "gpc"), "gpc.max_degree", minimum=0)


def _parse_constraint(table, path, n_x):
    table = _expect_table(table, path)
    _check_unknown(table, ("c", "bound", "beta"), path)
    c = _parse_vector(_get(table, "c", path), f"{path}.c", length=n_x)
    if all(v == 0.0 for v in c):
        raise ConfigError(f"{path}.c", "constraint direction must be nonzero")
    bound = _expect_float(_get(table, "bound", path), f"{path}.bound")
    beta = _expect_float(_get(table, "beta", path), f"{path}.beta")
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"{path}.beta", f"must lie strictly in (0, 1), got {beta}")
    return ConstraintConfig(c=c, bound=bound, beta=beta)


def _parse_controller(data, n_x, n_u):
    block = _expect_table(_get(data, "controller", ""), "controller")
    _check_unknown(
        block,
        ("horizon", "q", "r", "mode", "terminal", "epsilon", "delta", "constraints"),
        "controller",
    )
    horizon = _expect_int(block.get("horizon", 10), "controller.horizon", 1)
    q = _parse_matrix(_get(block, "q", "controller"), "controller.q", rows=n_x, cols=n_x)
    r = _parse_matrix(_get(block, "r", "controller"), "controller.r", rows=n_u, cols=n_u)
    _check_symmetric_psd(q, "controller.q")
    _check_symmetric_psd(r, "controller.r")
    mode = _expect_str(block.get("mode", "fixed-gain"), "controller.mode")
    if mode not in _MODES:
        raise ConfigError("controller.mode", f"must be one of {_MODES}, got {mode!r}")
    terminal = _expect_str(block.get("terminal", "lyapunov"), "controller.terminal")
    if terminal not in _TERMINALS:
        raise ConfigError(
            "controller.terminal", f"must be one of {_TERMINALS}, got {terminal!r}"
        )
    epsilon = _expect_float(block.get("epsilon", 1e-8), "controller.epsilon")
    if epsilon < 0.0:
        raise ConfigError("controller.epsilon", "must be nonnegative")
    delta = _expect_float(block.get("delta", 0.1), "controller.delta")
    if delta <= 0.0:
        raise ConfigError("controller.delta", f"must be positive, got {delta}")
    raw = _expect_list(block.get("constraints", []), "controller.constraints")
    constraints = tuple(
        _parse_constraint(tbl, f"controller.constraints[{i}]", n_x)
        for i, tbl in enumerate(raw)
    )
    return ControllerConfig(
        horizon=horizon,
        q=q,
        r=r,
        mode=mode,
        terminal=terminal,
        epsilon=epsilon,
        delta=delta,
        constraints=constraints,
    )


def _parse_simulation(data, n_x):
    block = _expect_table(_get(data, "simulation", ""), "simulation")
    _check_unknown(
        block,
        (
            "steps",
            "runs",
            "seed",
            "x0_mean",
            "x0_std",
            "histogram_times",
            "histogram_bins",
            "include_baseline",
        ),
        "simulation",
    )
    steps = _expect_int(_get(block, "steps", "simulation"), "simulation.steps", 1)
    runs = _expect_int(_get(block, "runs", "simulation"), "simulation.runs", 1)
    seed = _expect_int(block.get("seed", 0), "simulation.seed", 0)
    x0_mean = _parse_vector(
        _get(block, "x0_mean", "simulation"), "simulation.x0_mean", length=n_x
    )
    x0_std = _parse_vector(
        _get(block, "x0_std", "simulation"), "simulation.x0_std", length=n_x
    )
    if any(v < 0.0 for v in x0_std):
        raise ConfigError("simulation.x0_std", "standard deviations must be nonnegative")
    raw_times = block.get("histogram_times")
    if raw_times is None:
        times = tuple(t for t in _DEFAULT_HISTOGRAM_TIMES if t <= steps)
    else:
        items = _expect_list(raw_times, "simulation.histogram_times")
        times = tuple(
            _expect_int(t, f"simulation.histogram_times[{i}]", 0)
            for i, t in enumerate(items)
        )
        out_of_range = [t for t in times if t > steps]
        if out_of_range:
            raise ConfigError(
                "simulation.histogram_times",
                f"times {out_of_range} exceed the run length {steps}",
            )
    bins = _expect_int(block.get("histogram_bins", 20), "simulation.histogram_bins", 1)
    include_baseline = _expect_bool(
        block.get("include_baseline", True), "simulation.include_baseline"
    )
    return SimulationConfig(
        steps=steps,
        runs=runs,
        seed=seed,
        x0_mean=x0_mean,
        x0_std=x0_std,
        histogram_times=times,
        histogram_bins=bins,
        include_baseline=include_baseline,
    )


def _parse_output(data):
    block = _expect_table(data.get("output", {}), "output")
    _check_unknown(block, ("directory", "formats"), "output")
    directory = block.get("directory")
    if directory is not None:
        directory = _expect_str(directory, "output.directory")
    raw = block.get("formats")
    if raw is None:
        formats = _FORMATS
    else:
        items = _expect_list(raw, "output.formats")
        for i, f in enumerate(items):
            if _expect_str(f, f"output.formats[{i}]") not in _FORMATS:
                raise ConfigError(
                    f"output.formats[{i}]", f"must be one of {_FORMATS}, got {f!r}"
                )
        if not items:
            raise ConfigError("output.formats", "need at least one format")
        formats = tuple(f for f in _FORMATS if f in items)
    return OutputConfig(directory=directory, formats=formats)


def config_from_dict(data) -> ExperimentConfig:
    """Validate a nested plain-data mapping into an :class:`ExperimentConfig`."""
    data = _expect_table(data, "")
    _check_unknown(
        data, ("system", "uncertainty", "gpc", "controller", "simulation", "output"), ""
    )
    marginals = _parse_uncertainty(data)
    system = _parse_system(data, len(marginals))
    max_degree = _parse_gpc(data)
    controller = _parse_controller(data, system.n_x, system.n_u)
    simulation = _parse_simulation(data, system.n_x)
    output = _parse_output(data)
    return ExperimentConfig(
        system=system,
        marginals=marginals,
        max_degree=max_degree,
        controller=controller,
        simulation=simulation,
        output=output,
    )


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"TOML parse error: {exc}") from exc
    return config_from_dict(data)


# ----------------------------------------------------------------------
# canonical echo


def _terms_to_dicts(entry):
    return [
        {"multi_index": list(powers), "coefficient": coeff} for powers, coeff in entry
    ]


def _marginal_to_dict(marg: MarginalDistribution) -> dict:
    if marg.kind == "uniform":
        low, high = marg.params
        return {"kind": "uniform", "low": low, "high": high}
    if marg.kind == "gaussian":
        mean, variance = marg.params
        return {"kind": "gaussian", "mean": mean, "variance": variance}
    low, high, alpha, beta = marg.params
    return {"kind": "beta4", "low": low, "high": high, "alpha": alpha, "beta": beta}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-data echo; ``config_from_dict(config_to_dict(cfg)) == cfg``."""
    sys_cfg = cfg.system
    out: dict = {
        "system": {
            "n_x": sys_cfg.n_x,
            "n_u": sys_cfg.n_u,
            "n_w": sys_cfg.n_w,
            "a": [[_terms_to_dicts(entry) for entry in row] for row in sys_cfg.a],
            "b": [[_terms_to_dicts(entry) for entry in row] for row in sys_cfg.b],
            "noise_gain": [list(row) for row in sys_cfg.noise_gain],
            "noise_cov": [list(row) for row in sys_cfg.noise_cov],
        },
        "uncertainty": {"marginals": [_marginal_to_dict(m) for m in cfg.marginals]},
        "gpc": {"max_degree": cfg.max_degree},
        "controller": {
            "horizon": cfg.controller.horizon,
            "q": [list(row) for row in cfg.controller.q],
            "r": [list(row) for row in cfg.controller.r],
            "mode": cfg.controller.mode,
            "terminal": cfg.controller.terminal,
            "epsilon": cfg.controller.epsilon,
            "delta": cfg.controller.delta,
            "constraints": [
                {"c": list(k.c), "bound": k.bound, "beta": k.beta}
                for k in cfg.controller.constraints
            ],
        },
        "simulation": {
            "steps": cfg.simulation.steps,
            "runs": cfg.simulation.runs,
            "seed": cfg.simulation.seed,
            "x0_mean": list(cfg.simulation.x0_mean),
            "x0_std": list(cfg.simulation.x0_std),
            "histogram_times": list(cfg.simulation.histogram_times),
            "histogram_bins": cfg.simulation.histogram_bins,
            "include_baseline": cfg.simulation.include_baseline,
        },
        "output": {"formats": list(cfg.output.formats)},
    }
    if cfg.output.directory is not None:
        out["output"]["directory"] = cfg.output.directory
    return out


# ----------------------------------------------------------------------
# assembly


@dataclass(frozen=True, eq=False)
class Experiment:
    """A configuration resolved into live objects, ready to simulate."""

    config: ExperimentConfig
    system: UncertainLinearSystem
    dynamics: object
    problem: object
    setup: MonteCarloSetup

    @property
    def basis(self):
        return self.dynamics.basis

    @property
    def certificate(self):
        return self.problem.certificate


def build_system(cfg: ExperimentConfig) -> UncertainLinearSystem:
    n_params = len(cfg.marginals)
    a = PolynomialMatrix.from_entries(
        [[list(entry) for entry in row] for row in cfg.system.a], n_params
    )
    b = PolynomialMatrix.from_entries(
        [[list(entry) for entry in row] for row in cfg.system.b], n_params
    )
    return UncertainLinearSystem(
        a_matrix=a,
        b_matrix=b,
        noise_gain=np.array(cfg.system.noise_gain, dtype=float),
        noise_cov=np.array(cfg.system.noise_cov, dtype=float),
        marginals=cfg.marginals,
    )


def assemble_experiment(cfg: ExperimentConfig) -> Experiment:
    """Build basis, lifted dynamics, certificate, and controllers.

    The baseline controller shares the weights, horizon, and constraint
    data with the chance-constrained one but sees only the mean parameters;
    pairing the two in one setup gives matched-seed comparisons for free.
    """
    system = build_system(cfg)
    basis = build_basis(cfg.marginals, cfg.max_degree)
    dynamics = project_system(system, basis)
    ctrl = cfg.controller
    weights = CostWeights(
        q=np.array(ctrl.q, dtype=float),
        r=np.array(ctrl.r, dtype=float),
        terminal="lyapunov" if ctrl.terminal == "lyapunov" else None,
        epsilon=ctrl.epsilon,
    )
    constraints = tuple(
        ChanceConstraint(c=np.array(k.c, dtype=float), d=k.bound, beta=k.beta)
        for k in ctrl.constraints
    )
    problem = build_problem(
        dynamics,
        horizon=ctrl.horizon,
        weights=weights,
        constraints=constraints,
        mode=ctrl.mode,
        delta=ctrl.delta,
    )
    controllers: dict[str, object] = {"smpc": SmpcController(problem)}
    if cfg.simulation.include_baseline:
        controllers["nominal"] = nominal_mpc_controller(
            system, weights, constraints, horizon=ctrl.horizon
        )
    setup = MonteCarloSetup(
        system=system,
        controllers=controllers,
        x0_mean=np.array(cfg.simulation.x0_mean, dtype=float),
        x0_std=np.array(cfg.simulation.x0_std, dtype=float),
        n_steps=cfg.simulation.steps,
        constraints=constraints,
        histogram_times=cfg.simulation.histogram_times,
        histogram_bins=cfg.simulation.histogram_bins,
    )
    return Experiment(
        config=cfg, system=system, dynamics=dynamics, problem=problem, setup=setup
    )
