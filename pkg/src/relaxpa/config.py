"""Experiment configuration: YAML files with a strict schema.

Every block is a dataclass; unknown keys and wrong types raise ConfigError
naming the offending key.  Coefficients are picked by name from small
registries rather than parsed from expressions.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError

STAGES = (
    "simulate",
    "generate-contract",
    "agent-value",
    "solve-bsde",
    "optimize",
    "verify-weakform",
    "diagnostics",
)


@dataclass
class ModelConfig:
    family: str = "lq"
    T: float = 1.0
    x0: float = 0.0
    sigma: object = 1.0
    d: int = 1
    k: int = 1
    u_max: float = 2.0
    n_u: int = 41
    rate: float = 0.0
    hamiltonian: str = "closed_form"
    n_steps: int = 50
    n_cells: int = 16


@dataclass
class ZConfig:
    kind: str = "constant"
    value: float = 1.0
    values: list = field(default_factory=lambda: [0.0, 2.0])
    theta: list = field(default_factory=lambda: [1.0, 1.0])


@dataclass
class ContractConfig:
    y0: float = 0.0
    y0_std: float = 0.0
    z: ZConfig = field(default_factory=ZConfig)
    l_scale: float = 0.0
    max_infeasible: float = 0.0


@dataclass
class PrincipalConfig:
    utility: str = "terminal_output"
    r0: float = 0.0
    constraints: list = field(default_factory=list)
    q: float = 2.0
    q_prime: float = 3.0
    R: float = float("inf")
    penalty_schedule: list = field(default_factory=lambda: [10.0, 100.0, 1000.0])
    feasibility_tol: float = 0.01


@dataclass
class OptimizerConfig:
    space: str = "constant"
    z_bounds: list = field(default_factory=lambda: [0.0, 2.0])
    c_bounds: list = field(default_factory=lambda: [0.05, 2.0])
    y0_bounds: object = None
    randomized: bool = False
    budget: int = 128
    population: int = 32
    elite: int = 8
    smoothing: float = 0.2
    n_paths: int = 4000
    validation_paths: int = 10000
    expect_value: object = None
    value_rel_tol: float = 0.05
    expect_theta: object = None
    theta_tol: float = 0.1


@dataclass
class BsdeConfig:
    terminal: str = "contract"
    terminal_value: float = 1.0
    driver: str = "hamiltonian"
    rate: float = 0.5
    degree: int = 3
    ridge: float = 1e-8
    n_picard: int = 8
    tol: float = 1e-6
    y_rmse_tol: float = 0.05
    y_rel_tol: float = 0.01
    z_mean_tol: float = 0.1
    z_rmse_tol: float = 0.1


@dataclass
class WeakformConfig:
    pairs: list = field(default_factory=lambda: [[0.0, 0.5], [0.5, 1.0], [0.0, 1.0]])
    band: float = 3.0
    power_band: float = 5.0
    min_pass: float = 0.95
    power_checks: bool = True
    epsilon: float = 0.5
    M_grid: list = field(default_factory=lambda: [0.0, 2.0, 4.0, 8.0])
    tightness_level: float = 8.0
    tightness_max_prob: float = 0.01


@dataclass
class AgentConfig:
    probe_times: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    band: float = 3.0


@dataclass
class RunConfig:
    n_paths: int = 10000
    seed: int = 1
    threads: int = 0
    stages: list = field(default_factory=lambda: list(STAGES))


@dataclass
class OutputConfig:
    dir: str = "out"
    format: str = "csv"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    contract: ContractConfig = field(default_factory=ContractConfig)
    principal: PrincipalConfig = field(default_factory=PrincipalConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    bsde: BsdeConfig = field(default_factory=BsdeConfig)
    weakform: WeakformConfig = field(default_factory=WeakformConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        """Deterministic digest of the resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


CHOICES = {
    "model.family": ("lq", "brownian"),
    "model.hamiltonian": ("closed_form", "grid"),
    "contract.z.kind": ("constant", "two_point", "damped", "randomized_damped"),
    "principal.utility": ("terminal_output", "neg_payment"),
    "optimizer.space": ("constant", "damped"),
    "bsde.terminal": ("contract", "state", "constant"),
    "bsde.driver": ("zero", "hamiltonian", "linear", "mixed"),
    "output.format": ("csv", "json"),
}

CONSTRAINTS = ("nonnegative", "capped")


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and value.lower() in ("inf", ".inf", "infinity"):
            return float("inf")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data, prefix):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key '{prefix + unknown[0]}'")
    obj = cls()
    for name, value in data.items():
        key = prefix + name
        default = getattr(obj, name)
        if hasattr(default, "__dataclass_fields__"):
            setattr(obj, name, _build(type(default), value, key + "."))
        elif known[name].type is object:
            setattr(obj, name, value)
        else:
            setattr(obj, name, _coerce(value, default, key))
    return obj


def _validate(cfg):
    for key, allowed in CHOICES.items():
        obj = cfg
        for part in key.split("."):
            obj = getattr(obj, part)
        if obj not in allowed:
            raise ConfigError(f"{key}: unknown name {obj!r} (choose from {', '.join(allowed)})")
    m = cfg.model
    checks = [
        ("model.n_cells", m.n_cells >= 1),
        ("model.n_steps", m.n_steps >= 1),
        ("model.T", m.T > 0),
        ("model.d", m.d >= 1),
        ("model.k", 1 <= m.k <= m.d),
        ("model.n_u", m.n_u >= 1),
        ("run.n_paths", cfg.run.n_paths >= 2),
        ("run.seed", cfg.run.seed >= 0),
        ("run.threads", cfg.run.threads >= 0),
        ("optimizer.budget", cfg.optimizer.budget >= 1),
        ("optimizer.population", cfg.optimizer.population >= cfg.optimizer.elite >= 1),
        ("optimizer.n_paths", cfg.optimizer.n_paths >= 2),
        ("bsde.degree", cfg.bsde.degree >= 0),
        ("bsde.n_picard", cfg.bsde.n_picard >= 1),
        ("weakform.epsilon", cfg.weakform.epsilon > 0),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"{key}: value out of range")
    if m.family == "lq" and (m.d != 1 or m.k != 1):
        raise ConfigError("model.d: the lq family is one-dimensional")
    for c in cfg.principal.constraints:
        if c not in CONSTRAINTS:
            raise ConfigError(f"principal.constraints: unknown constraint {c!r}")
    for s in cfg.run.stages:
        if s not in STAGES:
            raise ConfigError(f"run.stages: unknown stage {s!r}")
    for p in cfg.weakform.pairs:
        if not (isinstance(p, list) and len(p) == 2 and 0 <= p[0] < p[1] <= 1):
            raise ConfigError("weakform.pairs: each pair must be [s, t] with 0 <= s < t <= 1")
    sig = np.asarray(m.sigma, dtype=float) if not isinstance(m.sigma, str) else None
    if sig is None or (sig.ndim not in (0, 2)):
        raise ConfigError("model.sigma: expected a number or a d x k matrix")
    if sig.ndim == 2 and sig.shape != (m.d, m.k):
        raise ConfigError(f"model.sigma: expected shape ({m.d}, {m.k})")
    return cfg


def load_config(path, overrides=None):
    """Parse and validate a YAML config; ``overrides`` maps dotted keys to values."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"config parse error{where}: {exc}") from exc
    return config_from_dict(data, overrides)


def config_from_dict(data, overrides=None):
    data = json.loads(json.dumps(data))
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return _validate(_build(ExperimentConfig, data, ""))


def bundled_config_path(name):
    """Path of a config shipped with the package (``lq_benchmark`` etc.)."""
    here = Path(__file__).parent / "configs"
    p = here / (name if name.endswith(".yaml") else name + ".yaml")
    if not p.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return p
