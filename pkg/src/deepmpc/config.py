"""Scenario configuration: flat key/value sections plus the benchmark file.

Configs are standard INI text (named sections, ``key = value``); vectors
are space-separated, matrices use ``;`` between rows, and gain schedules
accept either explicit ``start:end:gain`` windows or an alternating
``period gain`` pattern.
"""

import configparser
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import ConfigurationError
from .mpc import MpcConfig
from .ocp import QpConfig
from .plant import (ConstraintSets, ControlAffineModel, UncertaintySpec,
                    ZeroUncertainty)
from .trainer import TrainerConfig

VARIANTS = ("tube", "shallow", "deep")

# The shallow controller is pinned to one hidden layer of three bounded
# neurons; the deep default is the four-layer benchmark stack.
SHALLOW_WIDTHS = (3,)
SHALLOW_ACTIVATIONS = ("tanh",)
DEEP_WIDTHS = (5, 5, 3)
DEEP_ACTIVATIONS = ("relu", "relu", "tanh")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one closed-loop run."""

    model: ControlAffineModel
    sets: ConstraintSets
    uncertainty: object
    variant: str
    net_widths: tuple
    net_activations: tuple
    column_bounds: np.ndarray
    theta: float
    trainer: TrainerConfig
    mpc: MpcConfig
    x0: np.ndarray
    t_sim: int
    seed: int
    log_value_decomposition: bool = True
    training_enabled: bool = True
    initial_network: object | None = None
    name: str = "scenario"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.t_sim < 1:
            raise ConfigurationError("t_sim must be positive")
        object.__setattr__(self, "column_bounds",
                           np.atleast_1d(np.asarray(self.column_bounds, dtype=float)))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.variant == "shallow":
            widths = (self.model.state_dim,) + SHALLOW_WIDTHS
            object.__setattr__(self, "net_widths", widths)
            object.__setattr__(self, "net_activations", SHALLOW_ACTIVATIONS)

    def with_overrides(self, *, seed=None, t_sim=None, variant=None,
                       synchronous=None, log_value_decomposition=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if t_sim is not None:
            cfg = replace(cfg, t_sim=t_sim)
        if variant is not None:
            cfg = replace(cfg, variant=variant)
        if synchronous is not None:
            cfg = replace(cfg, trainer=replace(cfg.trainer, synchronous=synchronous))
        if log_value_decomposition is not None:
            cfg = replace(cfg, log_value_decomposition=log_value_decomposition)
        return cfg


def _floats(text):
    return np.array([float(v) for v in text.split()])


def _matrix(text):
    rows = [r.strip() for r in text.split(";") if r.strip()]
    return np.array([[float(v) for v in row.split()] for row in rows])


def _windows(text):
    windows = []
    for token in text.split():
        parts = token.split(":")
        if len(parts) != 3:
            raise ConfigurationError(
                f"gain window '{token}' must look like start:end:gain")
        windows.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return tuple(windows)


def _build_model(section):
    kind = section.get("type", "linear")
    if kind != "linear":
        raise ConfigurationError(
            "config files describe linear models; build nonlinear "
            "ControlAffineModel instances programmatically")
    return ControlAffineModel.linear(_matrix(section["a_matrix"]),
                                     _matrix(section["b_matrix"]))


def _build_uncertainty(section):
    kind = section.get("type", "basis")
    if kind == "zero":
        return ZeroUncertainty()
    if kind != "basis":
        raise ConfigurationError(f"unknown uncertainty type '{kind}'")
    alternating = None
    if "gain_alternating" in section:
        period, gain = section["gain_alternating"].split()
        alternating = (int(period), float(gain))
    return UncertaintySpec(
        basis_weights=_floats(section["basis_weights"]),
        gain_windows=_windows(section["gain_windows"]) if "gain_windows" in section else (),
        alternating=alternating,
        noise_half_width=section.getfloat("noise_half_width", 0.0),
        saturation_threshold=section.getfloat("saturation_threshold", 0.0),
    )


def load_scenario(path=None):
    """Read a scenario config file; ``None`` loads the wing-rock benchmark."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if path is None:
        text = resources.files("deepmpc").joinpath("configs/wingrock.cfg").read_text()
        parser.read_string(text)
    else:
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
    try:
        return _scenario_from_parser(parser)
    except KeyError as exc:
        raise ConfigurationError(f"config is missing required key: {exc}") from exc


def _scenario_from_parser(parser):
    model = _build_model(parser["plant"])
    cons = parser["constraints"]
    sets = ConstraintSets(
        state_low=_floats(cons["x_low"]),
        state_high=_floats(cons["x_high"]),
        u_max=cons.getfloat("u_max"),
        w_max=cons.getfloat("w_max"),
    )
    uncertainty = _build_uncertainty(parser["uncertainty"])
    net = parser["network"]
    widths = tuple(int(v) for v in net["widths"].split())
    trainer_sec = parser["trainer"]
    trainer = TrainerConfig(
        sample_size=trainer_sec.getint("sample_size"),
        capacity=trainer_sec.getint("capacity"),
        epochs=trainer_sec.getint("epochs", 50),
        learning_rate=trainer_sec.getfloat("learning_rate", 0.01),
        momentum=trainer_sec.getfloat("momentum", 0.9),
        batch_size=trainer_sec.getint("batch_size") if "batch_size" in trainer_sec else None,
        first_trigger=trainer_sec.getint("first_trigger") if "first_trigger" in trainer_sec else None,
        period=trainer_sec.getint("period", 50),
        synchronous=trainer_sec.getboolean("synchronous", True),
    )
    mpc_sec = parser["mpc"]
    mpc_cfg = MpcConfig(
        horizon=mpc_sec.getint("horizon"),
        q=_matrix(mpc_sec["q"]),
        r=_matrix(mpc_sec["r"]),
        governor_horizon=mpc_sec.getint("governor_horizon") if "governor_horizon" in mpc_sec else None,
        qp=QpConfig(tol=mpc_sec.getfloat("qp_tol", 1e-8)),
        qf_scale=mpc_sec.getfloat("qf_scale", 1.05),
        u_margin_fraction=mpc_sec.getfloat("u_margin_fraction", 0.1),
        x_margin=_floats(mpc_sec["x_margin"]) if "x_margin" in mpc_sec else None,
        x_margin_scale=mpc_sec.getfloat("x_margin_scale", 1.0),
    )
    sim = parser["simulation"]
    return ScenarioConfig(
        model=model,
        sets=sets,
        uncertainty=uncertainty,
        variant=sim.get("variant", "deep"),
        net_widths=(model.state_dim,) + widths,
        net_activations=tuple(net["activations"].split()),
        column_bounds=_floats(net["column_bounds"]),
        theta=net.getfloat("theta", 0.5),
        trainer=trainer,
        mpc=mpc_cfg,
        x0=_floats(sim["x0"]),
        t_sim=sim.getint("t_sim", 300),
        seed=sim.getint("seed", 0),
        log_value_decomposition=sim.getboolean("log_value_decomposition", True),
        name=sim.get("name", "scenario"),
    )
