"""Experiment configuration: TOML schema, validation, cost-stream construction.

Schema (all matrices row-major nested arrays):

    [system]
    A = [[0.9]]            # state transition, d_x x d_x
    B = [[1.0]]            # control map, d_x x d_u
    # kappa_B = 1.0        # optional norm bound, defaults to |B|

    [noise]
    kind = "sphere_uniform"    # sphere_uniform | scaled_rademacher | truncated_gaussian
    W = 1.0                    # almost-sure norm bound

    [cost]
    kind = "spherical_alternating"   # also: spherical_random, quadratic_constant
    alpha = 1.0                      # spherical scale range [alpha, beta]
    beta = 2.0
    # quadratic_constant instead takes Q = [[..]], R = [[..]] and optional
    # x_offset = [..], u_offset = [..]

    [run]
    T = 32768
    replicas = 20
    seed = 20240601
    variants = ["ogd", "ong"]
    H = 0                  # 0 = choose ceil(log(T kappa^2)/gamma)
    out_dir = "out/run"
    # K_fixed = [[0.4]]    # optional; default is the Riccati gain
    # ogd_lambda = 0.0     # 0 = auto step constant
    # ong_alpha = 0.0      # 0 = cost strong-convexity alpha
    # comparator_grid = 201
    # comparator_half_width = 2.0
    # store_policies = false
    # ong_euclidean_fallback = false
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

try:
    import tomllib  # pragma: no cover
except ModuleNotFoundError:
    import tomli as tomllib

from ..lds import LinearSystem, NoiseModel, QuadraticCost
from ..rng import substream


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration."""


COST_KINDS = ("spherical_alternating", "spherical_random", "quadratic_constant")


@dataclass(frozen=True)
class ExperimentConfig:
    raw_text: str
    system: LinearSystem
    noise: NoiseModel
    cost_kind: str
    cost_alpha: float
    cost_beta: float
    cost_Q: Optional[np.ndarray]
    cost_R: Optional[np.ndarray]
    cost_x_offset: Optional[np.ndarray]
    cost_u_offset: Optional[np.ndarray]
    T: int
    replicas: int
    seed: int
    variants: tuple
    H: int
    out_dir: str
    k_fixed: Optional[np.ndarray]
    ogd_lambda: float
    ong_alpha: float
    comparator_grid: int
    comparator_half_width: float
    store_policies: bool
    ong_euclidean_fallback: bool


def _matrix_or_none(table: dict, key: str) -> Optional[np.ndarray]:
    if key not in table:
        return None
    return np.array(table[key], dtype=float)


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    try:
        sys_tab = data["system"]
        noise_tab = data["noise"]
        cost_tab = data["cost"]
        run_tab = data["run"]
    except KeyError as exc:
        raise ConfigError(f"missing config section {exc}") from exc

    try:
        system = LinearSystem(
            np.array(sys_tab["A"], dtype=float),
            np.array(sys_tab["B"], dtype=float),
            float(sys_tab.get("kappa_B", 0.0)),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [system] section: {exc}") from exc

    kind = noise_tab.get("kind", "sphere_uniform")
    W = float(noise_tab.get("W", 1.0))
    try:
        if kind == "sphere_uniform":
            noise = NoiseModel.sphere_uniform(system.d_x, W)
        elif kind == "scaled_rademacher":
            noise = NoiseModel.scaled_rademacher(system.d_x, W)
        elif kind == "truncated_gaussian":
            noise = NoiseModel.truncated_gaussian(system.d_x, W)
        else:
            raise ConfigError(f"unknown noise kind {kind!r}")
    except ValueError as exc:
        raise ConfigError(f"bad [noise] section: {exc}") from exc

    cost_kind = cost_tab.get("kind", "spherical_alternating")
    if cost_kind not in COST_KINDS:
        raise ConfigError(f"unknown cost kind {cost_kind!r}; choose from {COST_KINDS}")
    cost_alpha = float(cost_tab.get("alpha", 1.0))
    cost_beta = float(cost_tab.get("beta", cost_alpha))
    if cost_alpha <= 0.0 or cost_beta < cost_alpha:
        raise ConfigError("need 0 < alpha <= beta in [cost]")
    cost_Q = _matrix_or_none(cost_tab, "Q")
    cost_R = _matrix_or_none(cost_tab, "R")
    if cost_kind == "quadratic_constant":
        if cost_Q is None or cost_R is None:
            raise ConfigError("quadratic_constant cost needs Q and R")
        if cost_Q.shape != (system.d_x, system.d_x) or cost_R.shape != (system.d_u, system.d_u):
            raise ConfigError(
                f"cost matrices must be ({system.d_x}, {system.d_x}) and ({system.d_u}, {system.d_u})"
            )
    x_off = cost_tab.get("x_offset")
    u_off = cost_tab.get("u_offset")

    T = int(run_tab.get("T", 1024))
    replicas = int(run_tab.get("replicas", 20))
    seed = int(run_tab.get("seed", 0))
    variants = tuple(run_tab.get("variants", ["ogd"]))
    for v in variants:
        if v not in ("ogd", "ong"):
            raise ConfigError(f"unknown variant {v!r}")
    if T < 1 or replicas < 1 or not variants:
        raise ConfigError("T and replicas must be positive and variants non-empty")
    k_fixed = _matrix_or_none(run_tab, "K_fixed")
    if k_fixed is not None and k_fixed.shape != (system.d_u, system.d_x):
        raise ConfigError(f"K_fixed must have shape ({system.d_u}, {system.d_x})")

    return ExperimentConfig(
        raw_text=text,
        system=system,
        noise=noise,
        cost_kind=cost_kind,
        cost_alpha=cost_alpha,
        cost_beta=cost_beta,
        cost_Q=cost_Q,
        cost_R=cost_R,
        cost_x_offset=np.array(x_off, dtype=float) if x_off is not None else None,
        cost_u_offset=np.array(u_off, dtype=float) if u_off is not None else None,
        T=T,
        replicas=replicas,
        seed=seed,
        variants=variants,
        H=int(run_tab.get("H", 0)),
        out_dir=str(run_tab.get("out_dir", "out/run")),
        k_fixed=k_fixed,
        ogd_lambda=float(run_tab.get("ogd_lambda", 0.0)),
        ong_alpha=float(run_tab.get("ong_alpha", 0.0)),
        comparator_grid=int(run_tab.get("comparator_grid", 201)),
        comparator_half_width=float(run_tab.get("comparator_half_width", 2.0)),
        store_policies=bool(run_tab.get("store_policies", False)),
        ong_euclidean_fallback=bool(run_tab.get("ong_euclidean_fallback", False)),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def cost_stream(config: ExperimentConfig) -> Callable[[int], QuadraticCost]:
    """Deterministic stage-cost sequence (1-based step index), shared by all replicas."""
    d_x, d_u = config.system.d_x, config.system.d_u
    if config.cost_kind == "spherical_alternating":
        low = QuadraticCost.spherical(config.cost_alpha, d_x, d_u)
        high = QuadraticCost.spherical(config.cost_beta, d_x, d_u)

        def stream(s: int) -> QuadraticCost:
            return low if s % 2 == 1 else high

        return stream
    if config.cost_kind == "spherical_random":
        rng = substream(config.seed, "cost_stream")
        scales = config.cost_alpha + (config.cost_beta - config.cost_alpha) * rng.uniform(
            size=config.T
        )
        cache = [QuadraticCost.spherical(float(r), d_x, d_u) for r in np.unique(scales)]
        lookup = {c.spherical_scale: c for c in cache}

        def stream(s: int) -> QuadraticCost:
            return lookup[float(scales[(s - 1) % config.T])]

        return stream
    cost = QuadraticCost(
        config.cost_Q,
        config.cost_R,
        x_offset=config.cost_x_offset,
        u_offset=config.cost_u_offset,
    )

    def stream(s: int) -> QuadraticCost:
        return cost

    return stream
