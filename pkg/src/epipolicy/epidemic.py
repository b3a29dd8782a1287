"""SEIR / SEIRb world model.

State is continuous (fractional persons) and advanced with forward Euler
steps. Transmission is decomposed as::

    beta_eff = beta0 * b * g * eps

    g = 1 - alpha * G                 # government restriction G in [0, 1]
    b = 1                             # World 1
    b = 1 / (1 + k * weekly_cases)    # World 2, lagged weekly mean cases
    eps ~ Uniform(noise_lo, noise_hi) # one draw per calendar day

Reported daily cases are the exposed-to-infectious flow ``E / L``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np


class DomainError(ValueError):
    """An input lies outside the domain of a model function."""


class SimulationError(RuntimeError):
    """The integrator produced a non-finite state."""


class WorldMode(str, enum.Enum):
    WORLD1 = "world1"  # policy is the only lever
    WORLD2 = "world2"  # voluntary behavioral adaptation

    @classmethod
    def parse(cls, value: "WorldMode | str | int") -> "WorldMode":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace(" ", "").replace("_", "")
        aliases = {"1": cls.WORLD1, "world1": cls.WORLD1, "2": cls.WORLD2, "world2": cls.WORLD2}
        try:
            return aliases[text]
        except KeyError:
            raise ValueError(f"unknown world mode: {value!r}") from None


@dataclass(frozen=True)
class WorldConfig:
    """Epidemic parameters. Defaults reproduce the reference parameter table."""

    N: int = 1_000_000
    S0: float = 999_999.0
    E0: float = 0.0
    I0: float = 1.0
    beta0: float = 0.2
    L: float = 4.0
    D: float = 10.0
    alpha: float = 0.8
    k: float = 5e-4
    mode: WorldMode = WorldMode.WORLD1
    noise_lo: float = 0.5
    noise_hi: float = 1.5
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", WorldMode.parse(self.mode))
        if self.beta0 < 0 or self.N <= 0:
            raise ValueError("beta0 must be non-negative and N positive")
        if self.noise_lo < 0:
            raise ValueError("noise factors must be non-negative")
        if self.L <= 0 or self.D <= 0:
            raise ValueError("latent and infectious periods must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")
        if self.noise_lo > self.noise_hi:
            raise ValueError("noise_lo must not exceed noise_hi")
        if self.dt <= 0 or not math.isclose(1.0 / self.dt, round(1.0 / self.dt)):
            raise ValueError(f"dt must divide one day evenly, got {self.dt}")
        if min(self.S0, self.E0, self.I0) < 0 or self.S0 + self.E0 + self.I0 > self.N * (1 + 1e-12):
            raise ValueError("initial occupancies must be non-negative and fit in N")

    @property
    def R0_init(self) -> float:
        return float(self.N) - self.S0 - self.E0 - self.I0

    @property
    def substeps(self) -> int:
        return int(round(1.0 / self.dt))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        return cls(**data)

    def with_mode(self, mode) -> "WorldConfig":
        return replace(self, mode=WorldMode.parse(mode))


@dataclass(frozen=True)
class EpidemicState:
    day: int
    S: float
    E: float
    I: float
    R: float

    @property
    def total(self) -> float:
        return self.S + self.E + self.I + self.R

    @classmethod
    def initial(cls, config: WorldConfig) -> "EpidemicState":
        return cls(0, float(config.S0), float(config.E0), float(config.I0), config.R0_init)


@dataclass(frozen=True)
class TransmissionFactors:
    b: float
    g: float
    eps: float
    beta_eff: float

    @classmethod
    def compute(cls, beta0: float, b: float, g: float, eps: float) -> "TransmissionFactors":
        return cls(b, g, eps, effective_beta(beta0, b, g, eps))


def government_effect(G: float, alpha: float) -> float:
    """Multiplier on transmission from a restriction level ``G`` in [0, 1]."""
    if not 0.0 <= G <= 1.0:
        raise DomainError(f"restriction level must lie in [0, 1], got {G!r}")
    return 1.0 - alpha * G


def behavior_modifier(mode, k: float, weekly_cases: float) -> float:
    if weekly_cases < 0 or math.isnan(weekly_cases):
        raise DomainError(f"weekly cases must be non-negative, got {weekly_cases!r}")
    if WorldMode.parse(mode) is WorldMode.WORLD1:
        return 1.0
    return 1.0 / (1.0 + k * weekly_cases)


def effective_beta(beta0: float, b: float, g: float, eps: float) -> float:
    return beta0 * b * g * eps


def draw_noise(rng: np.random.Generator, config: WorldConfig | None = None) -> float:
    """Draw the daily transmission noise. Consumes exactly one uniform variate."""
    lo, hi = (0.5, 1.5) if config is None else (config.noise_lo, config.noise_hi)
    return float(rng.uniform(lo, hi))


def _euler_substep(S, E, I, R, beta_eff, N, L, D, dt):
    # Outflows are capped at current occupancy so no compartment goes negative
    # and the total stays exactly balanced.
    infection = min(beta_eff * S * I / N * dt, S)
    onset = min(E / L * dt, E)
    recovery = min(I / D * dt, I)
    return (
        S - infection,
        E + infection - onset,
        I + onset - recovery,
        R + recovery,
    )


def seir_step(state: EpidemicState, beta_eff: float, config: WorldConfig) -> EpidemicState:
    """Advance one day. ``beta_eff`` is held fixed across sub-steps."""
    if beta_eff < 0:
        raise DomainError(f"beta_eff must be non-negative, got {beta_eff!r}")
    S, E, I, R = state.S, state.E, state.I, state.R
    for _ in range(config.substeps):
        S, E, I, R = _euler_substep(S, E, I, R, beta_eff, config.N, config.L, config.D, config.dt)
    if not all(map(math.isfinite, (S, E, I, R))):
        raise SimulationError(f"non-finite state on day {state.day + 1}: {(S, E, I, R)}")
    return EpidemicState(state.day + 1, S, E, I, R)


def reported_cases(state: EpidemicState, L: float) -> float:
    return state.E / L


def weekly_mean_cases(case_buffer: Sequence[float], t: int, delta: int = 7) -> float:
    """Mean daily reported cases over days ``t - delta .. t - 1``.

    ``case_buffer[i]`` holds the cases of day ``i + 1``. During the first
    interval (``t <= delta``) there is no completed week and 0 is returned.
    """
    if t <= delta:
        return 0.0
    window = case_buffer[t - delta - 1 : t - 1]
    if len(window) != delta:
        raise ValueError(f"case buffer holds {len(case_buffer)} days, need days < {t}")
    return math.fsum(window) / delta


def simulate_fixed_policy(
    config: WorldConfig,
    days: int,
    restriction: float | Sequence[float] = 0.0,
    rng: np.random.Generator | None = None,
    delta: int = 7,
) -> dict[str, np.ndarray]:
    """Run the world model with an exogenous daily restriction schedule.

    The draw order and behavioral lag match the agent-driven run loop, so a
    schedule recorded from an agent run reproduces that run's trajectory.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    schedule = np.broadcast_to(np.asarray(restriction, dtype=float), (days,))
    state = EpidemicState.initial(config)
    cases: list[float] = []
    out = {key: np.empty(days) for key in ("S", "E", "I", "R", "cases", "b", "g", "eps")}
    b = 1.0
    for t in range(1, days + 1):
        if t == 1 or (t - 1) % delta == 0:
            b = behavior_modifier(config.mode, config.k, weekly_mean_cases(cases, t, delta))
        g = government_effect(float(schedule[t - 1]), config.alpha)
        eps = draw_noise(rng, config)
        state = seir_step(state, effective_beta(config.beta0, b, g, eps), config)
        cases.append(reported_cases(state, config.L))
        for key, value in zip(("S", "E", "I", "R", "cases", "b", "g", "eps"),
                              (state.S, state.E, state.I, state.R, cases[-1], b, g, eps)):
            out[key][t - 1] = value
    return out
