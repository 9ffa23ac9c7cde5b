"""Thermal position/velocity sampling, free flight, and Monte-Carlo averaging.

Atoms sit in harmonic microtraps while cold, but the traps are switched off
for the whole pulse sequence, so each atom flies ballistically from a
thermally drawn initial condition.  Initial displacements and velocities are
i.i.d. Gaussian per axis with

    sigma_r = sqrt(kB T / (m omega_perp^2))        (um)
    sigma_v = sqrt(kB T / m)                       (um/us)

which for 50 uK in a 2*pi*90 kHz trap gives roughly 0.12 um and 0.07 um/us.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import XYChainError
from .model import BOLTZMANN, PhysicalParams


class MonteCarloError(XYChainError):
    """A Monte-Carlo realization failed; carries the realization seed."""


def sigma_position(params: PhysicalParams) -> float:
    """Thermal rms displacement per axis (um)."""
    if params.temperature == 0.0:
        return 0.0
    return sigma_velocity(params) / params.omega_perp


def sigma_velocity(params: PhysicalParams) -> float:
    """Thermal rms velocity per axis (um/us); numerically equals m/s."""
    if params.temperature == 0.0:
        return 0.0
    return float(np.sqrt(BOLTZMANN * params.temperature * 1e-6 / params.mass))


@dataclass(frozen=True)
class ThermalSample:
    """One draw of initial displacements (um) and velocities (um/us)."""

    displacements: np.ndarray   # (N, 3)
    velocities: np.ndarray      # (N, 3)
    seed: int

    def __post_init__(self):
        for name in ("displacements", "velocities"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_atoms(self) -> int:
        return self.displacements.shape[0]

    def displacements_at(self, t: float) -> np.ndarray:
        """Per-atom displacement after free flight of duration t (us)."""
        return self.displacements + self.velocities * t

    @classmethod
    def at_rest(cls, n_atoms: int, seed: int = 0) -> "ThermalSample":
        zero = np.zeros((n_atoms, 3))
        return cls(displacements=zero, velocities=zero.copy(), seed=seed)


@dataclass(frozen=True)
class EnsembleResult:
    """Mean and standard error over seeded Monte-Carlo realizations."""

    mean: np.ndarray
    stderr: np.ndarray
    n_realizations: int


def sample_thermal(params: PhysicalParams, n_atoms: int, seed: int) -> ThermalSample:
    """Draw one thermal realization; T = 0 yields exact zeros."""
    if params.temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {params.temperature}")
    if params.temperature == 0.0:
        return ThermalSample.at_rest(n_atoms, seed=seed)
    rng = np.random.default_rng(seed)
    r0 = rng.normal(0.0, sigma_position(params), size=(n_atoms, 3))
    v0 = rng.normal(0.0, sigma_velocity(params), size=(n_atoms, 3))
    return ThermalSample(displacements=r0, velocities=v0, seed=seed)


def free_flight(sample: ThermalSample, t: float) -> np.ndarray:
    """Displacement of every atom at time t (us): r0 + v0 t."""
    if t < 0:
        raise ValueError(f"free flight time must be >= 0, got {t}")
    return sample.displacements_at(t)


def realization_seeds(base_seed: int, n_realizations: int) -> list[int]:
    """Deterministic per-realization seeds derived from a base seed."""
    state = np.random.SeedSequence(base_seed).generate_state(
        n_realizations, dtype=np.uint64
    )
    return [int(s) for s in state]


def monte_carlo(
    run: Callable[[int], np.ndarray],
    n_realizations: int,
    base_seed: int,
    n_workers: int = 1,
) -> EnsembleResult:
    """Average ``run(seed)`` over deterministically seeded realizations.

    Results are accumulated in realization order regardless of execution
    order, so the mean is bit-identical for any ``n_workers``.  Failures are
    re-raised with the offending realization index and seed attached.
    """
    if n_realizations < 1:
        raise ValueError("n_realizations must be >= 1")
    seeds = realization_seeds(base_seed, n_realizations)

    def call(index: int) -> np.ndarray:
        try:
            return np.asarray(run(seeds[index]), dtype=float)
        except Exception as exc:
            raise MonteCarloError(
                f"realization {index} (seed {seeds[index]}) failed: {exc}"
            ) from exc

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(call, range(n_realizations)))
    else:
        results = [call(i) for i in range(n_realizations)]

    stacked = np.stack(results, axis=0)
    mean = stacked.mean(axis=0)
    if n_realizations == 1:
        stderr = np.zeros_like(mean)
    else:
        stderr = stacked.std(axis=0, ddof=1) / np.sqrt(n_realizations)
    return EnsembleResult(mean=mean, stderr=stderr, n_realizations=n_realizations)


def recapture_epsilon(
    params: PhysicalParams,
    trap_depth: float,
    t: float,
    n_mc: int,
    seed: int = 0,
    floor: float = 0.0,
) -> float:
    """Model-backed loss probability after a trap-off interval t (us).

    A thermally sampled atom is lost if its harmonic-trap energy at
    recapture, 1/2 m v^2 + 1/2 m omega_perp^2 |r0 + v0 t|^2, exceeds the trap
    depth (uK equivalent).  A t-independent background floor combines with
    the thermal channel as independent losses, so T = 0 returns the floor
    exactly.  This is a declared approximation to the real trap potential,
    calibrated only against measured endpoint values.
    """
    if t < 0:
        raise ValueError(f"recapture time must be >= 0, got {t}")
    if not 0.0 <= floor <= 1.0:
        raise ValueError(f"background floor must be in [0, 1], got {floor}")
    if params.temperature == 0.0:
        return floor
    rng = np.random.default_rng(seed)
    sr = sigma_position(params)
    sv = sigma_velocity(params)
    r0 = rng.normal(0.0, sr, size=(n_mc, 3))
    v0 = rng.normal(0.0, sv, size=(n_mc, 3))
    rt = r0 + v0 * t
    # energy in uK: m [kg] * (um/us)^2 = J numerically, then / kB -> K
    energy_uk = (
        0.5
        * params.mass
        * ((v0**2).sum(axis=1) + params.omega_perp**2 * (rt**2).sum(axis=1))
        / BOLTZMANN
        * 1e6
    )
    p_escape = float(np.mean(energy_uk > trap_depth))
    return floor + (1.0 - floor) * p_escape
