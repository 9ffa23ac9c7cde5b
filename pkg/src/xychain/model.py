"""Unit conventions, chain geometry, and the dipolar coupling law.

Unit system used throughout the package:

* length        micrometres (um)
* time          microseconds (us)
* frequency     MHz, always as *ordinary* (non-angular) frequency; any
                propagator converts to phase via ``2*pi*nu*t``
* energy        quoted as E/h in MHz
* temperature   microkelvin (uK)
* mass          kg

With these choices 1 MHz * 1 us is exactly one oscillation cycle, and a
thermal velocity computed in SI (m/s) is numerically equal to um/us.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import GeometryError

# Boltzmann constant (J/K) and the mass of a generic heavy alkali atom used
# in the experiments this package models (87Rb, kg).
BOLTZMANN = 1.380649e-23
RB87_MASS = 1.44316060e-25

#: Effective on-axis dipolar coefficient, MHz um^3.
DEFAULT_C3 = 7965.0

#: Angle at which the dipolar angular factor 1 - 3 cos^2(theta) vanishes.
MAGIC_ANGLE = math.acos(1.0 / math.sqrt(3.0))

# Distances below this (um) are treated as coincident atoms.
_MIN_SEPARATION = 1e-9


def to_angular(nu):
    """Ordinary frequency (MHz) -> angular frequency (rad/us)."""
    return 2.0 * np.pi * np.asarray(nu)


def to_ordinary(omega):
    """Angular frequency (rad/us) -> ordinary frequency (MHz)."""
    return np.asarray(omega) / (2.0 * np.pi)


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ChainGeometry:
    """Rest positions of the atoms and the quantization axis.

    Positions are full 3-vectors (um) even for linear chains so that planar
    arrays need no schema change.  The quantization axis is stored as a unit
    vector; the chain of the reference experiments is aligned with it.
    """

    positions: np.ndarray
    quantization_axis: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 0.0, 0.0])
    )

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise GeometryError(f"positions must be (N, 3), got {pos.shape}")
        axis = np.asarray(self.quantization_axis, dtype=float)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise GeometryError("quantization axis must be a nonzero vector")
        object.__setattr__(self, "positions", _as_readonly(pos))
        object.__setattr__(self, "quantization_axis", _as_readonly(axis / norm))

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def line(cls, n_atoms: int, spacing: float, axis=(1.0, 0.0, 0.0)) -> "ChainGeometry":
        """Evenly spaced chain along ``axis``, quantization axis parallel to it."""
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        pos = np.outer(np.arange(n_atoms) * spacing, axis)
        return cls(positions=pos, quantization_axis=axis)

    def separations(self) -> np.ndarray:
        """Pairwise distance matrix R_ij (um), zero diagonal."""
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of a run.

    ``c3`` is the effective dipolar coefficient along the chain axis; the
    underlying angular-law prefactor ``c3_tilde`` is optional metadata that
    relates to it through :func:`angular_c3`.  ``omega_opt``, ``delta_opt``
    and ``gamma_eff`` may be scalars or per-atom sequences.  ``gamma_eff`` is
    the effective damping of the ground-Rydberg transition and acts only
    during optical pulse segments.
    """

    c3: float = DEFAULT_C3                      # MHz um^3, effective on-axis
    c3_tilde: float | None = -DEFAULT_C3 / 2.0  # MHz um^3, angular prefactor
    omega_opt: float | Sequence[float] = 5.3    # MHz, ground<->up drive
    delta_opt: float | Sequence[float] = 0.0    # MHz, optical detuning
    omega_mw: float = 4.6                       # MHz, up<->down drive
    gamma_eff: float | Sequence[float] = 1.0    # 1/us, optical-pulse damping
    gamma_up: float = 1.0 / 101.0               # 1/us, up-state decay
    gamma_down: float = 1.0 / 135.0             # 1/us, down-state decay
    addressing_shift: float = 20.0              # MHz, light shift on masked atoms
    temperature: float = 50.0                   # uK
    omega_perp: float = 2.0 * np.pi * 0.09      # rad/us, trap frequency
    mass: float = RB87_MASS                     # kg

    def _per_atom(self, value, n_atoms: int) -> np.ndarray:
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            return np.full(n_atoms, float(arr))
        if arr.shape != (n_atoms,):
            raise ValueError(
                f"per-atom parameter has shape {arr.shape}, expected ({n_atoms},)"
            )
        return arr.copy()

    def omega_opt_per_atom(self, n_atoms: int) -> np.ndarray:
        return self._per_atom(self.omega_opt, n_atoms)

    def delta_opt_per_atom(self, n_atoms: int) -> np.ndarray:
        return self._per_atom(self.delta_opt, n_atoms)

    def gamma_eff_per_atom(self, n_atoms: int) -> np.ndarray:
        return self._per_atom(self.gamma_eff, n_atoms)


def angular_c3(c3_tilde: float, theta: float) -> float:
    """Dipolar coefficient at angle ``theta`` from the quantization axis.

    Returns ``c3_tilde * (1 - 3 cos^2 theta)`` (MHz um^3).  Vanishes at the
    magic angle and is even and pi-periodic in ``theta``.
    """
    return c3_tilde * (1.0 - 3.0 * math.cos(theta) ** 2)


def pair_coupling(
    geometry: ChainGeometry,
    params: PhysicalParams,
    i: int,
    j: int,
    displacement_i=None,
    displacement_j=None,
) -> float:
    """Hopping frequency c3 / R_ij^3 (MHz) between atoms ``i`` and ``j``.

    Optional displacements (um, e.g. from thermal motion) are added to the
    rest positions before computing the separation.  Symmetric in (i, j).
    """
    if i == j:
        raise GeometryError("pair coupling requires two distinct atoms")
    ri = geometry.positions[i].copy()
    rj = geometry.positions[j].copy()
    if displacement_i is not None:
        ri += np.asarray(displacement_i, dtype=float)
    if displacement_j is not None:
        rj += np.asarray(displacement_j, dtype=float)
    r = np.linalg.norm(ri - rj)
    if r < _MIN_SEPARATION:
        raise GeometryError(f"atoms {i} and {j} are coincident (R = {r:g} um)")
    return params.c3 / r**3


def validate(geometry: ChainGeometry, params: PhysicalParams) -> list[str]:
    """Check the shared invariants; returns human-readable violations.

    An empty list means the pair (geometry, params) is usable by every other
    module.  Diagnostics, not exceptions: callers decide severity.
    """
    issues: list[str] = []
    n = geometry.n_atoms
    sep = geometry.separations()
    for i in range(n):
        for j in range(i + 1, n):
            if sep[i, j] < _MIN_SEPARATION:
                issues.append(
                    f"singular geometry: atoms {i} and {j} coincide "
                    f"(R = {sep[i, j]:g} um)"
                )
    for name in ("gamma_up", "gamma_down"):
        if getattr(params, name) < 0:
            issues.append(f"non-physical rate: {name} = {getattr(params, name)} < 0")
    try:
        if np.any(params.gamma_eff_per_atom(n) < 0):
            issues.append("non-physical rate: gamma_eff has negative entries")
        omega = params.omega_opt_per_atom(n)
        if np.any(omega < 0):
            issues.append("non-physical drive: omega_opt has negative entries")
        params.delta_opt_per_atom(n)
    except ValueError as exc:
        issues.append(str(exc))
    if params.mass <= 0:
        issues.append(f"non-physical mass: {params.mass} kg")
    if params.temperature < 0:
        issues.append(f"non-physical temperature: {params.temperature} uK")
    if params.temperature > 0 and params.omega_perp <= 0:
        issues.append(
            "omega_perp must be positive when temperature > 0 "
            f"(got {params.omega_perp})"
        )
    return issues
