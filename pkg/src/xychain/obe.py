"""Open-system simulation of the full pulse sequence on {g, up, down}^N.

Each atom carries three levels: the ground state, and the two Rydberg levels
("up" and "down") that encode the pseudo-spin.  The density matrix lives on
the dense 3^N product space (hard cap N <= 6; longer chains use the
closed-system module).  Per segment kind the Hamiltonian contains

* optical:    sum_i Omega_L^i/2 (|u><g| + |g><u|) - delta_i (|u><u| + |d><d|),
              with the addressing light shift folded into delta_i for masked
              atoms, plus the exchange interaction;
* microwave:  Omega_MW/2 sum_i (|d><u| + |u><d|) plus the interaction;
* free:       the exchange interaction alone,

where the interaction is sum_{i<j} c3/R_ij(t)^3 (|d u><u d| + h.c.) on the
pair (i, j) and R_ij(t) follows the atoms' free flight.  Dissipation is a
Lindblad term with decay up -> g at rate gamma_up (+ gamma_eff during
optical segments only) and down -> g at rate gamma_down.

Entries are ordinary frequencies (MHz); the equation of motion integrated by
fixed-step 4th-order Runge-Kutta is

    drho/dt = -2 pi i [H, rho] + L[rho].

The step size obeys 2 pi dt max(Omega, delta, nu_max) < 0.05 with additional
per-segment-kind safety margins chosen so that halving dt changes sampled
populations by less than 1e-6.  All states are batchable: a leading batch
axis carries independent thermal realizations or readout branches.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import IntEnum
from functools import reduce
from typing import Optional, Sequence, Union

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    njit = None

from .errors import ConfigError, GeometryError, IntegrationError
from .model import ChainGeometry, PhysicalParams
from .thermal import ThermalSample

SEGMENT_KINDS = ("optical", "microwave", "free_evolution")

#: Bound on phase advance per integrator step, 2*pi*scale*dt.
PHASE_CAP = 0.05
# Safety margins by segment character, tuned empirically so that halving dt
# changes sampled populations by < 1e-6 end to end and the density matrix
# stays positive within -1e-7.  Microwave pulses act on nearly pure states
# whose zero eigenvalues expose the integration error directly; addressed
# optical pulses carry the largest level splitting relative to the
# step-control scale; static (motionless) free evolution uses a wider margin
# because deterministic theory curves are held to the tightest tolerances.
_MARGIN_OPTICAL = 1.2
_MARGIN_MICROWAVE = 2.0
_MARGIN_ADDRESSED = 3.0
_MARGIN_FREE = 3.0
_MARGIN_FREE_STATIC = 6.0
# Error per step scales as (scale*dt)^5 and accumulates over duration*scale
# steps, so margins widen as (duration*scale / reference)^(1/4) beyond the
# reference phase budgets below.
_REF_BUDGET_DRIVE = 0.5
_REF_BUDGET_FREE = 7.0

_MAX_OBE_ATOMS = 6
_POSITIVITY_TOL = -1e-7


class Level(IntEnum):
    """Single-atom levels; the product-basis digit order is g, up, down."""

    G = 0
    UP = 1
    DOWN = 2


# Fused single-pass kernels for the bandwidth-bound parts of the RK4 loop;
# the numpy fallbacks below compute exactly the same expressions.
if njit is not None:

    @njit(cache=True)
    def _rhs_finish_kernel(out, m, rho, w, idx_g, idx_up, idx_dn, rates_up, rate_down):
        batch, dim = out.shape[0], out.shape[1]
        n_atoms, block = idx_g.shape
        two_pi = 2.0 * np.pi
        for b in range(batch):
            for r in range(dim):
                for c in range(dim):
                    z = m[b, r, c] - np.conj(m[b, c, r])
                    out[b, r, c] = -1j * two_pi * z - w[r, c] * rho[b, r, c]
            for a in range(n_atoms):
                rate = rates_up[a]
                for i in range(block):
                    gi, ui, di = idx_g[a, i], idx_up[a, i], idx_dn[a, i]
                    for j in range(block):
                        out[b, gi, idx_g[a, j]] += (
                            rate * rho[b, ui, idx_up[a, j]]
                            + rate_down * rho[b, di, idx_dn[a, j]]
                        )

    @njit(cache=True)
    def _axpy_kernel(out, x, alpha, y):
        flat_out = out.reshape(-1)
        flat_x = x.reshape(-1)
        flat_y = y.reshape(-1)
        for i in range(flat_out.size):
            flat_out[i] = flat_x[i] + alpha * flat_y[i]

    @njit(cache=True)
    def _rk4_combine_kernel(rho, k1, k2, k3, k4, h6):
        flat_r = rho.reshape(-1)
        f1, f2 = k1.reshape(-1), k2.reshape(-1)
        f3, f4 = k3.reshape(-1), k4.reshape(-1)
        for i in range(flat_r.size):
            flat_r[i] += h6 * (f1[i] + 2.0 * (f2[i] + f3[i]) + f4[i])

else:  # pragma: no cover - exercised only without numba
    _rhs_finish_kernel = None
    _axpy_kernel = None
    _rk4_combine_kernel = None


_LEVEL_CHARS = {"g": Level.G, "u": Level.UP, "d": Level.DOWN}


@dataclass(frozen=True)
class PulseSegment:
    """One piece of the experimental sequence.

    The kind selects which drives are active: optical segments couple
    g <-> up (and carry the effective damping gamma_eff), microwave segments
    couple up <-> down, free evolution has the interaction only.  The
    addressing mask marks atoms shifted out of resonance by the addressing
    beam during an optical segment.
    """

    kind: str
    duration: float
    addressing_mask: Optional[tuple[bool, ...]] = None

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ConfigError(f"segment kind must be one of {SEGMENT_KINDS}")
        if not self.duration > 0:
            raise ConfigError(f"segment duration must be > 0, got {self.duration}")
        if self.addressing_mask is not None:
            if self.kind != "optical":
                raise ConfigError("addressing mask only applies to optical segments")
            object.__setattr__(
                self, "addressing_mask", tuple(bool(b) for b in self.addressing_mask)
            )

    @classmethod
    def optical(cls, duration: float, addressing_mask=None) -> "PulseSegment":
        return cls("optical", duration, addressing_mask)

    @classmethod
    def microwave(cls, duration: float) -> "PulseSegment":
        return cls("microwave", duration)

    @classmethod
    def free(cls, duration: float) -> "PulseSegment":
        return cls("free_evolution", duration)


@dataclass(frozen=True)
class PulseSequence:
    """Ordered segments plus the readout convention.

    ``recaptured_levels`` names the levels that map to a recaptured atom at
    readout; with the standard de-excitation pulse that is the ground state
    alone (both Rydberg levels are lost).
    """

    segments: tuple[PulseSegment, ...]
    recaptured_levels: frozenset[Level] = frozenset({Level.G})

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ConfigError("a pulse sequence needs at least one segment")

    @property
    def total_duration(self) -> float:
        return float(sum(seg.duration for seg in self.segments))


@dataclass(frozen=True)
class ProductDensityMatrix:
    """Density matrix on the 3^N product space with on-demand checks."""

    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise ValueError(f"rho must be square, got {rho.shape}")
        n = round(math.log(rho.shape[0], 3))
        if 3**n != rho.shape[0]:
            raise ValueError(f"rho dimension {rho.shape[0]} is not a power of 3")
        rho = rho.copy()
        rho.flags.writeable = False
        object.__setattr__(self, "rho", rho)

    @property
    def n_atoms(self) -> int:
        return round(math.log(self.rho.shape[0], 3))

    def validate(self) -> list[str]:
        issues = []
        herm = np.max(np.abs(self.rho - self.rho.conj().T))
        if herm > 1e-9:
            issues.append(f"hermiticity deviation {herm:g} > 1e-9")
        trace = abs(np.trace(self.rho) - 1.0)
        if trace > 1e-8:
            issues.append(f"trace deviation {trace:g} > 1e-8")
        min_eig = float(np.linalg.eigvalsh(self.rho).min())
        if min_eig < _POSITIVITY_TOL:
            issues.append(f"minimum eigenvalue {min_eig:g} < {_POSITIVITY_TOL:g}")
        return issues


def level_labels(n_atoms: int) -> list[str]:
    """Basis-state labels ('g'/'u'/'d' per atom) in product-index order."""
    return ["".join(s) for s in itertools.product("gud", repeat=n_atoms)]


def pattern_labels(n_atoms: int) -> list[str]:
    """Recapture-pattern labels ('1' = recaptured) in pattern-index order."""
    return ["".join(s) for s in itertools.product("01", repeat=n_atoms)]


def basis_index(labels: str) -> int:
    """Product-basis index of a label string, atom 0 most significant."""
    idx = 0
    for ch in labels:
        idx = 3 * idx + int(_LEVEL_CHARS[ch])
    return idx


def basis_rho(labels: str) -> np.ndarray:
    """Pure-state density matrix for a product label such as 'udd'."""
    d = 3 ** len(labels)
    rho = np.zeros((d, d), dtype=complex)
    k = basis_index(labels)
    rho[k, k] = 1.0
    return rho


def _site_operator(op: np.ndarray, site: int, n_atoms: int) -> np.ndarray:
    mats = [np.eye(3)] * n_atoms
    mats[site] = op
    return reduce(np.kron, mats)


def _transition(a: Level, b: Level) -> np.ndarray:
    op = np.zeros((3, 3))
    op[a, b] = 1.0
    return op


class _OperatorTable:
    """Dense product-space operators for a given atom count."""

    _cache: dict[int, "_OperatorTable"] = {}

    def __init__(self, n_atoms: int):
        self.n = n_atoms
        self.d = 3**n_atoms
        self.x_gu = [
            _site_operator(
                _transition(Level.UP, Level.G) + _transition(Level.G, Level.UP), i, n_atoms
            )
            for i in range(n_atoms)
        ]
        self.x_ud = [
            _site_operator(
                _transition(Level.DOWN, Level.UP) + _transition(Level.UP, Level.DOWN),
                i,
                n_atoms,
            )
            for i in range(n_atoms)
        ]
        levels = np.array(
            [list(s) for s in itertools.product(range(3), repeat=n_atoms)]
        )  # (d, n)
        self.levels = levels
        self.diag_up = [(levels[:, i] == Level.UP).astype(float) for i in range(n_atoms)]
        self.diag_down = [
            (levels[:, i] == Level.DOWN).astype(float) for i in range(n_atoms)
        ]
        self.diag_rydberg = [
            self.diag_up[i] + self.diag_down[i] for i in range(n_atoms)
        ]
        # index pairs mapping the recycling term: rho[up_i block] -> rho[g_i block]
        self.idx_g, self.idx_up, self.idx_down = [], [], []
        for i in range(n_atoms):
            sel = np.nonzero(levels[:, i] == Level.G)[0]
            stride = 3 ** (n_atoms - 1 - i)
            self.idx_g.append(sel)
            self.idx_up.append(sel + stride)
            self.idx_down.append(sel + 2 * stride)
        self.idx_g_stack = np.stack(self.idx_g).astype(np.int64)
        self.idx_up_stack = np.stack(self.idx_up).astype(np.int64)
        self.idx_down_stack = np.stack(self.idx_down).astype(np.int64)
        pairs = [(i, j) for i in range(n_atoms) for j in range(i + 1, n_atoms)]
        self.pairs = pairs
        hop = []
        for i, j in pairs:
            du_i = _site_operator(_transition(Level.DOWN, Level.UP), i, n_atoms)
            ud_j = _site_operator(_transition(Level.UP, Level.DOWN), j, n_atoms)
            op = du_i @ ud_j
            hop.append(op + op.T)
        self.hop_flat = (
            np.stack([h.reshape(-1) for h in hop]).astype(complex)
            if pairs
            else np.zeros((0, self.d * self.d), dtype=complex)
        )

    @classmethod
    def get(cls, n_atoms: int) -> "_OperatorTable":
        if n_atoms not in cls._cache:
            cls._cache[n_atoms] = cls(n_atoms)
        return cls._cache[n_atoms]


def _resolve_initial(initial, n_atoms: int) -> np.ndarray:
    d = 3**n_atoms
    if initial is None:
        return basis_rho("g" * n_atoms)
    if isinstance(initial, str):
        if len(initial) != n_atoms:
            raise ConfigError(f"initial label {initial!r} does not match {n_atoms} atoms")
        return basis_rho(initial)
    if isinstance(initial, ProductDensityMatrix):
        initial = initial.rho
    rho = np.asarray(initial, dtype=complex)
    if rho.shape != (d, d):
        raise ConfigError(f"initial rho must have shape ({d}, {d}), got {rho.shape}")
    return rho.copy()


class _SegmentCache:
    """Per-segment constants: drive Hamiltonian, decay rates, step size."""

    __slots__ = (
        "h_drive_flat",
        "w_matrix",
        "rates_up",
        "rate_down",
        "dt",
        "h_static",
    )

    def __init__(self, h_drive_flat, w_matrix, rates_up, rate_down, dt):
        self.h_drive_flat = h_drive_flat
        self.w_matrix = w_matrix
        self.rates_up = rates_up
        self.rate_down = rate_down
        self.dt = dt
        self.h_static = None


class _Engine:
    """Batched RK4 integrator for the master equation.

    The batch axis carries independent realizations (distinct thermal
    trajectories) or readout branches; all states evolve under the same
    segment structure but their own time-dependent couplings.
    """

    def __init__(
        self,
        geometry: ChainGeometry,
        params: PhysicalParams,
        trajectories: Union[None, ThermalSample, Sequence[ThermalSample]] = None,
        dt_scale: float = 1.0,
        check_positivity: bool = True,
    ):
        n = geometry.n_atoms
        if n > _MAX_OBE_ATOMS:
            raise ConfigError(
                f"dense 3^N master equation is capped at N = {_MAX_OBE_ATOMS} "
                f"atoms, got {n}; use the closed-system module for long chains"
            )
        if not 0 < dt_scale <= 1.0:
            raise ConfigError(f"dt_scale must be in (0, 1], got {dt_scale}")
        self.geometry = geometry
        self.params = params
        self.n = n
        self.ops = _OperatorTable.get(n)
        self.d = self.ops.d
        self.dt_scale = dt_scale
        self.check_positivity = check_positivity

        if trajectories is None:
            samples = [ThermalSample.at_rest(n)]
        elif isinstance(trajectories, ThermalSample):
            samples = [trajectories]
        else:
            samples = list(trajectories)
        for s in samples:
            if s.n_atoms != n:
                raise ConfigError("trajectory sample does not match the geometry")
        self.batch = len(samples)
        pairs = self.ops.pairs
        pos = geometry.positions
        base = np.array([pos[i] - pos[j] for i, j in pairs])  # (P, 3)
        disp = np.stack([s.displacements for s in samples])   # (B, N, 3)
        vel = np.stack([s.velocities for s in samples])
        self._rel0 = base[None, :, :] + np.stack(
            [disp[:, i] - disp[:, j] for i, j in pairs], axis=1
        ) if pairs else np.zeros((self.batch, 0, 3))
        self._relv = (
            np.stack([vel[:, i] - vel[:, j] for i, j in pairs], axis=1)
            if pairs
            else np.zeros((self.batch, 0, 3))
        )
        self.static = not np.any(self._relv) and np.array_equal(
            self._rel0, np.broadcast_to(base, self._rel0.shape)
        ) if pairs else True

        self.omega_opt = params.omega_opt_per_atom(n)
        self.delta_opt = params.delta_opt_per_atom(n)
        self.gamma_eff = params.gamma_eff_per_atom(n)

        # scratch buffers for the allocation-free RK4 hot path
        shape = (self.batch, self.d, self.d)
        self._k = [np.empty(shape, dtype=complex) for _ in range(4)]
        self._tmp = np.empty(shape, dtype=complex)
        self._m1 = np.empty(shape, dtype=complex)
        self._m2 = np.empty(shape, dtype=complex)
        self._hflat = np.empty((self.batch, self.d * self.d), dtype=complex)

    def couplings(self, t) -> np.ndarray:
        """Pair hopping frequencies nu_ij(t), shape (B, P)."""
        if not self.ops.pairs:
            return np.zeros((self.batch, 0))
        t = np.asarray(t, dtype=float)
        rel = self._rel0 + self._relv * t.reshape(-1, 1, 1)
        r = np.linalg.norm(rel, axis=-1)
        if np.any(r < 1e-9):
            raise GeometryError("atoms passed through each other during free flight")
        return self.params.c3 / r**3

    def coupling_bound(self, t_start, duration: float) -> float:
        """Largest coupling reachable anywhere in [t_start, t_start+duration].

        Free flight is ballistic, so the minimum separation of each pair is
        at a window endpoint or at the analytic vertex of |rel0 + relv t|^2;
        sizing the step from this bound keeps the fixed step valid even when
        a thermal draw brings atoms closer together mid-segment.
        """
        if not self.ops.pairs:
            return 0.0
        t_lo = np.asarray(t_start, dtype=float).reshape(-1, 1, 1)
        t_hi = t_lo + duration
        r_sq = np.minimum(
            ((self._rel0 + self._relv * t_lo) ** 2).sum(axis=-1),
            ((self._rel0 + self._relv * t_hi) ** 2).sum(axis=-1),
        )
        speed_sq = (self._relv**2).sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            t_star = -(self._rel0 * self._relv).sum(axis=-1) / speed_sq
        # the vertex only counts when it falls inside the window
        t_star = np.where(speed_sq > 0.0, t_star, np.inf)
        in_window = (t_star > t_lo[:, :, 0]) & (t_star < t_hi[:, :, 0])
        rel_star = self._rel0 + self._relv * np.where(
            in_window, t_star, 0.0
        )[:, :, None]
        r_star_sq = np.where(in_window, (rel_star**2).sum(axis=-1), np.inf)
        r_min = float(np.sqrt(np.minimum(r_sq, r_star_sq).min()))
        if r_min < 1e-9:
            raise GeometryError("atoms pass through each other during free flight")
        return self.params.c3 / r_min**3

    def _segment_cache(self, segment: PulseSegment, t_start) -> _SegmentCache:
        ops = self.ops
        h_drive = np.zeros((self.d, self.d))
        delta_eff = np.zeros(self.n)
        drive_max = 0.0
        if segment.kind == "optical":
            mask = segment.addressing_mask
            if mask is not None and len(mask) != self.n:
                raise ConfigError(
                    f"addressing mask length {len(mask)} != {self.n} atoms"
                )
            delta_eff = self.delta_opt.copy()
            if mask is not None:
                delta_eff += np.asarray(mask, dtype=float) * self.params.addressing_shift
            diag = np.zeros(self.d)
            for i in range(self.n):
                h_drive = h_drive + 0.5 * self.omega_opt[i] * ops.x_gu[i]
                diag -= delta_eff[i] * ops.diag_rydberg[i]
            h_drive[np.diag_indices(self.d)] += diag
            drive_max = float(np.max(np.abs(self.omega_opt)))
        elif segment.kind == "microwave":
            for i in range(self.n):
                h_drive = h_drive + 0.5 * self.params.omega_mw * ops.x_ud[i]
            drive_max = abs(self.params.omega_mw)

        gamma_optical = self.gamma_eff if segment.kind == "optical" else 0.0
        rates_up = self.params.gamma_up + np.broadcast_to(
            gamma_optical, (self.n,)
        ).astype(float)
        rate_down = self.params.gamma_down
        w = np.zeros(self.d)
        for i in range(self.n):
            w += rates_up[i] * ops.diag_up[i] + rate_down * ops.diag_down[i]
        w_matrix = 0.5 * (w[:, None] + w[None, :])

        nu_max = self.coupling_bound(np.atleast_1d(t_start), segment.duration)
        scale = max(drive_max, float(np.max(np.abs(delta_eff))), nu_max)
        if segment.kind == "free_evolution":
            margin = _MARGIN_FREE_STATIC if self.static else _MARGIN_FREE
            budget = _REF_BUDGET_FREE
        elif np.max(np.abs(delta_eff)) > drive_max:
            margin = _MARGIN_ADDRESSED
            budget = _REF_BUDGET_DRIVE
        elif segment.kind == "microwave":
            margin = _MARGIN_MICROWAVE
            budget = _REF_BUDGET_DRIVE
        else:
            margin = _MARGIN_OPTICAL
            budget = _REF_BUDGET_DRIVE
        margin *= max(1.0, (segment.duration * scale / budget)) ** 0.25
        if scale <= 0.0:
            dt = segment.duration
        else:
            dt = PHASE_CAP * self.dt_scale / (2.0 * np.pi * scale * margin)
        cache = _SegmentCache(
            h_drive.astype(complex).reshape(-1), w_matrix, rates_up, rate_down, dt
        )
        if self.static:
            nu = self.couplings(np.zeros(1))[0]
            h_int = (nu @ ops.hop_flat).reshape(self.d, self.d)
            cache.h_static = cache.h_drive_flat.reshape(self.d, self.d) + h_int
        return cache

    def _rhs(self, t, rho, cache: _SegmentCache, out) -> np.ndarray:
        """drho/dt into ``out``; the commutator uses rho H = (H rho)^dagger,
        which keeps the result Hermitian to machine precision."""
        d = self.d
        m1 = self._m1
        if cache.h_static is not None:
            h = cache.h_static
        else:
            nu = self.couplings(t).astype(complex)
            np.matmul(nu, self.ops.hop_flat, out=self._hflat)
            self._hflat += cache.h_drive_flat
            h = self._hflat.reshape(-1, d, d)
        np.matmul(h, rho, out=m1)
        ops = self.ops
        if _rhs_finish_kernel is not None:
            _rhs_finish_kernel(
                out,
                m1,
                rho,
                cache.w_matrix,
                ops.idx_g_stack,
                ops.idx_up_stack,
                ops.idx_down_stack,
                cache.rates_up,
                cache.rate_down,
            )
            return out
        m2 = self._m2
        np.conjugate(m1, out=m2)
        np.subtract(m1, m2.transpose(0, 2, 1), out=out)
        out *= -2j * np.pi
        np.multiply(cache.w_matrix, rho, out=m1)
        out -= m1
        for i in range(self.n):
            g_rows = ops.idx_g[i][:, None]
            g_cols = ops.idx_g[i][None, :]
            out[:, g_rows, g_cols] += (
                cache.rates_up[i] * rho[:, ops.idx_up[i][:, None], ops.idx_up[i][None, :]]
            )
            out[:, g_rows, g_cols] += (
                cache.rate_down * rho[:, ops.idx_down[i][:, None], ops.idx_down[i][None, :]]
            )
        return out

    @staticmethod
    def _axpy(out, x, alpha: float, y):
        """out = x + alpha * y."""
        if _axpy_kernel is not None:
            _axpy_kernel(out, x, alpha, y)
        else:
            np.multiply(y, alpha, out=out)
            out += x

    def _advance(self, rho, t_start, span: float, cache: _SegmentCache):
        """In-place RK4 from t_start over span; t_start has shape (B,)."""
        if span <= 0.0:
            return rho
        n_steps = max(1, int(np.ceil(span / cache.dt)))
        h = span / n_steps
        k1, k2, k3, k4 = self._k
        tmp = self._tmp
        offset = 0.0
        for _ in range(n_steps):
            t = t_start + offset
            self._rhs(t, rho, cache, k1)
            self._axpy(tmp, rho, 0.5 * h, k1)
            self._rhs(t + 0.5 * h, tmp, cache, k2)
            self._axpy(tmp, rho, 0.5 * h, k2)
            self._rhs(t + 0.5 * h, tmp, cache, k3)
            self._axpy(tmp, rho, h, k3)
            self._rhs(t + h, tmp, cache, k4)
            if _rk4_combine_kernel is not None:
                _rk4_combine_kernel(rho, k1, k2, k3, k4, h / 6.0)
            else:
                # rho += (h/6) (k1 + 2 k2 + 2 k3 + k4), clobbering k2
                k2 += k3
                k2 *= 2.0
                k2 += k1
                k2 += k4
                k2 *= h / 6.0
                rho += k2
            offset += h
        return rho

    def integrate_segment(self, rho, t_start, segment: PulseSegment, snap_offsets=None):
        """Evolve through one segment; returns (rho, snapshots at offsets).

        ``rho`` is advanced in place and must be owned by the caller; the
        returned snapshots are independent copies.
        """
        cache = self._segment_cache(segment, t_start)
        snaps = []
        cursor = 0.0
        for target in snap_offsets if snap_offsets is not None else []:
            if target < -1e-12 or target > segment.duration + 1e-12:
                raise ConfigError("snapshot offset outside segment")
            rho = self._advance(rho, t_start + cursor, target - cursor, cache)
            cursor = target
            snaps.append(rho.copy())
        rho = self._advance(rho, t_start + cursor, segment.duration - cursor, cache)
        return rho, snaps

    def check_state(self, rho, t) -> float:
        """Trace deviation; raises on positivity violation at time t."""
        trace_dev = float(np.max(np.abs(np.trace(rho, axis1=-2, axis2=-1) - 1.0)))
        if self.check_positivity:
            min_eig = float(np.min(np.linalg.eigvalsh(rho)))
            if min_eig < _POSITIVITY_TOL:
                raise IntegrationError(
                    f"density matrix positivity violated at t = {float(np.max(t)):.6g} "
                    f"us (min eigenvalue {min_eig:.3g})"
                )
        return trace_dev


def hamiltonian_at(
    t: float,
    segment: PulseSegment,
    params: PhysicalParams,
    geometry: ChainGeometry,
    trajectories: Optional[ThermalSample] = None,
) -> np.ndarray:
    """Effective Hamiltonian (MHz) at absolute time t within a segment."""
    engine = _Engine(geometry, params, trajectories, check_positivity=False)
    cache = engine._segment_cache(segment, np.zeros(1))
    nu = engine.couplings(np.atleast_1d(float(t)))
    h_int = (nu @ engine.ops.hop_flat).reshape(engine.d, engine.d)
    return cache.h_drive_flat.reshape(engine.d, engine.d) + h_int


def lindblad_dissipator(
    rho: np.ndarray, params: PhysicalParams, segment_kind: str
) -> np.ndarray:
    """Reference dissipator d(rho)/dt: decay of both Rydberg levels to g.

    The effective optical damping adds to the up-channel rate only when
    ``segment_kind`` is optical.  Trace-free for any Hermitian input.
    """
    if segment_kind not in SEGMENT_KINDS:
        raise ConfigError(f"segment kind must be one of {SEGMENT_KINDS}")
    rho = np.asarray(rho, dtype=complex)
    n = round(math.log(rho.shape[0], 3))
    if 3**n != rho.shape[0]:
        raise ValueError(f"rho dimension {rho.shape[0]} is not a power of 3")
    gamma_eff = params.gamma_eff_per_atom(n) if segment_kind == "optical" else np.zeros(n)
    out = np.zeros_like(rho)
    for i in range(n):
        for rate, upper in (
            (params.gamma_up + gamma_eff[i], Level.UP),
            (params.gamma_down, Level.DOWN),
        ):
            c = _site_operator(_transition(Level.G, upper), i, n)
            proj = c.T @ c
            out += 0.5 * rate * (2.0 * c @ rho @ c.T - proj @ rho - rho @ proj)
    return out


@dataclass(frozen=True)
class SequenceResult:
    """Level populations along one sequence run."""

    times: np.ndarray               # (T,) absolute times, us
    populations: np.ndarray         # (T, 3^N) diagonal of rho
    max_trace_deviation: float
    final_state: ProductDensityMatrix


@dataclass(frozen=True)
class ReadoutScanResult:
    """Per-branch final level populations of a readout scan."""

    tau_grid: np.ndarray            # (T,) free-evolution durations, us
    populations: np.ndarray         # (B, T, 3^N) after the readout suffix
    total_durations: np.ndarray     # (T,) full sequence duration per branch
    max_trace_deviation: float


def run_sequence(
    sequence: PulseSequence,
    geometry: ChainGeometry,
    params: PhysicalParams,
    trajectories: Optional[ThermalSample] = None,
    sample_times=None,
    initial=None,
    dt_scale: float = 1.0,
    check_positivity: bool = True,
) -> SequenceResult:
    """Integrate the master equation across all segments of a sequence.

    Returns the diagonal populations in the product basis at the requested
    absolute sample times (default: every segment boundary).  The density
    matrix is continuous across segment joins; trace deviation is tracked
    and positivity is checked at every sample.
    """
    n = geometry.n_atoms
    engine = _Engine(geometry, params, trajectories, dt_scale, check_positivity)
    total = sequence.total_duration
    if sample_times is None:
        sample_times = np.cumsum([0.0] + [s.duration for s in sequence.segments])
    times = np.atleast_1d(np.asarray(sample_times, dtype=float))
    if np.any(times < 0) or np.any(times > total + 1e-9) or np.any(np.diff(times) < 0):
        raise ConfigError("sample times must be sorted within the sequence duration")

    rho = _resolve_initial(initial, n)[None, :, :]
    t0 = np.zeros(1)
    populations = np.empty((len(times), engine.d))
    max_dev = 0.0
    cursor = 0.0
    k = 0
    while k < len(times) and times[k] <= cursor + 1e-12:
        populations[k] = np.real(np.diagonal(rho[0]))
        max_dev = max(max_dev, engine.check_state(rho, cursor))
        k += 1
    for seg in sequence.segments:
        seg_end = cursor + seg.duration
        offsets = []
        while k < len(times) and times[k] <= seg_end + 1e-12:
            offsets.append(min(times[k] - cursor, seg.duration))
            k += 1
        rho, snaps = engine.integrate_segment(rho, t0, seg, offsets)
        for j, snap in enumerate(snaps):
            populations[k - len(snaps) + j] = np.real(np.diagonal(snap[0]))
            max_dev = max(max_dev, engine.check_state(snap, cursor + offsets[j]))
        t0 = t0 + seg.duration
        cursor = seg_end
    max_dev = max(max_dev, engine.check_state(rho, cursor))
    return SequenceResult(
        times=times,
        populations=populations,
        max_trace_deviation=max_dev,
        final_state=ProductDensityMatrix(rho[0]),
    )


def readout_scan(
    geometry: ChainGeometry,
    params: PhysicalParams,
    prefix: Sequence[PulseSegment],
    tau_grid,
    suffix: Sequence[PulseSegment],
    trajectories: Union[None, ThermalSample, Sequence[ThermalSample]] = None,
    initial=None,
    dt_scale: float = 1.0,
    check_positivity: bool = True,
) -> ReadoutScanResult:
    """Scan the free-evolution duration with a branched readout.

    The preparation segments run once; the state then free-evolves, and at
    every tau on the grid a copy branches into the readout suffix whose final
    level populations are recorded.  With a batch of thermal trajectories all
    realizations advance together, so a full Monte-Carlo scan is a single
    pass.  Equivalent to running the full sequence separately for every tau.
    """
    n = geometry.n_atoms
    engine = _Engine(geometry, params, trajectories, dt_scale, check_positivity)
    taus = np.atleast_1d(np.asarray(tau_grid, dtype=float))
    if np.any(taus < 0) or np.any(np.diff(taus) <= 0):
        raise ConfigError("tau grid must be non-negative and strictly increasing")
    prefix = list(prefix)
    suffix = list(suffix)

    rho = np.broadcast_to(
        _resolve_initial(initial, n), (engine.batch, engine.d, engine.d)
    ).copy()
    t_now = np.zeros(engine.batch)
    for seg in prefix:
        rho, _ = engine.integrate_segment(rho, t_now, seg)
        t_now = t_now + seg.duration
    prefix_duration = float(sum(s.duration for s in prefix))
    suffix_duration = float(sum(s.duration for s in suffix))

    populations = np.empty((engine.batch, len(taus), engine.d))
    max_dev = 0.0
    cursor = 0.0
    for k, tau in enumerate(taus):
        if tau > cursor:
            segment = PulseSegment.free(tau - cursor)
            rho, _ = engine.integrate_segment(rho, t_now, segment)
            t_now = t_now + (tau - cursor)
            cursor = tau
        max_dev = max(max_dev, engine.check_state(rho, t_now))
        branch = rho.copy()
        t_branch = t_now.copy()
        for seg in suffix:
            branch, _ = engine.integrate_segment(branch, t_branch, seg)
            t_branch = t_branch + seg.duration
        max_dev = max(max_dev, engine.check_state(branch, t_branch))
        populations[:, k, :] = np.real(np.diagonal(branch, axis1=-2, axis2=-1))
    return ReadoutScanResult(
        tau_grid=taus,
        populations=populations,
        total_durations=prefix_duration + taus + suffix_duration,
        max_trace_deviation=max_dev,
    )


def project_to_readout(populations, recaptured_levels=(Level.G,)) -> np.ndarray:
    """Map level populations to true recapture patterns (pre detection error).

    Atoms whose level is in ``recaptured_levels`` read out as 1; the output
    axis enumerates {0, 1}^N patterns with atom 0 as the most significant
    bit.  Marginal over everything else, so rows keep their normalization.
    """
    pops = np.asarray(populations, dtype=float)
    d = pops.shape[-1]
    n = round(math.log(d, 3))
    if 3**n != d:
        raise ValueError(f"populations last axis {d} is not a power of 3")
    ops = _OperatorTable.get(n)
    recaptured = {Level(lv) for lv in recaptured_levels}
    bits = np.isin(ops.levels, [int(lv) for lv in recaptured]).astype(int)  # (d, n)
    pattern_index = bits @ (2 ** np.arange(n - 1, -1, -1))
    projector = np.zeros((d, 2**n))
    projector[np.arange(d), pattern_index] = 1.0
    return pops @ projector
