"""Spectral physics: blackbody emission, line-by-line absorption and Planck means.

Wavenumbers are in cm^-1, temperatures in K, absorption coefficients in m^-1
and spectral radiance in W m^-2 sr^-1 (cm^-1)^-1.

Line strengths follow the HITRAN pressure convention (cm^-2 atm^-1 at
``T_ref``), so the absorption coefficient of species ``s`` is::

    kappa = 100 * X_s * P * (T_ref / T) * sum_l S_l(T) * phi_l(eta; gamma_l(T))

where ``T_ref / T`` is the ideal-gas number density relative to the
reference state and the factor 100 converts cm^-1 to m^-1.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import constants as _const

# second radiation constant h c / k_B [cm K]
C2 = _const.h * _const.c / _const.k * 100.0
# 2 h c^2 expressed for eta in cm^-1 and radiance per cm^-1 [W m^-2 sr^-1 cm^4]
C1 = 2.0 * _const.h * _const.c**2 * 1.0e8

KNOWN_SPECIES = ("CO2", "H2O", "CH4", "CO", "N2O")

BUNDLED_LINEDB = os.path.join(os.path.dirname(__file__), "data", "minilines.linedb")


class SpectralDomainError(ValueError):
    """Raised when a spectral routine is called outside its domain."""


class LineDatabaseError(ValueError):
    """Raised for malformed line-database files."""


@dataclass(frozen=True)
class WavenumberGrid:
    eta_min: float
    eta_max: float
    step: float

    def __post_init__(self):
        if not (self.eta_min < self.eta_max):
            raise SpectralDomainError(f"empty grid: eta_min={self.eta_min} >= eta_max={self.eta_max}")
        if self.step <= 0:
            raise SpectralDomainError(f"grid step must be positive, got {self.step}")
        if self.eta_min <= 0:
            raise SpectralDomainError("wavenumbers must be strictly positive")

    @property
    def count(self) -> int:
        return int(round((self.eta_max - self.eta_min) / self.step)) + 1

    @functools.cached_property
    def points(self) -> np.ndarray:
        pts = self.eta_min + self.step * np.arange(self.count, dtype=np.float64)
        pts.flags.writeable = False
        return pts

    def __len__(self):
        return self.count


@dataclass(frozen=True)
class SpectralLine:
    species: str
    center: float
    strength_ref: float
    lower_energy: float
    halfwidth_ref: float
    temp_exponent: float

    def __post_init__(self):
        if self.strength_ref < 0:
            raise LineDatabaseError(f"negative line strength {self.strength_ref}")
        if self.halfwidth_ref <= 0:
            raise LineDatabaseError(f"non-positive halfwidth {self.halfwidth_ref}")
        if self.center <= 0:
            raise LineDatabaseError(f"non-positive line center {self.center}")


@dataclass(frozen=True)
class LineDatabase:
    lines: tuple[SpectralLine, ...]
    species_list: tuple[str, ...]
    T_ref: float = 296.0
    pressure: float = 1.0
    _arrays: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T_ref <= 0 or self.pressure <= 0:
            raise LineDatabaseError("T_ref and pressure must be positive")
        for ln in self.lines:
            if ln.species not in self.species_list:
                raise LineDatabaseError(f"line species {ln.species!r} missing from species_list")

    def species_arrays(self, species: str) -> np.ndarray:
        """Columns (center, S_ref, E_lower, gamma_ref, n) for one species, shape (5, L)."""
        if species not in self._arrays:
            rows = [
                (ln.center, ln.strength_ref, ln.lower_energy, ln.halfwidth_ref, ln.temp_exponent)
                for ln in self.lines
                if ln.species == species
            ]
            self._arrays[species] = np.array(rows, dtype=np.float64).reshape(-1, 5).T.copy()
        return self._arrays[species]


@dataclass(frozen=True)
class Spectrum:
    grid: WavenumberGrid
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.grid.count:
            raise SpectralDomainError(
                f"spectrum has {len(self.values)} values but grid has {self.grid.count} points"
            )


def planck_intensity(T, eta):
    """Blackbody spectral radiance I_b(T, eta) per unit wavenumber.

    Broadcasts over array inputs. Raises SpectralDomainError for non-positive
    temperature or wavenumber.
    """
    T = np.asarray(T, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(T <= 0) or np.any(eta <= 0):
        raise SpectralDomainError("planck_intensity requires T > 0 and eta > 0")
    out = C1 * eta**3 / np.expm1(C2 * eta / T)
    return out if out.ndim else float(out)


def planck_intensity_dT(T, eta):
    """Derivative of :func:`planck_intensity` with respect to temperature."""
    T = np.asarray(T, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    x = C2 * eta / T
    em1 = np.expm1(x)
    return C1 * eta**3 * (em1 + 1.0) / em1**2 * x / T


def _line_sum(arr: np.ndarray, T: np.ndarray, eta: np.ndarray, db: LineDatabase, with_dT: bool):
    """Sum over lines of S(T) phi(eta) for temperatures T (M,) -> (M, N) [cm^-1 atm^-1 ... per atm]."""
    centers, s_ref, e_low, g_ref, n_exp = arr
    Tc = T[:, None]
    total = np.zeros((T.size, eta.size))
    dtotal = np.zeros((T.size, eta.size)) if with_dT else None
    inv_dt = 1.0 / Tc - 1.0 / db.T_ref
    ratio = db.T_ref / Tc
    for k in range(centers.size):
        strength = s_ref[k] * ratio ** n_exp[k] * np.exp(-C2 * e_low[k] * inv_dt)  # (M,1)
        gamma = g_ref[k] * np.sqrt(ratio) * db.pressure  # (M,1)
        d2 = (eta[None, :] - centers[k]) ** 2
        den = d2 + gamma**2
        phi = gamma / (math.pi * den)
        total += strength * phi
        if with_dT:
            dlns = -n_exp[k] / Tc + C2 * e_low[k] / Tc**2
            dphi_dgamma = (d2 - gamma**2) / (math.pi * den**2)
            dgamma = -0.5 * gamma / Tc
            dtotal += strength * (phi * dlns + dphi_dgamma * dgamma)
    return total, dtotal


def species_cross_sections(db: LineDatabase, grid: WavenumberGrid, T, species: Sequence[str], with_dT: bool = False):
    """Absorption coefficient per unit mole fraction, shape (S, M, N) [m^-1].

    Species absent from ``db`` get identically zero rows. With ``with_dT`` the
    temperature derivative is returned as a second array of the same shape.
    """
    T = np.atleast_1d(np.asarray(T, dtype=np.float64))
    if np.any(T <= 0):
        raise SpectralDomainError("temperature must be positive")
    eta = grid.points
    sig = np.zeros((len(species), T.size, eta.size))
    dsig = np.zeros_like(sig) if with_dT else None
    density = 100.0 * db.pressure * db.T_ref / T[:, None]  # (M,1)
    for i, sp in enumerate(species):
        if sp not in db.species_list:
            continue
        arr = db.species_arrays(sp)
        if arr.shape[1] == 0:
            continue
        total, dtotal = _line_sum(arr, T, eta, db, with_dT)
        sig[i] = density * total
        if with_dT:
            dsig[i] = density * (dtotal - total / T[:, None])
    return (sig, dsig) if with_dT else sig


def _state_vector(state, species: Sequence[str]):
    X = state.X
    if isinstance(X, Mapping):
        return float(state.T), np.array([float(X.get(s, 0.0)) for s in species])
    return float(state.T), np.asarray(X, dtype=np.float64)


def _state_species(state, db: LineDatabase):
    X = state.X
    if isinstance(X, Mapping):
        return tuple(X.keys())
    names = getattr(state, "species", None)
    return tuple(names) if names is not None else db.species_list


def absorption_spectrum(state, grid: WavenumberGrid, db: LineDatabase) -> np.ndarray:
    """Spectral absorption coefficient kappa_eta [m^-1] of a thermochemical state.

    ``state`` needs ``T`` and ``X``; ``X`` is either a mapping species -> mole
    fraction or a sequence aligned with ``state.species`` (falling back to
    ``db.species_list``). Species unknown to ``db`` contribute nothing.
    """
    if grid.count < 1:
        raise SpectralDomainError("empty wavenumber grid")
    species = _state_species(state, db)
    T, X = _state_vector(state, species)
    if T <= 0:
        raise SpectralDomainError(f"temperature must be positive, got {T}")
    if np.any(X < 0) or np.any(X > 1):
        raise SpectralDomainError("mole fractions must lie in [0, 1]")
    sig = species_cross_sections(db, grid, [T], species)[:, 0, :]
    return X @ sig


def planck_mean(kappa_eta: np.ndarray, T: float, grid: WavenumberGrid) -> float:
    """Planck-weighted band mean of a spectral coefficient (trapezoid rule)."""
    ib = planck_intensity(T, grid.points)
    return float(np.trapezoid(kappa_eta * ib, grid.points) / np.trapezoid(ib, grid.points))


def planck_mean_kappa(state, grid: WavenumberGrid, db: LineDatabase) -> float:
    """Planck-mean absorption coefficient over the band covered by ``grid``."""
    kappa = absorption_spectrum(state, grid, db)
    return planck_mean(kappa, float(state.T), grid)


def parse_line_database(text: Iterable[str], source: str = "<string>") -> LineDatabase:
    header = None
    lines: list[SpectralLine] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text, start=1):
        row = raw.strip()
        if not row or row.startswith("#"):
            continue
        if header is None:
            parts = row.split()
            if len(parts) < 2 or parts[0] != "LINEDB" or parts[1] != "v1":
                raise LineDatabaseError(f"{source}:{lineno}: expected 'LINEDB v1' header")
            opts = {}
            for tok in parts[2:]:
                key, sep, val = tok.partition("=")
                if not sep:
                    raise LineDatabaseError(f"{source}:{lineno}: bad header token {tok!r}")
                try:
                    opts[key] = float(val)
                except ValueError:
                    raise LineDatabaseError(f"{source}:{lineno}: bad header value {tok!r}") from None
            if "T_ref" not in opts or "P" not in opts:
                raise LineDatabaseError(f"{source}:{lineno}: header needs T_ref= and P=")
            header = opts
            continue
        parts = row.split()
        if len(parts) != 6:
            raise LineDatabaseError(f"{source}:{lineno}: expected 6 fields, got {len(parts)}")
        species = parts[0]
        if species not in KNOWN_SPECIES:
            raise LineDatabaseError(f"{source}:{lineno}: unknown species {species!r}")
        try:
            values = [float(p) for p in parts[1:]]
        except ValueError:
            raise LineDatabaseError(f"{source}:{lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in values):
            raise LineDatabaseError(f"{source}:{lineno}: non-finite field")
        try:
            lines.append(SpectralLine(species, *values))
        except LineDatabaseError as exc:
            raise LineDatabaseError(f"{source}:{lineno}: {exc}") from None
        seen.add(species)
    if header is None:
        raise LineDatabaseError(f"{source}: missing 'LINEDB v1' header")
    species_list = tuple(s for s in KNOWN_SPECIES if s in seen)
    return LineDatabase(tuple(lines), species_list, T_ref=header["T_ref"], pressure=header["P"])


def load_line_database(path=BUNDLED_LINEDB) -> LineDatabase:
    with open(path) as fh:
        return parse_line_database(fh, source=str(path))


class CrossSectionTable:
    """Per-species cross sections tabulated on a temperature lattice.

    Values and exact temperature derivatives are stored at every node and
    evaluated with cubic Hermite interpolation, so the interpolant is C1 in
    temperature. Used by the renderer when re-evaluating the full line sum for
    every cell each iteration would dominate the run time.
    """

    def __init__(self, db: LineDatabase, grid: WavenumberGrid, species: Sequence[str],
                 T_min: float, T_max: float, T_step: float = 5.0):
        if not (0 < T_min < T_max):
            raise SpectralDomainError("table needs 0 < T_min < T_max")
        n = int(math.ceil((T_max - T_min) / T_step)) + 1
        self.T_nodes = np.linspace(T_min, T_min + (n - 1) * T_step, n)
        self.T_min = float(self.T_nodes[0])
        self.T_step = float(T_step)
        self.species = tuple(species)
        self.grid = grid
        sig, dsig = species_cross_sections(db, grid, self.T_nodes, self.species, with_dT=True)
        # (S, nT, N), contiguous for the mixing kernel
        self.values = np.ascontiguousarray(sig)
        self.derivs = np.ascontiguousarray(dsig)
        ib = planck_intensity(self.T_nodes[:, None], grid.points[None, :])
        self.planck_means = np.trapezoid(sig * ib[None], grid.points, axis=2) / np.trapezoid(ib, grid.points, axis=1)[None]

    def evaluate(self, T):
        """Return (sigma, dsigma/dT), each of shape (S, M, N)."""
        T = np.atleast_1d(np.asarray(T, dtype=np.float64))
        k, u = self._locate(T)
        h = self.T_step
        u = u[None, :, None]
        f0, f1 = self.values[:, k], self.values[:, k + 1]
        m0, m1 = self.derivs[:, k] * h, self.derivs[:, k + 1] * h
        u2, u3 = u * u, u * u * u
        val = (2 * u3 - 3 * u2 + 1) * f0 + (u3 - 2 * u2 + u) * m0 + (-2 * u3 + 3 * u2) * f1 + (u3 - u2) * m1
        der = ((6 * u2 - 6 * u) * f0 + (3 * u2 - 4 * u + 1) * m0 + (-6 * u2 + 6 * u) * f1 + (3 * u2 - 2 * u) * m1) / h
        return val, der

    def planck_mean_kappa(self, T, X):
        """Planck-mean kappa for arrays T (M,) and X (M, S); linear interpolation in T."""
        T = np.atleast_1d(np.asarray(T, dtype=np.float64))
        k, u = self._locate(T)
        pm = self.planck_means[:, k] * (1 - u) + self.planck_means[:, k + 1] * u  # (S, M)
        return np.einsum("ms,sm->m", np.asarray(X, dtype=np.float64).reshape(T.size, -1), pm)

    def _locate(self, T):
        pos = (np.clip(T, self.T_nodes[0], self.T_nodes[-1]) - self.T_min) / self.T_step
        k = np.minimum(np.floor(pos).astype(np.intp), self.T_nodes.size - 2)
        return k, pos - k
