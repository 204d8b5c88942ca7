"""Voxel-grid representation with sigmoid-squashed per-cell parameters.

Each cell carries one raw temperature parameter and one raw parameter per
species. Decoding maps them into physical bounds::

    T = T_floor + (T_ceil - T_floor) * sigmoid(theta_T)
    X = sigmoid(theta_X)

so gradient descent on the raw vector never leaves the feasible set. The
regularizers act on the bound-normalized fields ``sigmoid(theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fields import T_CEIL, T_FLOOR, GridField, ThermochemState
from .geometry import GridGeometry

_X_EPS = 1e-9
_T_MARGIN = 1e-7

PENALTY_KINDS = ("tikhonov", "tv")


def _logit(p):
    return np.log(p) - np.log1p(-p)


_sigmoid = ad.sigmoid_value


def voxel_layout(n_cells: int, species):
    layout = {"T": slice(0, n_cells)}
    for s, sp in enumerate(species):
        layout[f"X:{sp}"] = slice((1 + s) * n_cells, (2 + s) * n_cells)
    return layout


@dataclass
class VoxelRepresentation:
    geom: GridGeometry
    species_list: tuple
    theta: ad.ParamVector
    bounds: tuple = (T_FLOOR, T_CEIL)

    def __post_init__(self):
        self.species_list = tuple(self.species_list)
        expected = self.geom.n_cells * (1 + len(self.species_list))
        if len(self.theta) != expected:
            raise ValueError(f"theta has {len(self.theta)} entries, expected {expected}")
        if not self.bounds[1] > self.bounds[0] > 0:
            raise ValueError("temperature bounds must satisfy 0 < T_floor < T_ceil")

    @classmethod
    def from_states(cls, geom, species, T, X, bounds=(T_FLOOR, T_CEIL)):
        theta = encode(np.asarray(T), np.asarray(X), bounds)
        n = geom.n_cells
        return cls(geom, tuple(species), ad.ParamVector(theta, voxel_layout(n, species)), tuple(bounds))

    def with_theta(self, values) -> "VoxelRepresentation":
        return VoxelRepresentation(self.geom, self.species_list, self.theta.copy(values), self.bounds)

    # -- decoding -------------------------------------------------------------

    def normalized_fields(self, theta: ad.Var) -> ad.Var:
        """Bound-normalized fields, shape (1 + S, n_cells): T first, then species."""
        n = self.geom.n_cells
        return ad.sigmoid(ad.reshape(theta, (1 + len(self.species_list), n)))

    def cell_states(self, theta: ad.Var):
        """(T (n_cells,), X (n_cells, S)) as differentiable values."""
        norm = self.normalized_fields(theta)
        lo, hi = self.bounds
        T = lo + (hi - lo) * norm[0]
        X = ad.transpose(norm[1:])
        return T, X

    def decoded(self):
        n = self.geom.n_cells
        raw = self.theta.values.reshape(1 + len(self.species_list), n)
        lo, hi = self.bounds
        return lo + (hi - lo) * _sigmoid(raw[0]), _sigmoid(raw[1:]).T

    def export(self) -> GridField:
        T, X = self.decoded()
        return GridField(self.geom, self.species_list, T, X)

    def penalty(self, theta: ad.Var, kind: str, rng=None) -> ad.Var:
        norm = self.normalized_fields(theta)
        nx, ny, nz = self.geom.dims
        return fd_penalty_fields(ad.reshape(norm, (norm.shape[0], nz, ny, nx)), self.geom.spacing, kind)

    def data_spectra(self, theta: ad.Var, scene, rays, rng=None, anchor=None):
        from .render import render_cells

        T, X = self.cell_states(theta)
        return [render_cells(T, X, scene, rays)]

    @property
    def param_bytes(self) -> int:
        return self.theta.values.nbytes


def encode(T, X, bounds=(T_FLOOR, T_CEIL)) -> np.ndarray:
    """Raw parameters for states strictly inside the bounds (values are clamped first)."""
    lo, hi = bounds
    T = np.asarray(T, dtype=np.float64).reshape(-1)
    X = np.asarray(X, dtype=np.float64).reshape(T.size, -1)
    tn = np.clip((T - lo) / (hi - lo), _T_MARGIN, 1.0 - _T_MARGIN)
    xn = np.clip(X, _X_EPS, 1.0 - _X_EPS)
    return np.concatenate([_logit(tn), _logit(xn.T).reshape(-1)])


def decode_cell(rep: VoxelRepresentation, cell_index) -> ThermochemState:
    """State of one cell; ``cell_index`` is a flat index or an (i, j, k) triple."""
    if np.ndim(cell_index):
        flat = int(rep.geom.flat_index(*cell_index))
    else:
        flat = int(cell_index)
    if not 0 <= flat < rep.geom.n_cells:
        raise IndexError(f"cell {cell_index} out of range")
    n = rep.geom.n_cells
    raw = rep.theta.values
    lo, hi = rep.bounds
    T = lo + (hi - lo) * float(_sigmoid(raw[flat]))
    X = {sp: float(_sigmoid(raw[(1 + s) * n + flat])) for s, sp in enumerate(rep.species_list)}
    return ThermochemState(T, X)


def sample(rep: VoxelRepresentation, point) -> ThermochemState:
    """Piecewise-constant lookup; points outside the box get the ambient floor state."""
    ijk, inside = rep.geom.locate(point)
    if not inside[0]:
        return ThermochemState(rep.bounds[0], {sp: 0.0 for sp in rep.species_list})
    return decode_cell(rep, tuple(int(v) for v in ijk[0]))


def init_from_truth(truth: GridField, noise_frac: float = 0.2, seed: int = 0,
                    bounds=(T_FLOOR, T_CEIL)) -> VoxelRepresentation:
    """Multiplicative Gaussian perturbation of a truth field, v * (1 + noise_frac * z)."""
    rng = np.random.default_rng(seed)
    T = truth.T * (1.0 + noise_frac * rng.standard_normal(truth.T.shape))
    X = truth.X * (1.0 + noise_frac * rng.standard_normal(truth.X.shape))
    lo, hi = bounds
    T = np.clip(T, lo, hi)
    X = np.clip(X, 0.0, 1.0)
    return VoxelRepresentation.from_states(truth.geom, truth.species_list, T, X, bounds)


def fd_penalty_fields(fields: ad.Var, spacing, kind: str) -> ad.Var:
    """Forward-difference gradient penalty on fields shaped (F, Nz, Ny, Nx).

    TV sums, over fields and directions, the mean absolute directional
    derivative; Tikhonov sums the mean squared derivative. Directions with
    fewer than two cells contribute nothing.
    """
    if kind not in PENALTY_KINDS:
        raise ValueError(f"unknown penalty kind {kind!r}")
    F = fields.shape[0]
    total = ad.Var(0.0)
    # array axes (1, 2, 3) are (z, y, x); spacing is (dx, dy, dz)
    for axis, step in ((3, spacing[0]), (2, spacing[1]), (1, spacing[2])):
        n = fields.shape[axis]
        if n < 2:
            continue
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        d = (fields[tuple(hi)] - fields[tuple(lo)]) * (1.0 / float(step))
        d = ad.reshape(d, (F, -1))
        per_field = ad.absolute(d) if kind == "tv" else ad.square(d)
        total = total + ad.vsum(ad.mean(per_field, axis=1))
    return total


def fd_penalty(rep: VoxelRepresentation, kind: str) -> float:
    return float(rep.penalty(ad.Var(rep.theta.values), kind).value)
