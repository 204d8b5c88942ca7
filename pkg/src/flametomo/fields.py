"""Thermochemical fields on voxel lattices: phantom, file I/O and error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .geometry import GridGeometry

# Physical bounds enforced by the representations' squashing. The floor sits
# well below ambient so initial noise rarely clamps cold voxels.
T_FLOOR = 100.0
T_CEIL = 2300.0


class FieldFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ThermochemState:
    T: float
    X: Mapping[str, float]

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ValueError(f"temperature must be positive and finite, got {self.T}")
        for sp, x in self.X.items():
            if not (0.0 <= x <= 1.0):
                raise ValueError(f"mole fraction of {sp} outside [0, 1]: {x}")

    @property
    def species(self):
        return tuple(self.X)


@dataclass(frozen=True)
class GridField:
    """Per-cell temperature ``T`` (n_cells,) and mole fractions ``X`` (n_cells, S), x-fastest."""

    geom: GridGeometry
    species_list: tuple[str, ...]
    T: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        T = np.array(self.T, dtype=np.float64).reshape(-1)
        X = np.array(self.X, dtype=np.float64).reshape(T.size, len(self.species_list))
        if T.size != self.geom.n_cells:
            raise ValueError(f"field has {T.size} cells, geometry has {self.geom.n_cells}")
        if not np.all(np.isfinite(T)) or np.any(T <= 0):
            raise ValueError("temperatures must be positive and finite")
        if not np.all(np.isfinite(X)) or np.any(X < 0) or np.any(X > 1):
            raise ValueError("mole fractions must lie in [0, 1]")
        T.flags.writeable = False
        X.flags.writeable = False
        object.__setattr__(self, "species_list", tuple(self.species_list))
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "X", X)

    def state(self, flat: int) -> ThermochemState:
        return ThermochemState(float(self.T[flat]), dict(zip(self.species_list, map(float, self.X[flat]))))

    def quantity(self, name: str) -> np.ndarray:
        if name == "T":
            return self.T
        return self.X[:, self.species_list.index(name)]

    def quantity_names(self):
        return ("T",) + self.species_list


@dataclass(frozen=True)
class PhantomConfig:
    """Axisymmetric buoyant pool-fire analogue."""

    T_ambient: float = 300.0
    T_peak: float = 1800.0
    plume_radius: float = 0.08
    spread_rate: float = 0.15
    peak_fractions: Mapping[str, float] = field(
        default_factory=lambda: {"CO2": 0.10, "H2O": 0.15, "CH4": 0.30}
    )
    pool_radius: float = 0.10
    flame_height: float = 0.35

    def __post_init__(self):
        if not (self.T_peak >= self.T_ambient > 0):
            raise ValueError("need T_peak >= T_ambient > 0")
        if self.plume_radius <= 0 or self.pool_radius <= 0 or self.flame_height <= 0:
            raise ValueError("radii and flame height must be positive")
        if self.spread_rate < 0:
            raise ValueError("spread_rate must be non-negative")
        for sp, x in self.peak_fractions.items():
            if not 0.0 <= x <= 1.0:
                raise ValueError(f"peak mole fraction of {sp} outside [0, 1]")


def height_profile(z, flame_height):
    """Rise-and-decay profile, 0 at the pool surface and 1 at ``flame_height``."""
    s = np.asarray(z) / flame_height
    return s * np.exp(1.0 - s)


def phantom_at(points, config: PhantomConfig, geom: GridGeometry, species):
    """Evaluate the phantom at arbitrary points; returns (T, X)."""
    pts = np.atleast_2d(points)
    axis = geom.center
    r2 = (pts[:, 0] - axis[0]) ** 2 + (pts[:, 1] - axis[1]) ** 2
    z = np.clip(pts[:, 2] - geom.box_min[2], 0.0, None)
    sigma = config.plume_radius + config.spread_rate * z
    core = np.exp(-r2 / (2.0 * sigma**2)) * height_profile(z, config.flame_height)
    T = config.T_ambient + (config.T_peak - config.T_ambient) * core
    X = np.zeros((len(pts), len(species)))
    for s, sp in enumerate(species):
        peak = config.peak_fractions.get(sp, 0.0)
        if sp == "CH4":
            X[:, s] = peak * np.exp(-r2 / (2.0 * config.pool_radius**2)) * np.exp(-z / (0.5 * config.flame_height))
        else:
            X[:, s] = peak * core
    return T, X


def make_phantom(config: PhantomConfig, geom: GridGeometry, species=("CO2", "H2O", "CH4")) -> GridField:
    T, X = phantom_at(geom.cell_centers(), config, geom, species)
    return GridField(geom, tuple(species), T, X)


def write_grid(field_: GridField, path) -> None:
    g = field_.geom
    with open(path, "w") as fh:
        fh.write("FLAMEGRID v1\n")
        fh.write("dims {} {} {}\n".format(*g.dims))
        fh.write("box " + " ".join(repr(float(v)) for v in (*g.box_min, *g.box_max)) + "\n")
        fh.write("species " + " ".join(field_.species_list) + "\n")
        data = np.column_stack([field_.T, field_.X])
        for row in data:
            fh.write(" ".join(f"{v:.9e}" for v in row) + "\n")


def read_grid(path) -> GridField:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 4 or lines[0].strip() != "FLAMEGRID v1":
        raise FieldFormatError(f"{path}: missing FLAMEGRID v1 header")
    try:
        tag, *dims = lines[1].split()
        assert tag == "dims" and len(dims) == 3
        dims = tuple(int(n) for n in dims)
        tag, *box = lines[2].split()
        assert tag == "box" and len(box) == 6
        box = [float(v) for v in box]
        tag, *species = lines[3].split()
        assert tag == "species"
    except (AssertionError, ValueError):
        raise FieldFormatError(f"{path}: malformed header") from None
    geom = GridGeometry(box[:3], box[3:], dims)
    rows = [ln for ln in lines[4:] if ln.strip()]
    n_cols = 1 + len(species)
    data = np.empty((geom.n_cells, n_cols))
    for cell in range(geom.n_cells):
        if cell >= len(rows):
            raise FieldFormatError(f"{path}: truncated at cell {cell} of {geom.n_cells}")
        parts = rows[cell].split()
        if len(parts) != n_cols:
            raise FieldFormatError(f"{path}: cell {cell} has {len(parts)} values, expected {n_cols}")
        try:
            data[cell] = [float(p) for p in parts]
        except ValueError:
            raise FieldFormatError(f"{path}: non-numeric value at cell {cell}") from None
    if len(rows) > geom.n_cells:
        raise FieldFormatError(f"{path}: {len(rows)} cell rows, header declares {geom.n_cells}")
    try:
        return GridField(geom, tuple(species), data[:, 0], data[:, 1:])
    except ValueError as exc:
        raise FieldFormatError(f"{path}: {exc}") from None


@dataclass
class MseReport:
    """Normalized MSE per quantity; ``degenerate`` names fields whose truth is constant."""

    values: dict
    degenerate: set

    def __getitem__(self, key):
        return self.values[key]

    def __iter__(self):
        return iter(self.values)

    def items(self):
        return self.values.items()


def normalized_mse(recon: GridField, truth: GridField) -> MseReport:
    """Mean squared error after scaling both fields by the truth's min/max.

    A constant truth field cannot be normalized; its MSE is reported in
    absolute units and the field is listed in ``degenerate``.
    """
    if recon.geom.dims != truth.geom.dims or not (
        np.allclose(recon.geom.box_min, truth.geom.box_min) and np.allclose(recon.geom.box_max, truth.geom.box_max)
    ):
        raise ValueError("reconstruction and truth grids differ")
    if recon.species_list != truth.species_list:
        raise ValueError("reconstruction and truth species differ")
    values, degenerate = {}, set()
    for name in truth.quantity_names():
        t = truth.quantity(name)
        r = recon.quantity(name)
        lo, hi = float(t.min()), float(t.max())
        if hi > lo:
            values[name] = float(np.mean(((r - lo) / (hi - lo) - (t - lo) / (hi - lo)) ** 2))
        else:
            values[name] = float(np.mean((r - t) ** 2))
            degenerate.add(name)
    return MseReport(values, degenerate)
