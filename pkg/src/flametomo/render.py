"""Forward operator: radiative transfer along rays, instrument lineshape, images.

Rays march from the far end of the path toward the camera with zero incoming
intensity (cold, black surroundings). Every step that depends on the field
is registered as an autodiff primitive so the whole measurement can be
differentiated with respect to the representation parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from . import autodiff as ad
from . import kernels
from .fields import T_CEIL, T_FLOOR
from .geometry import Camera, GridGeometry, SegmentTable, camera_rays, trace_rays
from .spectra import (
    C1,
    C2,
    CrossSectionTable,
    LineDatabase,
    Spectrum,
    SpectralDomainError,
    WavenumberGrid,
    absorption_spectrum,
    planck_intensity,
    species_cross_sections,
)


class RenderConfigError(ValueError):
    pass


# -- absorption models -------------------------------------------------------


class LineByLineKappa:
    """Exact line-by-line kappa(T, X); every call sums all lines."""

    def __init__(self, db: LineDatabase, grid: WavenumberGrid, species: Sequence[str]):
        self.db, self.grid, self.species = db, grid, tuple(species)

    def kappa(self, T, X):
        sig = species_cross_sections(self.db, self.grid, T, self.species)
        return np.einsum("ms,smn->mn", np.atleast_2d(X), sig)

    def kappa_vjp(self, T, X, g):
        sig, dsig = species_cross_sections(self.db, self.grid, T, self.species, with_dT=True)
        gX = np.einsum("mn,smn->ms", g, sig)
        gT = np.einsum("mn,ms,smn->m", g, np.atleast_2d(X), dsig)
        return gT, gX

    def planck_mean(self, T, X):
        T = np.atleast_1d(T)
        k = self.kappa(T, X)
        ib = planck_intensity(T[:, None], self.grid.points[None, :])
        return np.trapezoid(k * ib, self.grid.points, axis=1) / np.trapezoid(ib, self.grid.points, axis=1)


class TabulatedKappa:
    """kappa(T, X) from a Hermite-interpolated cross-section table (compiled mixing kernel)."""

    def __init__(self, db: LineDatabase, grid: WavenumberGrid, species: Sequence[str],
                 T_min: float, T_max: float, T_step: float = 5.0):
        self.grid, self.species = grid, tuple(species)
        self.table = CrossSectionTable(db, grid, self.species, T_min, T_max, T_step)

    def kappa(self, T, X):
        t = self.table
        return kernels.mix_forward(np.atleast_1d(T), np.atleast_2d(X), t.values, t.derivs, t.T_min, t.T_step)

    def kappa_vjp(self, T, X, g):
        t = self.table
        return kernels.mix_backward(g, np.atleast_1d(T), np.atleast_2d(X), t.values, t.derivs, t.T_min, t.T_step)

    def planck_mean(self, T, X):
        return self.table.planck_mean_kappa(T, X)


# -- differentiable primitives --------------------------------------------------


def absorption(T: ad.Var, X: ad.Var, model) -> ad.Var:
    """kappa_eta for M states: T (M,), X (M, S) -> (M, N)."""
    T, X = ad.lift(T), ad.lift(X)
    Tv, Xv = T.value, X.value
    out = model.kappa(Tv, Xv)

    def vjp(g):
        gT, gX = model.kappa_vjp(Tv, Xv, g)
        return gT, gX

    return ad.primitive("absorption", out, (T, X), vjp)


def planck_field(T: ad.Var, grid: WavenumberGrid) -> ad.Var:
    """Blackbody radiance I_b(T_m, eta_n), shape (M, N)."""
    T = ad.lift(T)
    Tv = T.value
    if np.any(Tv <= 0):
        raise ad.PrimitiveDomainError("planck", "non-positive temperature")
    eta = grid.points[None, :]
    x = C2 * eta / Tv[:, None]
    em1 = np.expm1(x)
    out = C1 * eta**3 / em1

    def vjp(g):
        # dI/dT = I * x * e^x / ((e^x - 1) * T), accumulated in place
        t = np.reciprocal(em1)
        t += 1.0
        t *= x
        t *= out
        t *= g
        return (t.sum(axis=1) / Tv,)

    return ad.primitive("planck", out, (T,), vjp)


def rte_march(kappa: ad.Var, ib: ad.Var, ptr, cells, lengths) -> ad.Var:
    """Fused per-segment RTE update over ray paths given in CSR form.

    ``kappa`` and ``ib`` are (n_elements, N); segment ``k`` of ray ``r``
    (``ptr[r] <= k < ptr[r+1]``, ordered from the camera outward) uses row
    ``cells[k]`` over path length ``lengths[k]``.
    """
    kappa, ib = ad.lift(kappa), ad.lift(ib)
    ptr = np.ascontiguousarray(ptr, dtype=np.int64)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    lengths = np.ascontiguousarray(lengths, dtype=np.float64)
    kv, bv = kappa.value, ib.value
    out = kernels.rte_forward(kv, bv, ptr, cells, lengths)

    def vjp(g):
        return kernels.rte_backward(np.ascontiguousarray(g), kv, bv, ptr, cells, lengths)

    return ad.primitive("rte", out, (kappa, ib), vjp)


# -- instrument lineshape --------------------------------------------------------

# sinc^2(x) = 1/2 at x = _SINC2_HALF
_SINC2_HALF = brentq(lambda x: (math.sin(x) / x) ** 2 - 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class IlsKernel:
    """Discrete sinc^2 lineshape (triangular apodization) on a line-by-line grid."""

    resolution: float
    opd: float
    taps: np.ndarray
    lbl_grid: WavenumberGrid
    output_grid: WavenumberGrid
    output_index: np.ndarray

    @property
    def half_width(self) -> int:
        return (len(self.taps) - 1) // 2

    @property
    def offsets(self) -> np.ndarray:
        return self.lbl_grid.step * np.arange(-self.half_width, self.half_width + 1)

    def matrix(self) -> np.ndarray:
        """Dense (n_out, n_lbl) operator: zero-padded convolution sampled at output points."""
        if not hasattr(self, "_matrix"):
            n = self.lbl_grid.count
            K = self.half_width
            M = np.zeros((len(self.output_index), n))
            for row, centre in enumerate(self.output_index):
                lo, hi = max(centre - K, 0), min(centre + K, n - 1)
                M[row, lo:hi + 1] = self.taps[lo - centre + K:hi - centre + K + 1]
            object.__setattr__(self, "_matrix", M)
        return self._matrix

    def convolve_full(self, values: np.ndarray) -> np.ndarray:
        """Zero-padded convolution on the line-by-line grid (no output sampling)."""
        return np.convolve(values, self.taps, mode="same")

    def measured_fwhm(self) -> float:
        """Full width at half maximum of the discrete taps (linear interpolation)."""
        K = self.half_width
        half = 0.5 * self.taps[K]
        right = self.taps[K:]
        j = int(np.argmax(right < half))
        x0, x1 = (j - 1) * self.lbl_grid.step, j * self.lbl_grid.step
        y0, y1 = right[j - 1], right[j]
        return 2.0 * (x0 + (half - y0) * (x1 - x0) / (y1 - y0))


def output_grid_for(lbl_grid: WavenumberGrid, resolution: float) -> WavenumberGrid:
    count = int(math.floor((lbl_grid.eta_max - lbl_grid.eta_min) / resolution + 1e-9)) + 1
    if count < 1:
        raise RenderConfigError("band narrower than one resolution element")
    return WavenumberGrid(lbl_grid.eta_min, lbl_grid.eta_min + (count - 1) * resolution, resolution)


def build_ils(resolution_fwhm: float, lbl_grid: WavenumberGrid, zeros: int = 4) -> IlsKernel:
    """sinc^2 lineshape with the requested FWHM, truncated at the ``zeros``-th zero.

    The optical path difference ``opd`` [cm] is fixed by the FWHM; the output
    grid samples the convolved spectrum every ``resolution_fwhm`` from the
    band start and must land on line-by-line points.
    """
    step = lbl_grid.step
    if resolution_fwhm <= step:
        raise RenderConfigError(f"resolution {resolution_fwhm} must exceed the line-by-line step {step}")
    opd = 2.0 * _SINC2_HALF / (math.pi * resolution_fwhm)
    K = int(math.floor(zeros / (opd * step) + 1e-9))
    x = math.pi * opd * step * np.arange(-K, K + 1)
    taps = np.ones_like(x)
    nz = x != 0
    taps[nz] = (np.sin(x[nz]) / x[nz]) ** 2
    taps = 0.5 * (taps + taps[::-1])
    taps /= taps.sum()
    out = output_grid_for(lbl_grid, resolution_fwhm)
    ratio = resolution_fwhm / step
    if abs(ratio - round(ratio)) > 1e-6:
        raise RenderConfigError("output resolution must be an integer multiple of the line-by-line step")
    idx = np.arange(out.count) * int(round(ratio))
    return IlsKernel(resolution_fwhm, opd, taps, lbl_grid, out, idx)


def apply_ils(spec: Spectrum, kernel: IlsKernel) -> Spectrum:
    if spec.grid != kernel.lbl_grid:
        raise RenderConfigError("spectrum grid does not match the lineshape's line-by-line grid")
    return Spectrum(kernel.output_grid, kernel.matrix() @ np.asarray(spec.values, dtype=np.float64))


def ils_operator(spectra: ad.Var, kernel: IlsKernel) -> ad.Var:
    """Differentiable lineshape application on (R, N_lbl) spectra."""
    return ad.linear_operator(spectra, kernel.matrix(), name="ils")


# -- single-path RTE ---------------------------------------------------------------


def integrate_rte(path, grid: WavenumberGrid, db: LineDatabase) -> Spectrum:
    """Spectral intensity reaching the camera along ``path``.

    ``path`` is a sequence of (state, length) pairs ordered from the camera
    outward; the march starts at the far end with zero intensity.
    """
    if not path:
        return Spectrum(grid, np.zeros(grid.count))
    kappa = np.array([absorption_spectrum(s, grid, db) for s, _ in path])
    ib = np.array([planck_intensity(float(s.T), grid.points) for s, _ in path])
    lengths = np.array([float(length) for _, length in path])
    if np.any(lengths <= 0):
        raise SpectralDomainError("segment lengths must be positive")
    ptr = np.array([0, len(path)], dtype=np.int64)
    out = kernels.rte_forward(kappa, ib, ptr, np.arange(len(path), dtype=np.int64), lengths)
    return Spectrum(grid, out[0])


# -- scenes and measurements ---------------------------------------------------------


@dataclass
class Scene:
    """Everything the forward operator needs besides the field itself."""

    geom: GridGeometry
    cameras: list
    lbl_grid: WavenumberGrid
    db: LineDatabase
    species: tuple
    kernel: IlsKernel
    kappa_model: object
    origins: np.ndarray
    directions: np.ndarray
    segments: SegmentTable

    @classmethod
    def build(cls, geom, cameras, lbl_grid, db, species, resolution=8.0, kappa_model=None,
              T_bounds=(T_FLOOR, T_CEIL)):
        species = tuple(species)
        if kappa_model is None:
            kappa_model = TabulatedKappa(db, lbl_grid, species, T_bounds[0], T_bounds[1])
        kernel = build_ils(resolution, lbl_grid)
        os_, ds_ = [], []
        for cam in cameras:
            o, d = camera_rays(cam)
            os_.append(o)
            ds_.append(d)
        origins, directions = np.concatenate(os_), np.concatenate(ds_)
        segs = trace_rays(origins, directions, geom)
        return cls(geom, list(cameras), lbl_grid, db, species, kernel, kappa_model, origins, directions, segs)

    @property
    def n_rays(self) -> int:
        return len(self.origins)

    @property
    def output_grid(self) -> WavenumberGrid:
        return self.kernel.output_grid

    def image_shape(self):
        cam = self.cameras[0]
        return (len(self.cameras), int(cam.pixels_y), int(cam.pixels_x), self.output_grid.count)


def render_cells(T: ad.Var, X: ad.Var, scene: Scene, rays=None) -> ad.Var:
    """Convolved spectra (R, n_out) for per-cell states via exact voxel traversal."""
    segs = scene.segments if rays is None else scene.segments.subset(rays)
    kappa = absorption(T, X, scene.kappa_model)
    ib = planck_field(T, scene.lbl_grid)
    lbl = rte_march(kappa, ib, segs.ptr, segs.cells, segs.lengths)
    return ils_operator(lbl, scene.kernel)


def render_samples(T: ad.Var, X: ad.Var, deltas, scene: Scene) -> ad.Var:
    """Convolved spectra for point samples: T (R*K,), X (R*K, S), deltas (R, K).

    Samples of each ray are ordered from the camera outward; sample ``i``
    stands for a homogeneous slab of thickness ``deltas[r, i]``.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    R, K = deltas.shape
    ptr = np.arange(R + 1, dtype=np.int64) * K
    kappa = absorption(T, X, scene.kappa_model)
    ib = planck_field(T, scene.lbl_grid)
    lbl = rte_march(kappa, ib, ptr, np.arange(R * K, dtype=np.int64), deltas.reshape(-1))
    return ils_operator(lbl, scene.kernel)


@dataclass
class Measurement:
    """Convolved spectra per camera pixel, shape (cameras, py, px, n_out)."""

    cameras: list
    grid: WavenumberGrid
    data: np.ndarray

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.grid.count)


def measurement_from_rays(values: np.ndarray, scene: Scene) -> Measurement:
    return Measurement(list(scene.cameras), scene.output_grid, np.asarray(values).reshape(scene.image_shape()))


def render_measurement(rep, scene: Scene, mode: str = "voxel-traversal", seed: int = 0) -> Measurement:
    """Render a representation (or a GridField) into a measurement."""
    from .fields import GridField

    if isinstance(rep, GridField):
        if mode != "voxel-traversal":
            raise RenderConfigError("GridField inputs render in voxel-traversal mode only")
        X = _align_species(rep, scene.species)
        spectra = render_cells(ad.Var(rep.T), ad.Var(X), scene)
        return measurement_from_rays(spectra.value, scene)
    if mode == "voxel-traversal":
        T, X = rep.cell_states(ad.Var(rep.theta.values))
        return measurement_from_rays(render_cells(T, X, scene).value, scene)
    if mode == "hierarchical":
        values = rep.render_hierarchical(ad.Var(rep.theta.values), scene, np.arange(scene.n_rays),
                                         np.random.default_rng(seed))
        return measurement_from_rays(values["fine"].value, scene)
    raise RenderConfigError(f"unknown render mode {mode!r}")


def _align_species(field_, species):
    out = np.zeros((field_.geom.n_cells, len(species)))
    for s, sp in enumerate(species):
        if sp in field_.species_list:
            out[:, s] = field_.X[:, field_.species_list.index(sp)]
    return out


# -- measurement file -------------------------------------------------------------


class MeasurementFormatError(ValueError):
    pass


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def write_measurement(meas: Measurement, path) -> None:
    with open(path, "w") as fh:
        fh.write("FTIRMEAS v1\n")
        fh.write(f"cameras {len(meas.cameras)}\n")
        for i, cam in enumerate(meas.cameras):
            fh.write(
                f"camera {i} origin {_fmt(cam.origin)} look_at {_fmt(cam.look_at)} up {_fmt(cam.up)} "
                f"focal {cam.focal_length!r} halfwidth {cam.sensor_halfwidth!r} "
                f"pixels {int(cam.pixels_x)} {int(cam.pixels_y)}\n"
            )
        g = meas.grid
        fh.write(f"grid {g.eta_min!r} {g.eta_max!r} {g.step!r}\n")
        n_cam, py, px, _ = meas.data.shape
        for c in range(n_cam):
            for i in range(py):
                for j in range(px):
                    fh.write(f"{c} {i} {j} " + " ".join(f"{v:.9e}" for v in meas.data[c, i, j]) + "\n")


def read_measurement(path) -> Measurement:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "FTIRMEAS v1":
        raise MeasurementFormatError(f"{path}: missing FTIRMEAS v1 header")
    try:
        n_cam = int(lines[1].split()[1])
        cams = []
        for i in range(n_cam):
            t = lines[2 + i].split()
            assert t[0] == "camera" and int(t[1]) == i
            assert t[2] == "origin" and t[6] == "look_at" and t[10] == "up"
            assert t[14] == "focal" and t[16] == "halfwidth" and t[18] == "pixels"
            cams.append(Camera([float(v) for v in t[3:6]], [float(v) for v in t[7:10]],
                               [float(v) for v in t[11:14]], float(t[15]), float(t[17]), int(t[19]), int(t[20])))
        g = lines[2 + n_cam].split()
        assert g[0] == "grid"
        grid = WavenumberGrid(float(g[1]), float(g[2]), float(g[3]))
    except (AssertionError, IndexError, ValueError) as exc:
        raise MeasurementFormatError(f"{path}: malformed header ({exc})") from None
    py, px = int(cams[0].pixels_y), int(cams[0].pixels_x)
    data = np.zeros((n_cam, py, px, grid.count))
    rows = lines[3 + n_cam:]
    if len(rows) != n_cam * py * px:
        raise MeasurementFormatError(f"{path}: expected {n_cam * py * px} pixel rows, found {len(rows)}")
    for k, row in enumerate(rows):
        t = row.split()
        try:
            c, i, j = int(t[0]), int(t[1]), int(t[2])
            vals = [float(v) for v in t[3:]]
        except (ValueError, IndexError):
            raise MeasurementFormatError(f"{path}: bad pixel row {k}") from None
        if len(vals) != grid.count:
            raise MeasurementFormatError(f"{path}: pixel row {k} has {len(vals)} values, expected {grid.count}")
        data[c, i, j] = vals
    return Measurement(cams, grid, data)
