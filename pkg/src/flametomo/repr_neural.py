"""Neural implicit field: encoded position -> (T, X) through coarse and fine MLPs.

Both networks share one architecture and live in a single flat parameter
vector (coarse block first). Outputs are squashed into the same physical
bounds as the voxel representation. Rendering uses two-pass hierarchical
sampling: stratified coarse samples, then inverse-CDF resampling driven by
Planck-mean opacity, with the fine network evaluated on the merged set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .fields import T_CEIL, T_FLOOR, GridField, ThermochemState
from .geometry import GridGeometry
from .repr_voxel import PENALTY_KINDS

log = logging.getLogger(__name__)

NETWORKS = ("coarse", "fine")


class CheckpointFormatError(ValueError):
    pass


class PretrainDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    num_frequencies: int = 10
    include_identity: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")

    @property
    def dim(self) -> int:
        return (3 if self.include_identity else 0) + 6 * self.num_frequencies


@dataclass(frozen=True)
class MlpConfig:
    hidden_dim: int = 64
    hidden_layers: int = 4
    n_outputs: int = 4

    def __post_init__(self):
        if self.hidden_dim < 1 or self.hidden_layers < 1 or self.n_outputs < 1:
            raise ValueError("MLP dimensions must be positive")

    def shapes(self, in_dim: int):
        """(fan_in, fan_out) of every affine layer."""
        dims = [in_dim] + [self.hidden_dim] * self.hidden_layers + [self.n_outputs]
        return list(zip(dims[:-1], dims[1:]))

    def n_params(self, in_dim: int) -> int:
        return sum(i * o + o for i, o in self.shapes(in_dim))


# -- encoding -------------------------------------------------------------------


def positional_encoding(x, cfg: EncodingConfig = EncodingConfig()) -> np.ndarray:
    """Sinusoidal lift of points in [-1, 1]^3, shape (..., cfg.dim).

    Layout: identity (3), then for k = 0..L-1 the block sin(2^k pi x) (3)
    followed by cos(2^k pi x) (3).
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if cfg.include_identity else []
    for k in range(cfg.num_frequencies):
        w = (2.0**k) * math.pi
        parts.append(np.sin(w * x))
        parts.append(np.cos(w * x))
    return np.concatenate(parts, axis=-1)


def encoding_jacobian(x, cfg: EncodingConfig = EncodingConfig()) -> np.ndarray:
    """d gamma / d x_d for each input direction d, shape (3, n, cfg.dim)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    out = np.zeros((3, n, cfg.dim))
    col = 0
    eye = np.eye(3)
    if cfg.include_identity:
        out[:, :, 0:3] = eye[:, None, :]
        col = 3
    for k in range(cfg.num_frequencies):
        w = (2.0**k) * math.pi
        for d in range(3):
            out[d, :, col + d] = w * np.cos(w * x[:, d])
            out[d, :, col + 3 + d] = -w * np.sin(w * x[:, d])
        col += 6
    return out


# -- network ----------------------------------------------------------------------


def network_layout(enc: EncodingConfig, mlp: MlpConfig):
    layout, offset = {}, 0
    for net in NETWORKS:
        for i, (fi, fo) in enumerate(mlp.shapes(enc.dim)):
            layout[f"{net}:W{i}"] = slice(offset, offset + fi * fo)
            offset += fi * fo
            layout[f"{net}:b{i}"] = slice(offset, offset + fo)
            offset += fo
    return layout, offset


def init_weights(enc: EncodingConfig, mlp: MlpConfig, seed: int = 0) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    layout, total = network_layout(enc, mlp)
    theta = np.empty(total)
    for net in NETWORKS:
        for i, (fi, _) in enumerate(mlp.shapes(enc.dim)):
            bound = 1.0 / math.sqrt(fi)
            for name in (f"{net}:W{i}", f"{net}:b{i}"):
                sl = layout[name]
                theta[sl] = rng.uniform(-bound, bound, sl.stop - sl.start)
    return theta


@dataclass
class NeuralRepresentation:
    geom: GridGeometry
    species_list: tuple
    theta: ad.ParamVector
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    mlp: Optional[MlpConfig] = None
    bounds: tuple = (T_FLOOR, T_CEIL)
    n_coarse: int = 64
    n_fine: int = 64

    def __post_init__(self):
        self.species_list = tuple(self.species_list)
        if self.mlp is None:
            self.mlp = MlpConfig(n_outputs=1 + len(self.species_list))
        if self.mlp.n_outputs != 1 + len(self.species_list):
            raise ValueError("MLP output heads must be 1 + number of species")
        expected = 2 * self.mlp.n_params(self.encoding.dim)
        if len(self.theta) != expected:
            raise ValueError(f"theta has {len(self.theta)} entries, architecture needs {expected}")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")

    @classmethod
    def create(cls, geom, species, encoding=EncodingConfig(), hidden_dim=64, hidden_layers=4,
               seed=0, bounds=(T_FLOOR, T_CEIL), n_coarse=64, n_fine=64):
        mlp = MlpConfig(hidden_dim, hidden_layers, 1 + len(species))
        layout, _ = network_layout(encoding, mlp)
        theta = ad.ParamVector(init_weights(encoding, mlp, seed), layout)
        return cls(geom, tuple(species), theta, encoding, mlp, tuple(bounds), n_coarse, n_fine)

    def with_theta(self, values) -> "NeuralRepresentation":
        return NeuralRepresentation(self.geom, self.species_list, self.theta.copy(values), self.encoding,
                                    self.mlp, self.bounds, self.n_coarse, self.n_fine)

    @property
    def param_bytes(self) -> int:
        return self.theta.values.nbytes

    # -- evaluation -----------------------------------------------------------------

    def _layers(self, theta: ad.Var, net: str):
        out = []
        for i, (fi, fo) in enumerate(self.mlp.shapes(self.encoding.dim)):
            W = ad.reshape(theta[self.theta.layout[f"{net}:W{i}"]], (fi, fo))
            b = theta[self.theta.layout[f"{net}:b{i}"]]
            out.append((W, b))
        return out

    def _encode_points(self, points):
        xn = np.clip(self.geom.normalize(np.atleast_2d(points)), -1.0, 1.0)
        return xn, positional_encoding(xn, self.encoding)

    def normalized_at(self, theta: ad.Var, net: str, points) -> ad.Var:
        """sigmoid of the network heads at ``points``, shape (n, 1 + S)."""
        _, h = self._encode_points(points)
        layers = self._layers(theta, net)
        for W, b in layers[:-1]:
            h = ad.softplus(ad.matmul(h, W) + b)
        W, b = layers[-1]
        return ad.sigmoid(ad.matmul(h, W) + b)

    def states_at(self, theta: ad.Var, net: str, points):
        """(T (n,), X (n, S)) as differentiable values."""
        norm = self.normalized_at(theta, net, points)
        lo, hi = self.bounds
        return lo + (hi - lo) * norm[:, 0], norm[:, 1:]

    def cell_states(self, theta: ad.Var):
        """Fine-network probe at every voxel center."""
        return self.states_at(theta, "fine", self.geom.cell_centers())

    def export(self) -> GridField:
        T, X = self.cell_states(ad.Var(self.theta.values))
        return GridField(self.geom, self.species_list, T.value, X.value)

    # -- regularizer ---------------------------------------------------------------

    def penalty(self, theta: ad.Var, kind: str, rng=None, fraction: float = 0.1) -> ad.Var:
        """ad_penalty on a random ``fraction`` of voxel centers, summed over both networks."""
        centers = self.geom.cell_centers()
        rng = np.random.default_rng(0) if rng is None else rng
        n = max(1, int(round(fraction * len(centers))))
        pts = centers[np.sort(rng.choice(len(centers), n, replace=False))]
        total = ad.Var(0.0)
        for net in NETWORKS:
            total = total + ad_penalty(self, theta, pts, kind, net)
        return total

    # -- rendering -----------------------------------------------------------------

    def render_hierarchical(self, theta: ad.Var, scene, rays, rng, n_coarse=None, n_fine=None, anchor=None):
        """Coarse and fine convolved spectra for ``rays``.

        Sample placement is not differentiated: the importance distribution
        is built from the coarse network at ``anchor`` parameter values
        (default: the current values of ``theta``) and enters the tape as a
        constant. Returns a dict with ``coarse`` and ``fine`` (R, n_out)
        values and the per-ray ``fallback`` flags of the importance resampler.
        """
        from .render import render_samples

        n_c = self.n_coarse if n_coarse is None else n_coarse
        n_f = self.n_fine if n_fine is None else n_fine
        rays = np.asarray(rays, dtype=np.int64)
        segs = scene.segments
        hit = segs.hit[rays]
        t_near = np.where(hit, segs.t_near[rays], 0.0)
        t_far = np.where(hit, segs.t_far[rays], 0.0)
        o = scene.origins[rays]
        d = scene.directions[rays]

        t_c, edges = stratified_samples(t_near, t_far, n_c, rng)
        pts_c = o[:, None, :] + t_c[..., None] * d[:, None, :]
        T_c, X_c = self.states_at(theta, "coarse", pts_c.reshape(-1, 3))
        delta_c = sample_deltas(t_c, t_far)
        coarse = render_samples(T_c, X_c, delta_c, scene)

        if anchor is None:
            Ta, Xa = T_c.value, X_c.value
        else:
            Ta, Xa = self.states_at(ad.Var(np.asarray(anchor, dtype=np.float64)), "coarse", pts_c.reshape(-1, 3))
            Ta, Xa = Ta.value, Xa.value
        kp = scene.kappa_model.planck_mean(Ta, Xa).reshape(t_c.shape)
        w = importance_weights(kp, delta_c)
        t_f, fallback = importance_resample(w, edges, n_f, rng)
        t_all = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
        pts = o[:, None, :] + t_all[..., None] * d[:, None, :]
        T_f, X_f = self.states_at(theta, "fine", pts.reshape(-1, 3))
        fine = render_samples(T_f, X_f, sample_deltas(t_all, t_far), scene)
        return {"coarse": coarse, "fine": fine, "fallback": fallback}

    def data_spectra(self, theta: ad.Var, scene, rays, rng=None, anchor=None):
        rng = np.random.default_rng(0) if rng is None else rng
        out = self.render_hierarchical(theta, scene, rays, rng, anchor=anchor)
        return [out["coarse"], out["fine"]]


def field_eval(rep: NeuralRepresentation, network: str, point) -> ThermochemState:
    """State of one network at one point; points outside the box get the ambient floor state."""
    if network not in NETWORKS:
        raise ValueError(f"network must be one of {NETWORKS}")
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if not rep.geom.contains(p)[0]:
        return ThermochemState(rep.bounds[0], {sp: 0.0 for sp in rep.species_list})
    T, X = rep.states_at(ad.Var(rep.theta.values), network, p)
    return ThermochemState(float(T.value[0]), dict(zip(rep.species_list, map(float, X.value[0]))))


# -- sampling -------------------------------------------------------------------


def stratified_samples(t_near, t_far, n, rng):
    """One uniform draw per equal sub-interval of [t_near, t_far].

    Accepts scalars or (R,) arrays; returns (t (R, n), edges (R, n + 1)).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    frac = np.linspace(0.0, 1.0, n + 1)
    edges = t_near[:, None] + (t_far - t_near)[:, None] * frac[None, :]
    u = rng.random((len(t_near), n))
    t = edges[:, :-1] + u * (edges[:, 1:] - edges[:, :-1])
    return t, edges


def sample_deltas(t, t_far):
    """Gaps to the next sample; the last sample extends to ``t_far``."""
    t = np.atleast_2d(t)
    nxt = np.concatenate([t[:, 1:], np.asarray(t_far, dtype=np.float64).reshape(-1, 1)], axis=1)
    return np.maximum(nxt - t, 0.0)


def importance_weights(kappa_p, deltas):
    """w_i = alpha_i * prod_{j<i} (1 - alpha_j) with alpha = 1 - exp(-kappa_p * delta)."""
    tau = np.asarray(kappa_p, dtype=np.float64) * np.asarray(deltas, dtype=np.float64)
    alpha = -np.expm1(-tau)
    # transmittance before sample i, computed in log space
    before = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    return alpha * before


def importance_resample(weights, edges, n, rng):
    """Inverse-CDF draws from the piecewise-constant pdf over bins ``edges``.

    Returns (t (R, n), fallback (R,)); rays whose weights sum to zero draw
    uniformly over [edges[0], edges[-1]] and are flagged.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    edges = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    R, K = w.shape
    total = w.sum(axis=1)
    fallback = ~(total > 0)
    w = np.where(fallback[:, None], 1.0, w)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((R, n))
    out = np.empty((R, n))
    for r in range(R):
        idx = np.clip(np.searchsorted(cdf[r], u[r], side="right") - 1, 0, K - 1)
        frac = (u[r] - cdf[r, idx]) / pdf[r, idx]
        lo, hi = edges[r, idx], edges[r, idx + 1]
        out[r] = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    return out, fallback


# -- regularizer ----------------------------------------------------------------


def ad_penalty(rep: NeuralRepresentation, theta: ad.Var, points, kind: str, network: str = "fine") -> ad.Var:
    """Spatial-gradient penalty of the normalized network outputs.

    Directional derivatives are carried forward through the network as tape
    values, so the result is itself differentiable in the weights. TV is the
    mean over points of sum_fields sum_dims |df/dx_d|; Tikhonov squares the
    derivatives instead.
    """
    if kind not in PENALTY_KINDS:
        raise ValueError(f"unknown penalty kind {kind!r}")
    xn, h = rep._encode_points(points)
    n = h.shape[0]
    # d xn / d x = 2 / extent per axis
    scale = 2.0 / rep.geom.extent
    dh = (encoding_jacobian(xn, rep.encoding) * scale[:, None, None]).reshape(3 * n, -1)
    layers = rep._layers(theta, network)
    for W, b in layers[:-1]:
        z = ad.matmul(h, W) + b
        dz = ad.matmul(dh, W)
        s = ad.sigmoid(z)
        h = ad.softplus(z)
        dh = ad.concatenate([s, s, s], axis=0) * dz
    W, b = layers[-1]
    f = ad.sigmoid(ad.matmul(h, W) + b)
    df = ad.concatenate([f * (1.0 - f)] * 3, axis=0) * ad.matmul(dh, W)
    per = ad.absolute(df) if kind == "tv" else ad.square(df)
    return ad.vsum(per) * (1.0 / n)


# -- pretraining ----------------------------------------------------------------


def pretrain_to_field(rep: NeuralRepresentation, target: GridField, epochs: int, rng=None,
                      learning_rate: float = 1e-3):
    """Fit both networks to ``target`` at the voxel centers (Adam, full batch).

    The loss is half the squared error of the bound-normalized outputs,
    averaged over cells and fields and summed over both networks. Returns
    (trained representation, final loss).
    """
    from .optimize import Adam, ReconstructionError

    if epochs == 0:
        return rep, float("nan")
    centers = rep.geom.cell_centers()
    lo, hi = rep.bounds
    tgt_T = np.clip((target.T - lo) / (hi - lo), 0.0, 1.0)
    X = np.zeros((target.geom.n_cells, len(rep.species_list)))
    for s, sp in enumerate(rep.species_list):
        if sp in target.species_list:
            X[:, s] = target.X[:, target.species_list.index(sp)]
    tgt = np.column_stack([tgt_T, X])

    def loss_fn(theta):
        total = ad.Var(0.0)
        for net in NETWORKS:
            total = total + ad.mean(ad.square(rep.normalized_at(theta, net, centers) - tgt))
        return total * 0.5

    obj = ad.TapeObjective(loss_fn)
    params = rep.theta
    opt = Adam(len(params), learning_rate)
    mse = float("nan")
    for epoch in range(epochs):
        try:
            mse, g = obj.value_and_grad(params.values)
            if not np.isfinite(mse):
                raise ReconstructionError("non-finite loss")
            params = opt.step(params, g)
        except (ReconstructionError, ad.PrimitiveDomainError) as exc:
            raise PretrainDivergedError(
                f"pretraining diverged at epoch {epoch} ({exc}); lower the learning rate (was {learning_rate})"
            ) from None
        if epoch % 100 == 0:
            log.info("pretrain epoch %d mse %.3g", epoch, mse)
    rep = rep.with_theta(params.values)
    return rep, float(obj.value(params.values))


# -- checkpoint -----------------------------------------------------------------


def write_checkpoint(rep: NeuralRepresentation, path) -> None:
    g = rep.geom
    with open(path, "w") as fh:
        fh.write("NNFIELD v1\n")
        fh.write(
            f"arch frequencies {rep.encoding.num_frequencies} identity {int(rep.encoding.include_identity)} "
            f"hidden {rep.mlp.hidden_dim} layers {rep.mlp.hidden_layers} outputs {rep.mlp.n_outputs} "
            f"samples {rep.n_coarse} {rep.n_fine}\n"
        )
        fh.write("species " + " ".join(rep.species_list) + "\n")
        fh.write("bounds " + " ".join(repr(float(b)) for b in rep.bounds) + "\n")
        fh.write("dims {} {} {}\n".format(*g.dims))
        fh.write("box " + " ".join(repr(float(v)) for v in (*g.box_min, *g.box_max)) + "\n")
        fh.write(f"params {len(rep.theta)}\n")
        for v in rep.theta.values:
            fh.write(f"{v:.8e}\n")


def read_checkpoint(path) -> NeuralRepresentation:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0] != "NNFIELD v1":
        raise CheckpointFormatError(f"{path}: missing NNFIELD v1 header")
    try:
        arch = lines[1].split()
        assert arch[0] == "arch"
        kv = dict(zip(arch[1:-3:2], arch[2:-3:2]))
        assert arch[-3] == "samples"
        n_c, n_f = int(arch[-2]), int(arch[-1])
        enc = EncodingConfig(int(kv["frequencies"]), bool(int(kv["identity"])))
        mlp = MlpConfig(int(kv["hidden"]), int(kv["layers"]), int(kv["outputs"]))
        tag, *species = lines[2].split()
        assert tag == "species"
        tag, *bounds = lines[3].split()
        assert tag == "bounds" and len(bounds) == 2
        tag, *dims = lines[4].split()
        assert tag == "dims" and len(dims) == 3
        tag, *box = lines[5].split()
        assert tag == "box" and len(box) == 6
        tag, count = lines[6].split()
        assert tag == "params"
        count = int(count)
        box = [float(v) for v in box]
    except (AssertionError, IndexError, KeyError, ValueError):
        raise CheckpointFormatError(f"{path}: malformed header") from None
    body = lines[7:]
    if len(body) != count:
        raise CheckpointFormatError(f"{path}: expected {count} parameters, found {len(body)}")
    try:
        values = np.array([float(v) for v in body])
    except ValueError:
        raise CheckpointFormatError(f"{path}: non-numeric parameter") from None
    geom = GridGeometry(box[:3], box[3:], tuple(int(n) for n in dims))
    layout, total = network_layout(enc, mlp)
    if total != count:
        raise CheckpointFormatError(f"{path}: architecture needs {total} parameters, file has {count}")
    return NeuralRepresentation(geom, tuple(species), ad.ParamVector(values, layout), enc, mlp,
                                tuple(float(b) for b in bounds), n_c, n_f)


def init_neural_from_truth(truth: GridField, noise_frac=0.2, seed=0, epochs=500, learning_rate=1e-3, **kwargs):
    """Create a network pair and pretrain it on the noise-perturbed truth."""
    from .repr_voxel import init_from_truth

    noisy = init_from_truth(truth, noise_frac, seed).export()
    rep = NeuralRepresentation.create(truth.geom, truth.species_list, seed=seed, **kwargs)
    return pretrain_to_field(rep, noisy, epochs, learning_rate=learning_rate)
