"""Loss assembly, gradient descent and the reconstruction epoch loop."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "tikhonov", "tv")
REDUCTIONS = ("sum", "ray_mean")


class ReconstructionError(RuntimeError):
    """Raised when the loss or gradient becomes non-finite.

    ``last_good`` holds the representation from the last finite epoch and
    ``history`` the records up to that point.
    """

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []


@dataclass
class LossConfig:
    lambda_reg: float = 1e-3
    regularizer: str = "none"
    learning_rate: float = 1e-2
    epochs: int = 100
    minibatch_rays: Optional[int] = None
    seed: int = 0
    optimizer: str = "gd"
    ray_chunk: Optional[int] = None
    reduction: str = "sum"
    workers: int = 1

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError("optimizer must be 'gd' or 'adam'")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if self.minibatch_rays is not None and self.minibatch_rays < 1:
            raise ValueError("minibatch_rays must be positive")


@dataclass
class EpochRecord:
    epoch: int
    data_loss: float
    penalty: float
    total: float
    epoch_ms: float
    mem_bytes: int


def _target_rows(measurement, scene):
    flat = measurement.flat() if callable(getattr(measurement, "flat", None)) else np.asarray(measurement)
    flat = np.asarray(flat, dtype=np.float64).reshape(-1, scene.output_grid.count)
    if flat.shape[0] != scene.n_rays:
        raise ValueError(f"measurement has {flat.shape[0]} pixels, scene renders {scene.n_rays}")
    return flat


class ReconstructionObjective:
    """Loss ||H[f_theta] - g||^2 + lambda * Phi as a :class:`~flametomo.autodiff.Differentiable`.

    The data term is summed over cameras, pixels and output wavenumbers (and
    over every rendered pass, e.g. coarse and fine). With
    ``reduction="ray_mean"`` it is divided by the scene's ray count, which
    keeps the weight of lambda independent of the image size. Rays are
    processed in chunks, each with its own tape, optionally on ``workers``
    threads; chunk results are accumulated in chunk order so the outcome
    does not depend on the thread count.
    ``sample_anchor`` pins the parameters that place stochastic ray samples
    (neural path) so the objective is one fixed smooth function.
    """

    def __init__(self, rep, scene, measurement, cfg: LossConfig, rays=None, epoch: int = 0,
                 penalty_weight: float = 1.0, sample_anchor=None):
        self.rep, self.scene, self.cfg = rep, scene, cfg
        self.target = _target_rows(measurement, scene)
        self.rays = np.arange(scene.n_rays) if rays is None else np.asarray(rays, dtype=np.int64)
        self.epoch = epoch
        self.penalty_weight = penalty_weight
        self.sample_anchor = sample_anchor
        self.terms = (0.0, 0.0)

    def _chunks(self):
        size = self.cfg.ray_chunk or len(self.rays) or 1
        for c, start in enumerate(range(0, len(self.rays), size)):
            yield c, self.rays[start:start + size]

    def _rng(self, *stream):
        return np.random.default_rng([self.cfg.seed, self.epoch, *stream])

    def _chunk_loss(self, values, need_grad, c, rays):
        theta = ad.Var(values, requires_grad=need_grad)
        target = self.target[rays]
        loss = ad.Var(0.0)
        for spectra in self.rep.data_spectra(theta, self.scene, rays, self._rng(1, c), self.sample_anchor):
            loss = loss + ad.vsum(ad.square(spectra - target))
        if self.cfg.reduction == "ray_mean":
            loss = loss * (1.0 / self.scene.n_rays)
        return float(loss.value), (ad.grad(loss, [theta])[0] if need_grad else None)

    def _evaluate(self, values, need_grad):
        total_grad = np.zeros_like(values) if need_grad else None
        data = 0.0
        chunks = list(self._chunks())
        if self.cfg.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                parts = list(pool.map(lambda ch: self._chunk_loss(values, need_grad, *ch), chunks))
        else:
            parts = [self._chunk_loss(values, need_grad, *ch) for ch in chunks]
        for value, g in parts:
            data += value
            if need_grad:
                total_grad += g
        penalty = 0.0
        if self.cfg.regularizer != "none" and self.cfg.lambda_reg > 0:
            theta = ad.Var(values, requires_grad=need_grad)
            phi = self.rep.penalty(theta, self.cfg.regularizer, self._rng(2))
            penalty = float(phi.value)
            if need_grad:
                weight = self.cfg.lambda_reg * self.penalty_weight
                total_grad += weight * ad.grad(phi, [theta])[0]
        elif self.cfg.regularizer != "none":
            penalty = float(self.rep.penalty(ad.Var(values), self.cfg.regularizer, self._rng(2)).value)
        self.terms = (data, penalty)
        total = data + self.cfg.lambda_reg * self.penalty_weight * penalty
        return total, total_grad

    def value(self, values) -> float:
        return self._evaluate(np.asarray(values, dtype=np.float64), False)[0]

    def value_and_grad(self, values):
        return self._evaluate(np.asarray(values, dtype=np.float64), True)


def total_loss(rep, measurement, cfg: LossConfig, scene) -> ReconstructionObjective:
    """The full-batch objective for ``rep``; call ``value``/``value_and_grad`` on it."""
    return ReconstructionObjective(rep, scene, measurement, cfg)


def gd_step(theta: ad.ParamVector, gradient, learning_rate: float) -> ad.ParamVector:
    """theta - learning_rate * gradient; refuses non-finite gradients."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != theta.values.shape:
        raise ValueError(f"gradient length {g.size} != parameter length {len(theta)}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise ReconstructionError(
            f"non-finite gradient in parameter slice {theta.slice_of(int(bad[0]))!r} (index {int(bad[0])})"
        )
    return theta.copy(theta.values - learning_rate * g)


class Adam:
    """Adaptive first-order step (opt-in for the neural path)."""

    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps

    def step(self, theta: ad.ParamVector, g) -> ad.ParamVector:
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise ReconstructionError(f"non-finite gradient in parameter slice {theta.slice_of(bad)!r}")
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta.copy(theta.values - self.lr * mhat / (np.sqrt(vhat) + self.eps))

    @property
    def nbytes(self):
        return self.m.nbytes + self.v.nbytes


def run_reconstruction(scene, rep, measurement, cfg: LossConfig, callback=None):
    """Epoch loop: render, loss, gradient, update. Returns (final rep, history).

    An epoch is one pass over all rays (one step when full batch, one step per
    minibatch otherwise). A non-finite loss raises :class:`ReconstructionError`
    carrying the last good representation.
    """
    history: list[EpochRecord] = []
    n_params = len(rep.theta)
    adam = Adam(n_params, cfg.learning_rate) if cfg.optimizer == "adam" else None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.minibatch_rays:
            order = np.random.default_rng([cfg.seed, epoch, 3]).permutation(scene.n_rays)
            batches = [order[i:i + cfg.minibatch_rays] for i in range(0, scene.n_rays, cfg.minibatch_rays)]
        else:
            batches = [None]
        data = penalty = total = 0.0
        theta = rep.theta
        for b, rays in enumerate(batches):
            weight = 1.0 if rays is None else len(rays) / scene.n_rays
            obj = ReconstructionObjective(rep.with_theta(theta.values), scene, measurement, cfg,
                                          rays=rays, epoch=epoch, penalty_weight=weight)
            try:
                value, g = obj.value_and_grad(theta.values)
            except ad.PrimitiveDomainError as exc:
                raise ReconstructionError(f"epoch {epoch}: {exc}", rep, history) from None
            if not np.isfinite(value):
                raise ReconstructionError(f"non-finite loss at epoch {epoch}", rep, history)
            data += obj.terms[0]
            penalty += weight * obj.terms[1]
            total += value
            try:
                theta = adam.step(theta, g) if adam else gd_step(theta, g, cfg.learning_rate)
            except ReconstructionError as exc:
                raise ReconstructionError(f"epoch {epoch}: {exc}", rep, history) from None
        mem = rep.theta.values.nbytes * 2 + (adam.nbytes if adam else 0)
        rec = EpochRecord(epoch, data, penalty, total, (time.perf_counter() - t0) * 1e3, int(mem))
        history.append(rec)
        rep = rep.with_theta(theta.values)
        if callback is not None:
            callback(rec, rep)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d total %.6g data %.6g penalty %.6g (%.0f ms)", epoch, total, data, penalty, rec.epoch_ms)
    return rep, history


HISTORY_FIELDS = ("epoch", "data_loss", "penalty", "total", "epoch_ms", "mem_bytes")


def write_history(history, path, include_timing: bool = True) -> None:
    """CSV export; ``include_timing=False`` blanks wall-clock columns for reproducible files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            row = asdict(rec)
            w.writerow([
                row["epoch"], repr(row["data_loss"]), repr(row["penalty"]), repr(row["total"]),
                f"{row['epoch_ms']:.3f}" if include_timing else "", row["mem_bytes"],
            ])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), float(r["data_loss"]), float(r["penalty"]), float(r["total"]),
                    float(r["epoch_ms"]) if r["epoch_ms"] else float("nan"), int(r["mem_bytes"]))
        for r in rows
    ]
