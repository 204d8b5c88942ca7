import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from flametomo import autodiff as ad
from flametomo import optimize as opt
from flametomo.fields import PhantomConfig, make_phantom
from flametomo.geometry import Camera, GridGeometry, default_cameras
from flametomo.optimize import (
    LossConfig,
    ReconstructionError,
    ReconstructionObjective,
    gd_step,
    read_history,
    run_reconstruction,
    total_loss,
    write_history,
)
from flametomo.render import Scene, render_measurement
from flametomo.repr_voxel import VoxelRepresentation, init_from_truth
from flametomo.spectra import WavenumberGrid

SPECIES = ("CO2", "H2O", "CH4")


class VectorRep:
    """Toy representation whose rendered spectra are the parameters themselves."""

    def __init__(self, values, shape, blow_up_at=None):
        self.theta = ad.ParamVector(np.asarray(values, dtype=np.float64), {"v": slice(0, int(np.prod(shape)))})
        self.shape = shape
        self.blow_up_at = blow_up_at

    def with_theta(self, values):
        return VectorRep(values, self.shape, self.blow_up_at)

    def data_spectra(self, theta, scene, rays, rng=None, anchor=None):
        out = ad.reshape(theta, self.shape)
        if self.blow_up_at is not None and theta.value[0] > self.blow_up_at:
            out = ad.log(out - 1e9)
        return [out if rays is None else ad.take_rows(out, np.asarray(rays))]

    def penalty(self, theta, kind, rng=None):
        return ad.vsum(ad.square(theta))


def fake_scene(n_rays, n_out):
    return SimpleNamespace(n_rays=n_rays, output_grid=SimpleNamespace(count=n_out))


@pytest.fixture(scope="module")
def scene4(db):
    g = GridGeometry((-0.5, -0.5, 0), (0.5, 0.5, 1), (4, 4, 4))
    return Scene.build(g, default_cameras(g, 4), WavenumberGrid(650.0, 725.0, 0.5), db, SPECIES)


@pytest.fixture(scope="module")
def truth4(scene4):
    return make_phantom(PhantomConfig(), scene4.geom)


@pytest.fixture(scope="module")
def meas4(scene4, truth4):
    return render_measurement(truth4, scene4)


class TestLossConfig:
    @pytest.mark.parametrize("kw", [
        {"lambda_reg": -1.0}, {"learning_rate": 0.0}, {"regularizer": "l2"},
        {"optimizer": "sgd"}, {"reduction": "mean"}, {"minibatch_rays": 0}, {"workers": 0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)

    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.lambda_reg == 1e-3 and cfg.regularizer == "none" and cfg.reduction == "sum"


class TestTotalLoss:
    def test_hand_residuals(self):
        rep = VectorRep([1.1, 0.8], (1, 2))
        obj = total_loss(rep, np.array([[1.0, 1.0]]), LossConfig(), fake_scene(1, 2))
        assert obj.value(rep.theta.values) == pytest.approx(0.05, rel=1e-12)

    def test_zero_at_own_rendering(self, scene4, truth4):
        rep = init_from_truth(truth4, 0.2, seed=1)
        meas = render_measurement(rep, scene4)
        assert total_loss(rep, meas, LossConfig(), scene4).value(rep.theta.values) == 0.0

    def test_constant_field_penalty_zero(self, scene4, meas4):
        n = scene4.geom.n_cells
        rep = VoxelRepresentation.from_states(scene4.geom, SPECIES, np.full(n, 1100.0), np.full((n, 3), 0.05))
        cfg = LossConfig(regularizer="tv", lambda_reg=0.5)
        obj = total_loss(rep, meas4, cfg, scene4)
        value = obj.value(rep.theta.values)
        assert obj.terms[1] == 0.0 and value == obj.terms[0]

    def test_shape_mismatch(self, scene4):
        rep = VectorRep([1.0, 2.0], (1, 2))
        with pytest.raises(ValueError):
            total_loss(rep, np.zeros((3, 10)), LossConfig(), scene4)

    def test_ray_mean_reduction(self):
        rep = VectorRep([1.0, 2.0, 3.0, 4.0], (2, 2))
        target = np.zeros((2, 2))
        s = total_loss(rep, target, LossConfig(), fake_scene(2, 2)).value(rep.theta.values)
        m = total_loss(rep, target, LossConfig(reduction="ray_mean"), fake_scene(2, 2)).value(rep.theta.values)
        assert m == pytest.approx(s / 2)

    def test_truth_is_stationary(self, scene4, truth4, meas4):
        rep = init_from_truth(truth4, 0.0)
        _, g = total_loss(rep, meas4, LossConfig(lambda_reg=0.0), scene4).value_and_grad(rep.theta.values)
        assert np.linalg.norm(g) < 1e-8

    def test_workers_bit_identical(self, scene4, truth4, meas4):
        rep = init_from_truth(truth4, 0.2, seed=2)
        base = LossConfig(regularizer="tikhonov", ray_chunk=7)
        serial = ReconstructionObjective(rep, scene4, meas4, base).value_and_grad(rep.theta.values)
        par = ReconstructionObjective(rep, scene4, meas4, dataclasses.replace(base, workers=4)).value_and_grad(rep.theta.values)
        assert serial[0] == par[0] and serial[1].tobytes() == par[1].tobytes()

    def test_chunking_matches_full_batch(self, scene4, truth4, meas4):
        rep = init_from_truth(truth4, 0.2, seed=2)
        full = ReconstructionObjective(rep, scene4, meas4, LossConfig()).value_and_grad(rep.theta.values)
        chunked = ReconstructionObjective(rep, scene4, meas4, LossConfig(ray_chunk=5)).value_and_grad(rep.theta.values)
        assert chunked[0] == pytest.approx(full[0], rel=1e-12)
        np.testing.assert_allclose(chunked[1], full[1], rtol=1e-10, atol=1e-14 * np.abs(full[1]).max())


class TestGdStep:
    def test_zero_gradient(self):
        p = ad.ParamVector(np.array([1.0, -2.0]))
        assert np.array_equal(gd_step(p, np.zeros(2), 0.5).values, p.values)

    def test_zero_rate(self):
        p = ad.ParamVector(np.array([1.0, -2.0]))
        assert np.array_equal(gd_step(p, np.array([3.0, 1e6]), 0.0).values, p.values)

    def test_quadratic_contraction(self):
        p = ad.ParamVector(np.array([-7.0]))
        for step in range(50):
            p = gd_step(p, 2 * (p.values - 2.0), 0.4)
            if abs(p.values[0] - 2.0) < 1e-6:
                break
        assert abs(p.values[0] - 2.0) < 1e-6 and step < 50

    def test_non_finite_names_slice(self):
        p = ad.ParamVector(np.zeros(4), {"T": slice(0, 2), "X:CO2": slice(2, 4)})
        with pytest.raises(ReconstructionError, match="X:CO2"):
            gd_step(p, np.array([0.0, 0.0, np.nan, 0.0]), 0.1)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gd_step(ad.ParamVector(np.zeros(2)), np.zeros(3), 0.1)


class TestRunReconstruction:
    def test_zero_epochs(self, scene4, truth4, meas4):
        rep = init_from_truth(truth4, 0.2)
        out, hist = run_reconstruction(scene4, rep, meas4, LossConfig(epochs=0))
        assert hist == [] and np.array_equal(out.theta.values, rep.theta.values)

    def test_vg_tv_converges(self, scene4, truth4, meas4):
        rep = init_from_truth(truth4, 0.2, seed=0)
        _, hist = run_reconstruction(scene4, rep, meas4, LossConfig(regularizer="tv", epochs=200))
        assert hist[-1].total < 0.1 * hist[0].total

    def test_deterministic_and_consistent(self, scene4, truth4, meas4):
        rep = init_from_truth(truth4, 0.2, seed=3)
        cfg = LossConfig(regularizer="tikhonov", lambda_reg=0.01, epochs=6, minibatch_rays=20)
        a = run_reconstruction(scene4, rep, meas4, cfg)
        b = run_reconstruction(scene4, rep, meas4, cfg)
        strip = lambda h: [dataclasses.replace(r, epoch_ms=0.0) for r in h]
        assert strip(a[1]) == strip(b[1])
        assert a[0].theta.values.tobytes() == b[0].theta.values.tobytes()
        for rec in a[1]:
            assert rec.total == pytest.approx(rec.data_loss + cfg.lambda_reg * rec.penalty, rel=1e-12)
            assert rec.mem_bytes == 2 * rep.theta.values.nbytes

    def test_minibatch_covers_every_ray(self, scene4, truth4, meas4):
        seen = []
        rep = init_from_truth(truth4, 0.2, seed=3)
        original = opt.ReconstructionObjective

        def recording(*args, **kw):
            obj = original(*args, **kw)
            seen.append(obj.rays.copy())
            return obj

        opt.ReconstructionObjective = recording
        try:
            run_reconstruction(scene4, rep, meas4, LossConfig(epochs=1, minibatch_rays=13))
        finally:
            opt.ReconstructionObjective = original
        assert sorted(np.concatenate(seen).tolist()) == list(range(scene4.n_rays))
        assert max(len(s) for s in seen) == 13

    def test_adam_state_counts_toward_memory(self):
        rep = VectorRep([1.0, 2.0], (1, 2))
        _, hist = run_reconstruction(fake_scene(1, 2), rep, np.zeros((1, 2)), LossConfig(epochs=2, optimizer="adam"))
        assert hist[0].mem_bytes == 4 * 16

    def test_nan_aborts_with_last_good(self):
        rep = VectorRep([0.0, 0.0], (1, 2), blow_up_at=0.5)
        target = np.array([[10.0, 10.0]])
        with pytest.raises(ReconstructionError) as info:
            run_reconstruction(fake_scene(1, 2), rep, target, LossConfig(epochs=50, learning_rate=0.2))
        err = info.value
        assert err.last_good is not None and np.all(np.isfinite(err.last_good.theta.values))
        assert len(err.history) >= 1

    def test_regularization_pressure_is_monotone(self, db):
        g = GridGeometry((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0), (2, 1, 1))
        cams = [Camera((0.0, -1.5, 0.5), (0.0, 0.0, 0.5), (0, 0, 1), 0.59, 0.25, 2, 1)]
        scene = Scene.build(g, cams, WavenumberGrid(650.0, 725.0, 0.5), db, SPECIES)
        truth = VoxelRepresentation.from_states(g, SPECIES, [700.0, 1600.0], [[0.05, 0.08, 0.01], [0.1, 0.15, 0.02]])
        meas = render_measurement(truth, scene)
        start = VoxelRepresentation.from_states(g, SPECIES, [1000.0, 1000.0], np.full((2, 3), 0.07))
        penalties = []
        for lam in (0.0, 1e-3, 1e-1):
            cfg = LossConfig(regularizer="tikhonov", lambda_reg=lam, epochs=400, learning_rate=0.05, optimizer="adam")
            rep, _ = run_reconstruction(scene, start, meas, cfg)
            penalties.append(float(rep.penalty(ad.Var(rep.theta.values), "tikhonov").value))
        assert penalties[0] >= penalties[1] >= penalties[2]


class TestHistoryFile:
    def test_round_trip(self, tmp_path):
        rep = VectorRep([1.0, 2.0], (1, 2))
        _, hist = run_reconstruction(fake_scene(1, 2), rep, np.zeros((1, 2)), LossConfig(epochs=3, learning_rate=0.1))
        write_history(hist, tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,data_loss,penalty,total,epoch_ms,mem_bytes"
        back = read_history(tmp_path / "h.csv")
        assert [r.total for r in back] == [r.total for r in hist]

    def test_timing_blank(self, tmp_path):
        rep = VectorRep([1.0, 2.0], (1, 2))
        _, hist = run_reconstruction(fake_scene(1, 2), rep, np.zeros((1, 2)), LossConfig(epochs=2))
        write_history(hist, tmp_path / "h.csv", include_timing=False)
        assert all(np.isnan(r.epoch_ms) for r in read_history(tmp_path / "h.csv"))
