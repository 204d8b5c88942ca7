"""Command-line driver: ``flametomo synth | reconstruct | evaluate``.

Exit codes: 0 success, 2 input error, 64 usage error, 1 runtime failure.
All commands are deterministic given the config and seed; wall-clock epoch
timings are only written with ``--timing``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import autodiff as ad
from .fields import FieldFormatError, GridField, PhantomConfig, make_phantom, normalized_mse, read_grid, write_grid
from .geometry import GeometryError, GridGeometry, default_cameras
from .optimize import LossConfig, ReconstructionError, read_history, run_reconstruction, write_history
from .render import (
    MeasurementFormatError,
    RenderConfigError,
    Scene,
    read_measurement,
    render_measurement,
    write_measurement,
)
from .repr_neural import (
    CheckpointFormatError,
    EncodingConfig,
    NeuralRepresentation,
    PretrainDivergedError,
    pretrain_to_field,
    write_checkpoint,
)
from .repr_voxel import init_from_truth
from .spectra import BUNDLED_LINEDB, LineDatabaseError, SpectralDomainError, WavenumberGrid, load_line_database

log = logging.getLogger("flametomo")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_USAGE = 0, 1, 2, 64
WORKERS_ENV = "FLAMETOMO_WORKERS"

REPRESENTATIONS = ("vg", "nn")
REGULARIZER_NAMES = {"nr": "none", "tikh": "tikhonov", "tv": "tv"}

TRUTH_FILE = "truth.flamegrid"
MEASUREMENT_FILE = "measurement.ftirmeas"


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------------


def default_config() -> dict:
    text = resources.files("flametomo").joinpath("data/default.toml").read_text()
    return tomllib.loads(text)


def _merge(base: dict, override: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key != "peak_fractions":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be a table")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return _merge(cfg, user)


@dataclass
class Experiment:
    """Objects built from a config dict."""

    cfg: dict
    geom: GridGeometry
    species: tuple
    phantom: PhantomConfig
    lbl_grid: WavenumberGrid
    cameras: list
    seed: int

    @classmethod
    def from_config(cls, cfg: dict, seed=None) -> "Experiment":
        try:
            sc, sp, cam = cfg["scene"], cfg["spectra"], cfg["camera"]
            geom = GridGeometry(sc["box_min"], sc["box_max"], tuple(int(n) for n in sc["dims"]))
            ph = dict(cfg["phantom"])
            phantom = PhantomConfig(**ph)
            grid = WavenumberGrid(float(sp["eta_min"]), float(sp["eta_max"]), float(sp["lbl_step"]))
            count = int(cam["count"])
            if not 1 <= count <= 4:
                raise ConfigError("camera.count must be between 1 and 4")
            cams = default_cameras(geom, int(cam["pixels"]), float(cam["focal_length"]), float(cam["standoff"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        except (ValueError, GeometryError, SpectralDomainError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        seed = int(cfg.get("seed", 0)) if seed is None else int(seed)
        return cls(cfg, geom, tuple(sc["species"]), phantom, grid, cams[:count], seed)

    def line_database(self):
        path = self.cfg["spectra"]["line_database"] or BUNDLED_LINEDB
        return load_line_database(path)

    def scene(self) -> Scene:
        try:
            return Scene.build(self.geom, self.cameras, self.lbl_grid, self.line_database(), self.species,
                               resolution=float(self.cfg["spectra"]["resolution"]))
        except RenderConfigError as exc:
            raise ConfigError(str(exc)) from None


def parse_method(text: str):
    parts = text.lower().split("/")
    if len(parts) != 2 or parts[0] not in REPRESENTATIONS or parts[1] not in REGULARIZER_NAMES:
        raise UsageError(f"unknown method {text!r}; expected <vg|nn>/<nr|tikh|tv>")
    return parts[0], parts[1]


def method_tag(rep: str, reg: str) -> str:
    return f"{rep}_{reg}"


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    exp = Experiment.from_config(load_config(args.config), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = make_phantom(exp.phantom, exp.geom, exp.species)
    meas = render_measurement(truth, exp.scene())
    write_grid(truth, out / TRUTH_FILE)
    write_measurement(meas, out / MEASUREMENT_FILE)
    n_cam, py, px, n_out = meas.data.shape
    print(f"wrote {out / TRUTH_FILE} and {out / MEASUREMENT_FILE} ({n_cam} cameras x {py}x{px} pixels x {n_out} points)")
    return EXIT_OK


def loss_config(exp: Experiment, rep_kind: str, reg: str, workers: int = 1) -> LossConfig:
    opt = exp.cfg["optimizer"]
    sec = opt["voxel" if rep_kind == "vg" else "neural"]
    try:
        return LossConfig(
            lambda_reg=float(opt["lambda_reg"]),
            regularizer=REGULARIZER_NAMES[reg],
            learning_rate=float(sec["learning_rate"]),
            epochs=int(sec["epochs"]),
            minibatch_rays=int(opt["minibatch_rays"]) or None,
            seed=exp.seed,
            optimizer=sec.get("optimizer", "gd"),
            ray_chunk=int(sec["ray_chunk"]) if "ray_chunk" in sec else None,
            reduction=opt["reduction"],
            workers=workers,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid optimizer config: {exc}") from None


def build_neural(exp: Experiment, truth: GridField):
    nc = exp.cfg["optimizer"]["neural"]
    rep = NeuralRepresentation.create(
        truth.geom, truth.species_list, EncodingConfig(int(nc["frequencies"])), int(nc["hidden_dim"]),
        int(nc["hidden_layers"]), seed=exp.seed, n_coarse=int(nc["n_coarse"]), n_fine=int(nc["n_fine"]),
    )
    noisy = init_from_truth(truth, float(exp.cfg["optimizer"]["init_noise"]), exp.seed).export()
    rep, fit = pretrain_to_field(rep, noisy, int(nc["pretrain_epochs"]),
                                 learning_rate=float(nc["pretrain_learning_rate"]))
    log.info("pretraining fit loss %.4g", fit)
    return rep


def _check_compatible(exp: Experiment, truth: GridField, meas, scene: Scene):
    if truth.geom.dims != exp.geom.dims or not np.allclose(truth.geom.box_min, exp.geom.box_min) \
            or not np.allclose(truth.geom.box_max, exp.geom.box_max):
        raise ConfigError("truth grid does not match the config's scene")
    if meas.data.shape != scene.image_shape():
        raise ConfigError(f"measurement shape {meas.data.shape} does not match the config ({scene.image_shape()})")


def cmd_reconstruct(args) -> int:
    if not args.method:
        raise UsageError("reconstruct needs --method <vg|nn>/<nr|tikh|tv>")
    rep_kind, reg = parse_method(args.method)
    exp = Experiment.from_config(load_config(args.config), args.seed)
    out = Path(args.out)
    data = Path(args.data) if args.data else out
    for name in (TRUTH_FILE, MEASUREMENT_FILE):
        if not (data / name).is_file():
            raise ConfigError(f"missing input {data / name}; run 'flametomo synth' first")
    truth = read_grid(data / TRUTH_FILE)
    meas = read_measurement(data / MEASUREMENT_FILE)
    scene = exp.scene()
    _check_compatible(exp, truth, meas, scene)
    cfg = loss_config(exp, rep_kind, reg, _workers())
    if rep_kind == "vg":
        rep = init_from_truth(truth, float(exp.cfg["optimizer"]["init_noise"]), exp.seed)
    else:
        rep = build_neural(exp, truth)
    out.mkdir(parents=True, exist_ok=True)
    tag = method_tag(rep_kind, reg)
    try:
        rep, history = run_reconstruction(scene, rep, meas, cfg)
    except ReconstructionError as exc:
        if exc.last_good is not None:
            _write_outputs(out, tag, exc.last_good, exc.history, args.timing, suffix=".lastgood")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_outputs(out, tag, rep, history, args.timing)
    if history:
        print(f"{tag}: {len(history)} epochs, loss {history[0].total:.6g} -> {history[-1].total:.6g}")
    return EXIT_OK


def _write_outputs(out: Path, tag: str, rep, history, timing: bool, suffix=""):
    write_grid(rep.export(), out / f"recon_{tag}{suffix}.flamegrid")
    write_history(history, out / f"history_{tag}{suffix}.csv", include_timing=timing)
    if isinstance(rep, NeuralRepresentation):
        write_checkpoint(rep, out / f"nnfield_{tag}{suffix}.nnfield")



def evaluate_rows(truth: GridField, recons: dict, histories: dict):
    rows = []
    for tag, recon in recons.items():
        report = normalized_mse(recon, truth)
        row = {"method": tag.replace("_", "/")}
        for name, value in report.items():
            row[f"MSE_{name}"] = value
        hist = histories.get(tag) or []
        times = [r.epoch_ms for r in hist if np.isfinite(r.epoch_ms)]
        row["epoch_ms"] = float(np.mean(times)) if times else float("nan")
        row["mem_bytes"] = hist[-1].mem_bytes if hist else 0
        rows.append(row)
    return rows


def format_table(rows) -> str:
    if not rows:
        return "(no reconstructions)\n"
    keys = list(rows[0])
    widths = {k: max(len(k), 12) for k in keys}
    lines = ["  ".join(k.ljust(widths[k]) for k in keys)]
    for row in rows:
        cells = []
        for k in keys:
            v = row[k]
            if isinstance(v, float):
                v = "n/a" if not np.isfinite(v) else f"{v:.6g}"
            cells.append(str(v).ljust(widths[k]))
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    truth_path = Path(args.truth) if args.truth else out / TRUTH_FILE
    if args.recon:
        recon_paths = [Path(p) for p in args.recon]
    else:
        recon_paths = sorted(out.glob("recon_*.flamegrid"))
        recon_paths = [p for p in recon_paths if ".lastgood" not in p.name]
    for p in [truth_path, *recon_paths]:
        if not p.is_file():
            raise ConfigError(f"missing input {p}")
    if not recon_paths:
        raise ConfigError(f"no reconstructions found in {out}")
    truth = read_grid(truth_path)
    recons, histories = {}, {}
    for p in recon_paths:
        tag = p.stem[len("recon_"):] if p.stem.startswith("recon_") else p.stem
        recons[tag] = read_grid(p)
        hist_path = p.with_name(f"history_{tag}.csv")
        if hist_path.is_file():
            histories[tag] = read_history(hist_path)
    try:
        rows = evaluate_rows(truth, recons, histories)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = format_table(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mse_table.txt").write_text(text)
    with open(out / "mse_table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flametomo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML config (default: bundled default.toml)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    s = sub.add_parser("synth", help="render the phantom into truth and measurement files")
    common(s)
    r = sub.add_parser("reconstruct", help="reconstruct a field from the measurement")
    common(r)
    r.add_argument("--method", required=True, help="<vg|nn>/<nr|tikh|tv>")
    r.add_argument("--data", help="directory holding truth and measurement files (default: --out)")
    r.add_argument("--timing", action="store_true", help="record wall-clock epoch times in the history")
    e = sub.add_parser("evaluate", help="normalized MSE table for reconstructions")
    e.add_argument("--config", help="accepted for symmetry; unused")
    e.add_argument("--seed", type=int, help="accepted for symmetry; unused")
    e.add_argument("--out", required=True, help="directory with reconstructions; tables are written here")
    e.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    e.add_argument("--truth", help="truth FLAMEGRID (default: <out>/truth.flamegrid)")
    e.add_argument("--recon", nargs="+", help="reconstruction FLAMEGRID files (default: <out>/recon_*)")
    return p


COMMANDS = {"synth": cmd_synth, "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"flametomo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FieldFormatError, MeasurementFormatError, CheckpointFormatError,
            LineDatabaseError, OSError) as exc:
        print(f"flametomo: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PretrainDivergedError, ReconstructionError, ad.PrimitiveDomainError) as exc:
        print(f"flametomo: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
