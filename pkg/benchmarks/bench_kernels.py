"""Compiled vs numpy kernel timings on a desk-scale workload.

    python benchmarks/bench_kernels.py [--repeat 5] [--pixels 16] [--dims 16]

Prints the best-of-N wall time of each kernel for both backends and the
speedup of the compiled one.
"""

import argparse
import timeit

import numpy as np

from flametomo import _kernels_py as py
from flametomo.fields import T_CEIL, T_FLOOR
from flametomo.geometry import GridGeometry, camera_rays, default_cameras, intersect_aabb_batch
from flametomo.render import TabulatedKappa
from flametomo.spectra import WavenumberGrid, load_line_database

try:
    from flametomo import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def workload(dims, pixels, lbl_step):
    geom = GridGeometry((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0), (dims, dims, dims))
    rays = [camera_rays(c) for c in default_cameras(geom, pixels)]
    o = np.concatenate([r[0] for r in rays])
    d = np.concatenate([r[1] for r in rays])
    tn, tf, hit = intersect_aabb_batch(o, d, geom.box_min, geom.box_max)
    trav = (o, d, tn, tf, hit, geom.box_min, geom.spacing, np.array(geom.dims), 1e-12)
    ptr, cells, lengths, _ = py.traverse_batch(*trav)
    grid = WavenumberGrid(650.0, 725.0, lbl_step)
    table = TabulatedKappa(load_line_database(), grid, ("CO2", "H2O", "CH4"), T_FLOOR, T_CEIL).table
    rng = np.random.default_rng(0)
    T = rng.uniform(300.0, 1800.0, geom.n_cells)
    X = rng.uniform(0.0, 0.2, (geom.n_cells, 3))
    kappa = np.ascontiguousarray(rng.uniform(0.0, 2.0, (geom.n_cells, grid.count)))
    ib = np.ascontiguousarray(rng.uniform(0.0, 1.0, (geom.n_cells, grid.count)))
    g_out = rng.normal(size=(len(ptr) - 1, grid.count))
    mix = (T, X, table.values, table.derivs, table.T_min, table.T_step)
    rte = (kappa, ib, ptr, cells, lengths)
    return {
        "traverse_batch": lambda m: m.traverse_batch(*trav),
        "rte_forward": lambda m: m.rte_forward(*rte),
        "rte_backward": lambda m: m.rte_backward(g_out, *rte),
        "mix_forward": lambda m: m.mix_forward(*mix),
        "mix_backward": lambda m: m.mix_backward(kappa, *mix),
    }, len(ptr) - 1, grid.count


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--pixels", type=int, default=16)
    ap.add_argument("--dims", type=int, default=16)
    ap.add_argument("--lbl-step", type=float, default=0.1)
    args = ap.parse_args(argv)
    cases, n_rays, n_lbl = workload(args.dims, args.pixels, args.lbl_step)
    print(f"{args.dims}^3 cells, {n_rays} rays, {n_lbl} line-by-line points, best of {args.repeat}")
    print(f"{'kernel':16s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:16s} {t_py:12.2f} {'n/a':>14s} {'n/a':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:16s} {t_py:12.2f} {t_c:14.2f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
