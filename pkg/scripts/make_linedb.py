"""Generate the bundled miniature line list (650-725 cm^-1).

The lines are synthetic but follow the usual band structure: a CO2 nu2
fundamental with P/Q/R branches plus its first hot band, scattered H2O
rotational lines with a wide spread of lower-state energies, and a handful
of weak CH4 lines. Run once; the output is committed.

    python scripts/make_linedb.py src/flametomo/data/minilines.linedb
"""

import sys

import numpy as np

C2 = 1.438776877  # cm K
T_REF = 296.0


def co2_band(nu0, b_rot, e_vib, total, j_max, hw, n):
    rows = []
    js = np.arange(0, j_max + 1, 2)
    for j in js:
        e_rot = b_rot * j * (j + 1)
        boltz = (2 * j + 1) * np.exp(-C2 * e_rot / T_REF)
        if j >= 1:
            # P(J): J -> J-1
            rows.append((nu0 - 2 * b_rot * j, 0.5 * boltz, e_vib + e_rot))
            # Q(J)
            rows.append((nu0 - 4.0e-4 * j * (j + 1), 0.5 * boltz, e_vib + e_rot))
        rows.append((nu0 + 2 * b_rot * (j + 1), 0.5 * boltz, e_vib + e_rot))
    rows = np.array(rows)
    rows[:, 1] *= total / rows[:, 1].sum()
    keep = (rows[:, 0] >= 646.0) & (rows[:, 0] <= 729.0) & (rows[:, 1] > total * 2e-4)
    rng = np.random.default_rng(7)
    out = []
    for center, s, e in rows[keep]:
        out.append(("CO2", center, s, e, hw * (1 + 0.1 * rng.uniform(-1, 1)), n))
    return out


def random_lines(species, count, total, e_range, hw_range, n, seed):
    rng = np.random.default_rng(seed)
    centers = np.sort(rng.uniform(650.5, 724.5, count))
    raw = np.exp(rng.uniform(np.log(0.05), np.log(1.0), count))
    strengths = raw * total / raw.sum()
    energies = rng.uniform(*e_range, count)
    hws = rng.uniform(*hw_range, count)
    return [(species, c, s, e, h, n) for c, s, e, h in zip(centers, strengths, energies, hws)]


def main(path):
    lines = []
    lines += co2_band(667.38, 0.3902, 0.0, 150.0, 80, 0.075, 1.2)
    lines += co2_band(720.80, 0.3906, 667.38, 12.0, 70, 0.075, 1.2)
    lines += random_lines("H2O", 40, 2.0, (100.0, 1200.0), (0.05, 0.10), 0.9, 11)
    lines += random_lines("CH4", 20, 0.5, (0.0, 600.0), (0.055, 0.065), 0.75, 13)
    lines.sort(key=lambda r: r[1])
    with open(path, "w") as fh:
        fh.write("# Synthetic mini line list for the 650-725 cm^-1 window.\n")
        fh.write("# species center[cm-1] S_ref[cm-2 atm-1] E_lower[cm-1] gamma_ref[cm-1] n_T\n")
        fh.write(f"LINEDB v1 T_ref={T_REF:g} P=1\n")
        for sp, c, s, e, h, n in lines:
            fh.write(f"{sp} {c:.5f} {s:.6e} {e:.4f} {h:.5f} {n:.3f}\n")
    print(f"wrote {len(lines)} lines to {path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "minilines.linedb")
