import hashlib
import json

import numpy as np


from gridcomp.cli import main
from gridcomp.io_formats import read_samples


def write_cfg(tmp_path, body, name="run.cfg"):
    path = tmp_path / name
    path.write_text(body)
    return str(path)


SIM_CFG = """
nx = 6
ny = 6
model = car
seed = 4
sim_taxa = oak,pine
sim_sigma = 0.8
sim_trees_per_cell = 40
sim_truth_draws = 2000
"""

FIT_KEYS = """
n_iter = 40
burn_in = 20
n_retained = 10
t_mc = 200
"""


def test_validate_config_ok(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "nx = 3\nny = 3\n")
    assert main(["validate-config", "--config", cfg]) == 0
    assert "config ok" in capsys.readouterr().out


def test_validate_config_bad_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "nx = 3\n")  # missing ny
    assert main(["validate-config", "--config", cfg]) == 2


def test_unknown_override_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "nx = 3\nny = 3\n")
    assert main(["validate-config", "--config", cfg, "--set", "bogus=1"]) == 2


def test_simulate_outputs(tmp_path):
    cfg = write_cfg(tmp_path, SIM_CFG)
    out = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    counts = (out / "counts.csv").read_text().splitlines()
    assert counts[0] == "cell_x,cell_y,oak,pine"
    assert len(counts) == 1 + 36
    # truth rows sum to one per cell
    truth_lines = (out / "truth.csv").read_text().splitlines()[1:]
    sums = {}
    for line in truth_lines:
        x, y, taxon, val = line.split(",")
        sums[(x, y)] = sums.get((x, y), 0.0) + float(val)
    assert all(abs(s - 1.0) < 1e-9 for s in sums.values())
    # empirical global proportion is near 1/2 for symmetric taxa
    tot = np.zeros(2)
    for line in counts[1:]:
        parts = line.split(",")
        tot += [int(parts[2]), int(parts[3])]
    frac = tot[0] / tot.sum()
    assert 0.3 < frac < 0.7
    assert (out / "run_config.txt").exists()


def test_simulate_tiny_sigma_flat_surface(tmp_path):
    cfg = write_cfg(tmp_path, SIM_CFG.replace("sim_sigma = 0.8", "sim_sigma = 0.0001"))
    out = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    truth_lines = (out / "truth.csv").read_text().splitlines()[1:]
    vals = [float(l.split(",")[3]) for l in truth_lines if l.split(",")[2] == "oak"]
    assert np.ptp(vals) < 0.05  # near-constant composition surface


def fit_dir(tmp_path, seed=4, name="fit1", extra=""):
    cfg = write_cfg(
        tmp_path,
        SIM_CFG + FIT_KEYS + f"counts_file = sim/counts.csv\nseed = {seed}\n" + extra,
        name=f"{name}.cfg",
    )
    out = tmp_path / name
    rc = main(["fit", "--config", cfg, "--out", str(out)])
    return rc, out


def test_fit_and_outputs(tmp_path):
    sim_cfg = write_cfg(tmp_path, SIM_CFG)
    assert main(["simulate", "--config", sim_cfg, "--out", str(tmp_path / "sim")]) == 0
    rc, out = fit_dir(tmp_path)
    assert rc == 0
    archive = read_samples(out / "samples.gcsa")
    assert archive.theta.shape == (10, 36, 2)
    diag = json.loads((out / "diagnostics.json").read_text())
    assert "acceptance" in diag
    assert (out / "progress.jsonl").exists()
    first = json.loads((out / "progress.jsonl").read_text().splitlines()[0])
    assert "iter" in first and "sigma2" in first


def test_fit_determinism_checksums(tmp_path):
    sim_cfg = write_cfg(tmp_path, SIM_CFG)
    main(["simulate", "--config", sim_cfg, "--out", str(tmp_path / "sim")])
    _, out1 = fit_dir(tmp_path, name="fit1")
    _, out2 = fit_dir(tmp_path, name="fit2")
    h1 = hashlib.sha256((out1 / "samples.gcsa").read_bytes()).hexdigest()
    h2 = hashlib.sha256((out2 / "samples.gcsa").read_bytes()).hexdigest()
    assert h1 == h2


def test_fit_empty_data_spde_prior_only(tmp_path):
    counts = tmp_path / "empty.csv"
    counts.write_text("cell_x,cell_y,oak,pine\n")
    cfg = write_cfg(
        tmp_path,
        "nx = 3\nny = 3\nbuffer = 1\nmodel = spde\n" + FIT_KEYS + "counts_file = empty.csv\n",
    )
    out = tmp_path / "prior"
    assert main(["fit", "--config", cfg, "--out", str(out)]) == 0
    archive = read_samples(out / "samples.gcsa")
    assert np.all(np.isfinite(archive.theta))


def test_fit_empty_data_car_numerical_exit(tmp_path):
    counts = tmp_path / "empty.csv"
    counts.write_text("cell_x,cell_y,oak,pine\n")
    cfg = write_cfg(
        tmp_path, "nx = 3\nny = 3\nmodel = car\n" + FIT_KEYS + "counts_file = empty.csv\n"
    )
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "x")]) == 4


def test_summarize_and_score(tmp_path):
    sim_cfg = write_cfg(tmp_path, SIM_CFG)
    main(["simulate", "--config", sim_cfg, "--out", str(tmp_path / "sim")])
    _, fit_out = fit_dir(tmp_path)
    summ = tmp_path / "summ"
    assert main(["summarize", "--archive", str(fit_out / "samples.gcsa"), "--out", str(summ)]) == 0
    lines = (summ / "summary.csv").read_text().splitlines()
    assert len(lines) == 1 + 36 * 2
    assert (summ / "mean.raster.txt").exists()

    score_out = tmp_path / "score"
    rc = main(
        [
            "score",
            "--archive",
            str(fit_out / "samples.gcsa"),
            "--counts",
            str(tmp_path / "sim" / "counts.csv"),
            "--min-trees",
            "30",
            "--out",
            str(score_out),
        ]
    )
    assert rc == 0
    report = (score_out / "score_report.csv").read_text().splitlines()
    assert report[0] == "model,metric,variant,value"
    vals = [float(r.split(",")[-1]) for r in report[1:]]
    assert all(np.isfinite(v) for v in vals)


def test_score_data_error_exit(tmp_path):
    sim_cfg = write_cfg(tmp_path, SIM_CFG)
    main(["simulate", "--config", sim_cfg, "--out", str(tmp_path / "sim")])
    _, fit_out = fit_dir(tmp_path)
    bad = tmp_path / "bad.csv"
    bad.write_text("cell_x,cell_y,oak,pine\n0,0,-2,1\n")
    rc = main(
        [
            "score",
            "--archive",
            str(fit_out / "samples.gcsa"),
            "--counts",
            str(bad),
            "--out",
            str(tmp_path / "s"),
        ]
    )
    assert rc == 3


def test_holdout_smoke(tmp_path):
    sim_cfg = write_cfg(tmp_path, SIM_CFG)
    main(["simulate", "--config", sim_cfg, "--out", str(tmp_path / "sim")])
    cfg = write_cfg(
        tmp_path,
        SIM_CFG
        + FIT_KEYS
        + "counts_file = sim/counts.csv\n"
        + "buffer = 1\nholdout_kind = per_tree\nholdout_fraction = 0.5\nholdout_min_trees = 10\n",
        name="holdout.cfg",
    )
    out = tmp_path / "holdout"
    assert main(["holdout", "--config", cfg, "--out", str(out)]) == 0
    text = (out / "holdout_report.txt").read_text()
    assert "brier" in text and "P(car<spde)" in text
    rows = (out / "holdout_report.csv").read_text().splitlines()[1:]
    assert any("p_first_lower" in r for r in rows)
    vals = [float(r.split(",")[-1]) for r in rows]
    assert all(np.isfinite(v) for v in vals)


def test_simulate_townships(tmp_path):
    cfg = write_cfg(tmp_path, SIM_CFG + "sim_township_block = 3\n")
    out = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    trees = (out / "trees.csv").read_text().splitlines()
    overlaps = (out / "overlaps.csv").read_text().splitlines()
    assert trees[0] == "township_id,taxon"
    assert overlaps[0] == "township_id,cell_x,cell_y,area"
    # 6x6 grid tiled into 3x3 blocks -> 4 townships of 9 cells each
    town_ids = {line.split(",")[0] for line in overlaps[1:]}
    assert len(town_ids) == 4
    assert len(overlaps) - 1 == 36
    # the simulated township files are re-readable as a dataset
    fit_cfg = write_cfg(
        tmp_path,
        SIM_CFG
        + FIT_KEYS
        + "counts_file = sim/counts.csv\ntrees_file = sim/trees.csv\n"
        + "overlaps_file = sim/overlaps.csv\n",
        name="townfit.cfg",
    )
    fit_out = tmp_path / "townfit"
    assert main(["fit", "--config", fit_cfg, "--out", str(fit_out)]) == 0
    archive = read_samples(fit_out / "samples.gcsa")
    assert np.all(np.isfinite(archive.theta))
