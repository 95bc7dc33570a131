import csv
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csidn import datagen, harness, nn, trainers
from csidn.errors import UnsupportedDimensionError


def _small_exp(**kw):
    base = dict(
        circles=datagen.CirclesSpec(n_per_class=60),
        train=trainers.TrainConfig(epochs=3, anchors=5),
        rhos=(0.3,), methods=("ilfc", "mae"), seeds=(0, 1),
    )
    base.update(kw)
    return harness.ExperimentConfig(**base)


# ------------------------------------------------------------------ sweep


def test_sweep_bookkeeping(tmp_path):
    exp = _small_exp(methods=("lq",), seeds=(0, 1, 2, 3, 4))
    report = harness.run_sweep(exp, tmp_path)
    assert len(report.results) == 5 and not report.failures
    rows = report.curves()
    assert [r[0] for r in rows] == [1, 2, 3]
    assert sorted(os.listdir(tmp_path / "cells")) == [f"lq_0.3_{s}.json" for s in range(5)]
    with open(tmp_path / "curves.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["epoch", "method", "rho", "mean_acc", "ci_lo", "ci_hi"]


def test_curves_recompute_from_cells(tmp_path):
    harness.run_sweep(_small_exp(), tmp_path)
    again = harness.curves_csv(harness.aggregate_curves(harness.load_cells(tmp_path)))
    assert again == (tmp_path / "curves.csv").read_text()


def test_parallel_equals_serial(tmp_path):
    serial = harness.run_sweep(_small_exp(), tmp_path / "a", workers=1)
    parallel = harness.run_sweep(_small_exp(), tmp_path / "b", workers=2)
    assert (tmp_path / "a" / "curves.csv").read_bytes() == (tmp_path / "b" / "curves.csv").read_bytes()
    for key, res in serial.results.items():
        assert parallel.results[key].test_acc == res.test_acc


def test_cell_order_does_not_matter():
    exp = _small_exp()
    a = harness.run_cell(exp, "mae", 0.3, 1)
    harness.run_cell(exp, "ilfc", 0.3, 0)
    b = harness.run_cell(exp, "mae", 0.3, 1)
    assert a.test_acc == b.test_acc and a.config_hash == b.config_hash


def test_failed_cells_are_recorded(tmp_path, monkeypatch):
    def boom(*args, **kw):
        raise RuntimeError("no")

    monkeypatch.setattr(trainers, "train", boom)
    report = harness.run_sweep(_small_exp(methods=("mae",), seeds=(0,)), tmp_path)
    assert report.failures and (tmp_path / "failures.json").exists()


def test_corruption_differs_per_seed():
    exp = _small_exp()
    a, _ = harness.make_data(exp, 0.4, 0)
    b, _ = harness.make_data(exp, 0.4, 1)
    assert not np.array_equal(a.y_noisy, b.y_noisy)


def test_persist_load_round_trip(tmp_path):
    res = harness.run_cell(_small_exp(), "mae", 0.3, 0)
    harness.persist_run(res, tmp_path / "r.json")
    back = harness.load_run(tmp_path / "r.json")
    assert back.to_dict() == res.to_dict() and back.verify()


# -------------------------------------------------------------- intervals


def test_single_seed_interval_is_degenerate():
    assert harness.mean_ci([0.7]) == (0.7, 0.7, 0.7)


def test_interval_matches_t_table():
    m, lo, hi = harness.mean_ci([1.0, 2.0, 3.0])
    # t_{0.975, 2} = 4.302653, sd = 1, n = 3
    assert m == 2.0 and hi - m == pytest.approx(4.302653 / np.sqrt(3), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(0.01, 10))
def test_interval_shrinks_with_seeds(n, sd):
    def width(k):
        # fixed sample variance: +-a pattern scaled to standard deviation sd
        base = np.tile([-1.0, 1.0], k)[:k]
        if k % 2:
            base = np.append(base[:-1], 0.0)
        base = base / base.std(ddof=1) * sd
        _, lo, hi = harness.mean_ci(base)
        return hi - lo

    assert width(n + 1) <= width(n) + 1e-12


# -------------------------------------------------------------- sensitivity


def test_zero_sigma_is_unperturbed():
    exp = _small_exp()
    a = harness.run_cell(exp, "ilfc", 0.3, 0)
    b = harness.run_cell(exp, "ilfc", 0.3, 0, sigma=0.0)
    assert a.test_acc == b.test_acc and a.train_loss == b.train_loss


def test_sensitivity_outputs(tmp_path):
    exp = _small_exp(sigmas=(0.0, 0.6), seeds=(0,))
    report = harness.sensitivity_sweep(exp, tmp_path)
    rows = report.rows()
    assert [(r[0], r[1]) for r in rows] == [(0.3, 0.0), (0.3, 0.6)]
    assert rows[0][5] == 0.0
    assert (tmp_path / "sensitivity.csv").exists()


# -------------------------------------------------------------------- probe


def _probe_data(kind, rho, seed=0):
    spec = datagen.CirclesSpec(seed=seed)
    return datagen.corrupt_circles(datagen.gen_circles(spec), spec, datagen.NoiseSpec(kind, rho=rho, seed=seed))


def test_probe_set_size_and_files(tmp_path):
    data = _probe_data("idn", 1.0).take(np.arange(0, 3000, 3))
    rep = harness.small_loss_probe(data, (0, 1), trainers.TrainConfig(), epochs=2, out_dir=tmp_path)
    assert rep.selected.size == int(np.ceil(0.5 * len(data)))
    with open(tmp_path / "probe.csv") as fh:
        assert sum(1 for _ in fh) == rep.selected.size + 1
    assert (tmp_path / "probe_summary.json").exists()


def test_probe_without_noise_is_unbiased():
    rep = harness.small_loss_probe(_probe_data("clean", 0.0), (0, 1), trainers.TrainConfig(), epochs=10)
    assert abs(rep.shift) <= 0.05


def test_probe_with_directional_noise_is_biased():
    rep = harness.small_loss_probe(_probe_data("idn", 1.0), (0, 1), trainers.TrainConfig(), epochs=10)
    assert rep.selected_cos < rep.population_cos - 0.15


# --------------------------------------------------------------------- grid


def test_grid_row_count(tmp_path):
    grid = harness.boundary_grid(nn.init_mlp([2, 4, 3], 0), (-4, 4, -4, 4), 200)
    assert grid.shape == (40000, 6)
    harness.write_grid(grid, tmp_path / "g.csv")
    with open(tmp_path / "g.csv") as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 40001 and lines[0] == "x0,x1,argmax,p_0,p_1,p_2"


def test_constant_model_gives_one_class():
    m = nn.MLPModel([nn.Layer(np.zeros((2, 3)), np.array([0.0, 2.0, 0.0]), "identity")])
    grid = harness.boundary_grid(m, resolution=30)
    assert set(grid[:, 2].astype(int)) == {1}


def test_grid_needs_two_inputs():
    with pytest.raises(UnsupportedDimensionError):
        harness.boundary_grid(nn.init_mlp([3, 3], 0))


def test_ilfc_regions_beat_lq_in_noisy_half():
    spec = datagen.CirclesSpec()
    data = datagen.corrupt_circles(datagen.gen_circles(spec), spec, datagen.NoiseSpec(rho=0.5))
    scores = {}
    for method in ("ilfc", "lq"):
        model = trainers.train(data, trainers.TrainConfig(method)).model
        scores[method] = harness.bayes_agreement(harness.boundary_grid(model), spec, lambda p: p[:, 1] > 0)
    assert scores["ilfc"] > scores["lq"]


def test_bayes_agreement_of_the_bayes_rule():
    spec = datagen.CirclesSpec()
    grid = harness.boundary_grid(nn.init_mlp([2, 3], 0), resolution=50)
    grid[:, 2] = datagen.circles_posterior(grid[:, :2], spec).argmax(axis=1)
    assert harness.bayes_agreement(grid, spec) == 1.0


# ------------------------------------------------------------------ pipeline


def test_pipeline_experiment_summary():
    from csidn.config import PipelineConfig

    pool, summary = harness.pipeline_experiment(PipelineConfig(epochs=5, hidden=(16,)))
    assert len(pool) == 1000 and pool.r is not None
    assert summary["valid_ece_selected"] <= summary["valid_ece_t1"]
    assert {"holdout_ece_t1", "holdout_ece_selected", "pool_noise_rate"} <= set(summary)
