"""Experiment orchestration: noise-rate sweeps, sensitivity, small-loss probe, boundary grids."""

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from csidn import datagen, nn, trainers
from csidn.errors import ConfigError, UnsupportedDimensionError

log = logging.getLogger(__name__)

FIG4_RHOS = (0.25, 0.35, 0.45, 0.50)
SENSITIVITY_SIGMAS = (0.0, 0.3, 0.6)
ALL_METHODS = ("ilfc", "fc", "mae", "lq", "coteaching")


@dataclass
class ExperimentConfig:
    circles: datagen.CirclesSpec = field(default_factory=datagen.CirclesSpec)
    noise: datagen.NoiseSpec = field(default_factory=lambda: datagen.NoiseSpec("csidn"))
    rhos: tuple = FIG4_RHOS
    methods: tuple = ALL_METHODS
    seeds: tuple = (0, 1, 2, 3, 4)
    train: trainers.TrainConfig = field(default_factory=trainers.TrainConfig)
    sigmas: tuple = SENSITIVITY_SIGMAS
    probe_epochs: int = 10
    probe_keep: float = 0.5
    grid_bounds: tuple = (-4.0, 4.0, -4.0, 4.0)
    grid_resolution: int = 200
    output_dir: str = "out"
    workers: int = 1

    def __post_init__(self):
        self.rhos = tuple(float(v) for v in self.rhos)
        self.seeds = tuple(int(v) for v in self.seeds)
        self.sigmas = tuple(float(v) for v in self.sigmas)
        self.methods = tuple(self.methods)
        if not self.seeds:
            raise ConfigError("at least one seed is required", "experiment.seeds")
        if any(not 0.0 <= v <= 1.0 for v in self.rhos):
            raise ConfigError("rho values must lie in [0, 1]", "experiment.rhos")
        if any(v < 0 for v in self.sigmas):
            raise ConfigError("sigma values must be >= 0", "experiment.sigmas")
        bad = [m for m in self.methods if m not in trainers.METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}", "experiment.methods")
        if self.workers < 1:
            raise ConfigError("must be >= 1", "experiment.workers")


def _fmt(v):
    return f"{v:.6g}"


def cell_name(method, rho, seed):
    return f"{method}_{rho:g}_{seed}"


def make_data(exp, rho, seed):
    """Train split (corrupted at ``rho``) and clean test split for one seed."""
    circles = replace(exp.circles, seed=seed)
    noise = replace(exp.noise, rho=rho, seed=seed)
    train = datagen.corrupt_circles(datagen.gen_circles(circles), circles, noise)
    return train, datagen.gen_circles_test(circles)


def _context(exp, rho, seed):
    circles = replace(exp.circles, seed=seed)
    noise = replace(exp.noise, rho=rho, seed=seed)
    return {
        "circles": {"radii": list(circles.radii), "sigma_r": circles.sigma_r,
                    "n_per_class": circles.n_per_class, "seed": circles.seed},
        "noise": {"kind": noise.kind, "rho": noise.rho, "w": list(noise.w),
                  "confidence_mode": noise.confidence_mode, "seed": noise.seed},
    }


def run_cell(exp, method, rho, seed, sigma=None):
    train, test = make_data(exp, rho, seed)
    context = _context(exp, rho, seed)
    if sigma is not None:
        train = datagen.with_confidence(train, datagen.perturb_confidence(train.r, sigma, seed))
        context["sigma"] = sigma
    cfg = replace(exp.train, method=method, seed=seed)
    return trainers.train(train, cfg, test, context)


def _cell_job(args):
    exp, method, rho, seed, sigma = args
    try:
        res = run_cell(exp, method, rho, seed, sigma)
        res.model = res.peer = None
        return args[1:], res, None
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.exception("cell %s failed", cell_name(method, rho, seed))
        return args[1:], None, f"{type(exc).__name__}: {exc}"


def _run_jobs(jobs, workers):
    if workers <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_job, jobs))


def mean_ci(values, level=0.95):
    """Mean and Student-t interval; a single value gives a zero-width interval."""
    a = np.asarray(values, dtype=np.float64)
    m = float(a.mean())
    if a.size < 2:
        return m, m, m
    half = float(stats.t.ppf(0.5 + level / 2, a.size - 1) * a.std(ddof=1) / np.sqrt(a.size))
    return m, m - half, m + half


@dataclass
class SweepReport:
    results: dict = field(default_factory=dict)  # (method, rho, seed) -> RunResult
    failures: dict = field(default_factory=dict)

    def curves(self):
        """Rows ``(epoch, method, rho, mean_acc, ci_lo, ci_hi)`` over completed runs."""
        return aggregate_curves(self.results)

    def accuracies(self, method, rho):
        return [r.test_acc for (m, p, _), r in sorted(self.results.items()) if m == method and p == rho]

    def final_mean(self, method, rho):
        return float(np.mean([a[-1] for a in self.accuracies(method, rho)]))

    def last_k_mean(self, method, rho, k=10):
        return float(np.mean([np.mean(a[-k:]) for a in self.accuracies(method, rho)]))


def aggregate_curves(results):
    groups = {}
    for (method, rho, seed), res in sorted(results.items()):
        groups.setdefault((method, rho), []).append(res.test_acc)
    rows = []
    for (method, rho), series in sorted(groups.items()):
        n_epochs = min(len(s) for s in series)
        for e in range(n_epochs):
            m, lo, hi = mean_ci([s[e] for s in series])
            rows.append((e + 1, method, rho, m, lo, hi))
    return rows


def curves_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "method", "rho", "mean_acc", "ci_lo", "ci_hi"])
    for epoch, method, rho, m, lo, hi in rows:
        w.writerow([epoch, method, _fmt(rho), _fmt(m), _fmt(lo), _fmt(hi)])
    return buf.getvalue()


def write_cell(res, out_dir, method, rho, seed):
    cells = os.path.join(out_dir, "cells")
    os.makedirs(cells, exist_ok=True)
    path = os.path.join(cells, cell_name(method, rho, seed) + ".json")
    persist_run(res, path)
    return path


def persist_run(res, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(res.to_dict(), fh, indent=1, sort_keys=True)


def load_run(path):
    with open(path, encoding="utf-8") as fh:
        return trainers.RunResult.from_dict(json.load(fh))


def load_cells(out_dir):
    """Reload persisted cells, keyed like :attr:`SweepReport.results`."""
    cells = os.path.join(out_dir, "cells")
    out = {}
    for name in sorted(os.listdir(cells)):
        if not name.endswith(".json"):
            continue
        res = load_run(os.path.join(cells, name))
        cfg = res.config
        out[(res.method, float(cfg["noise"]["rho"]), int(cfg["train"]["seed"]))] = res
    return out


def run_sweep(exp, out_dir=None, workers=None):
    """Every (method, rho, seed) cell; writes cells/*.json and curves.csv when ``out_dir`` is set."""
    jobs = [(exp, m, rho, s, None) for m in exp.methods for rho in exp.rhos for s in exp.seeds]
    report = SweepReport()
    for (method, rho, seed, _), res, err in _run_jobs(jobs, workers or exp.workers):
        if err is not None:
            report.failures[(method, rho, seed)] = err
            continue
        report.results[(method, rho, seed)] = res
        if out_dir:
            write_cell(res, out_dir, method, rho, seed)
    if out_dir:
        with open(os.path.join(out_dir, "curves.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(curves_csv(report.curves()))
        if report.failures:
            with open(os.path.join(out_dir, "failures.json"), "w", encoding="utf-8") as fh:
                json.dump({cell_name(*k): v for k, v in sorted(report.failures.items())}, fh, indent=1)
    return report


# ----------------------------------------------------------------- sensitivity


@dataclass
class SensitivityReport:
    results: dict = field(default_factory=dict)  # (rho, sigma, seed) -> RunResult
    failures: dict = field(default_factory=dict)

    def final_mean(self, rho, sigma):
        return float(np.mean([r.test_acc[-1] for (p, s, _), r in self.results.items()
                              if p == rho and s == sigma]))

    def rows(self):
        """``(rho, sigma, mean_final_acc, ci_lo, ci_hi, delta_vs_sigma0)``."""
        out = []
        keys = sorted({(p, s) for p, s, _ in self.results})
        for rho, sigma in keys:
            finals = [r.test_acc[-1] for (p, s, _), r in sorted(self.results.items()) if (p, s) == (rho, sigma)]
            m, lo, hi = mean_ci(finals)
            base = self.final_mean(rho, 0.0) if (rho, 0.0) in keys else float("nan")
            out.append((rho, sigma, m, lo, hi, m - base))
        return out


def sensitivity_sweep(exp, out_dir=None, workers=None):
    """ILFC with each confidence score perturbed by N(0, sigma^2), clipped to [0, 1]."""
    jobs = [(exp, "ilfc", rho, s, sig) for rho in exp.rhos for sig in exp.sigmas for s in exp.seeds]
    report = SensitivityReport()
    for (_, rho, seed, sigma), res, err in _run_jobs(jobs, workers or exp.workers):
        if err is not None:
            report.failures[(rho, sigma, seed)] = err
        else:
            report.results[(rho, sigma, seed)] = res
    if out_dir:
        os.makedirs(os.path.join(out_dir, "cells"), exist_ok=True)
        for (rho, sigma, seed), res in sorted(report.results.items()):
            persist_run(res, os.path.join(out_dir, "cells", f"ilfc-sigma{sigma:g}_{rho:g}_{seed}.json"))
        with open(os.path.join(out_dir, "sensitivity.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rho", "sigma", "mean_final_acc", "ci_lo", "ci_hi", "delta_vs_sigma0"])
            for row in report.rows():
                w.writerow([_fmt(v) for v in row])
    return report


# ---------------------------------------------------------------------- probe


@dataclass
class ProbeReport:
    population_cos: float
    selected_cos: float
    selected: np.ndarray
    n: int
    upper_fraction_population: float
    upper_fraction_selected: float
    noise_rate: float

    @property
    def shift(self):
        return self.selected_cos - self.population_cos

    def summary(self):
        return {
            "n": self.n,
            "selected": int(self.selected.size),
            "population_mean_cos": self.population_cos,
            "selected_mean_cos": self.selected_cos,
            "shift": self.shift,
            "upper_fraction_population": self.upper_fraction_population,
            "upper_fraction_selected": self.upper_fraction_selected,
            "noise_rate": self.noise_rate,
        }


def cosine_to(x, w):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    xn = np.linalg.norm(x, axis=1)
    return np.divide(x @ w, xn * np.linalg.norm(w), out=np.zeros(x.shape[0]), where=xn > 0)


def small_loss_probe(data, w, cfg, epochs=10, keep=0.5, out_dir=None):
    """Train with a decreasing small-loss keep rate and inspect the selected set.

    After ``epochs`` epochs, the ``ceil(keep * n)`` smallest-loss samples are
    taken; their mean cosine toward ``w`` is compared with the population's.
    """
    cfg = replace(cfg, epochs=epochs, ramp_epochs=epochs)
    res = trainers.train_small_loss(data, cfg, forget_rate=1.0 - keep)
    sel = trainers.small_loss_set(res.model, data, keep)
    cos = cosine_to(data.x, w)
    report = ProbeReport(
        population_cos=float(cos.mean()),
        selected_cos=float(cos[sel].mean()),
        selected=sel,
        n=len(data),
        upper_fraction_population=float(np.mean(cos > 0)),
        upper_fraction_selected=float(np.mean(cos[sel] > 0)),
        noise_rate=datagen.noise_rate(data),
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "probe.csv"), "w", encoding="utf-8", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([f"x{i}" for i in range(data.dim)] + ["y_clean", "y_noisy", "cos"])
            for i in sel:
                yc = "" if data.y_clean is None else int(data.y_clean[i])
                wr.writerow([_fmt(v) for v in data.x[i]] + [yc, int(data.y_noisy[i]), _fmt(cos[i])])
        with open(os.path.join(out_dir, "probe_summary.json"), "w", encoding="utf-8") as fh:
            json.dump(report.summary(), fh, indent=1, sort_keys=True)
    return report


# ----------------------------------------------------------------------- grid


def boundary_grid(model, bounds=(-4.0, 4.0, -4.0, 4.0), resolution=200):
    """Rows ``(x0, x1, argmax, p_0..p_{K-1})`` over a uniform grid, x1 varying fastest."""
    if model.input_dim != 2:
        raise UnsupportedDimensionError(f"boundary grids need a 2-D input model, got {model.input_dim}-D")
    x0 = np.linspace(bounds[0], bounds[1], resolution)
    x1 = np.linspace(bounds[2], bounds[3], resolution)
    g0, g1 = np.meshgrid(x0, x1, indexing="ij")
    pts = np.column_stack([g0.ravel(), g1.ravel()])
    probs = model.forward(pts)
    return np.column_stack([pts, probs.argmax(axis=1), probs])


def write_grid(grid, path):
    K = grid.shape[1] - 3
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x0", "x1", "argmax"] + [f"p_{k}" for k in range(K)])
        for row in grid:
            w.writerow([_fmt(row[0]), _fmt(row[1]), int(row[2])] + [_fmt(v) for v in row[3:]])


def bayes_agreement(grid, circles, region=None):
    """Fraction of grid points (optionally masked by ``region(points)``) whose argmax matches the Bayes class.

    Points outside the data support (beyond the outer radius plus 3 sigma) are ignored.
    """
    pts = grid[:, :2]
    bayes = datagen.circles_posterior(pts, circles).argmax(axis=1)
    mask = np.linalg.norm(pts, axis=1) <= circles.radii[-1] + 3 * circles.sigma_r
    if region is not None:
        mask &= region(pts)
    return float(np.mean(grid[mask, 2].astype(int) == bayes[mask]))


# ------------------------------------------------------------ pseudo-labelling


def pipeline_experiment(pcfg, circles=None):
    """Emulate automatic annotation on a feature dataset.

    Splits the clean source into disjoint clean/validation/pool/holdout sets,
    runs :func:`datagen.pseudo_label_pipeline`, and scores calibration on the
    holdout at the selected temperature and at t = 1.
    Returns ``(labelled pool, summary dict)``.
    """
    if pcfg.dataset == "digits":
        source = datagen.load_digits_dataset()
    else:
        circles = circles or datagen.CirclesSpec()
        source = datagen.gen_circles(replace(circles, seed=pcfg.seed))
    sizes = [pcfg.clean_size, pcfg.valid_size, pcfg.pool_size, pcfg.holdout_size]
    clean, valid, pool, holdout = datagen.split(source, sizes, pcfg.seed, balanced_first=True)
    labelled, report, model = datagen.pseudo_label_pipeline(
        clean, valid, pool, hidden=pcfg.hidden, epochs=pcfg.epochs, batch_size=pcfg.batch_size,
        lr=pcfg.lr, momentum=pcfg.momentum, seed=pcfg.seed, temperature=pcfg.temperature,
    )
    summary = {
        "dataset": pcfg.dataset,
        "temperature": report.temperature,
        "valid_ece_t1": report.ece_uncalibrated,
        "valid_ece_selected": report.ece_calibrated,
        "pool_noise_rate": report.noise_rate,
        "pool_mean_confidence": float(labelled.r.mean()) if len(labelled) else None,
    }
    if len(holdout):
        logits = model.logits(holdout.x)
        summary["holdout_ece_t1"] = nn.expected_calibration_error(nn.softmax(logits), holdout.y_noisy)
        summary["holdout_ece_selected"] = nn.expected_calibration_error(
            nn.temperature_scale(logits, report.temperature), holdout.y_noisy)
    return labelled, summary
