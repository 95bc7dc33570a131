"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace

from csidn import config as cfgmod
from csidn import datagen, harness, nn, trainers
from csidn.errors import ConfigError, CSIDNError, ParseError, SchemaError

SUBCOMMANDS = ("generate", "corrupt", "pseudo-label", "train", "sweep", "sensitivity", "probe", "grid")
OUTPUT_ROOT_ENV = "CSIDN_OUTPUT_ROOT"

log = logging.getLogger("csidn")


@dataclass
class CliCommand:
    subcommand: str
    config: str = None
    overrides: list = field(default_factory=list)
    output: str = None
    seed: int = None
    input: str = None
    test: str = None
    model: str = None
    workers: int = None
    verbose: bool = False


def _parser():
    epilog = "configuration keys (set in the TOML file or as section.key=value overrides):\n\n"
    epilog += cfgmod.config_reference()
    p = argparse.ArgumentParser(
        prog="csidn",
        description="Label-noise experiments with confidence-scored instance-dependent noise.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", required=True)
    helps = {
        "generate": "write clean circles train/test CSVs",
        "corrupt": "corrupt labels of a clean CSV (or generated circles)",
        "pseudo-label": "label a pool with a calibrated classifier fit on a small clean subset",
        "train": "train one method and persist the run",
        "sweep": "multi-seed noise-rate sweep over methods",
        "sensitivity": "ILFC with Gaussian-perturbed confidence scores",
        "probe": "small-loss selection bias probe",
        "grid": "decision-boundary grid of a trained 2-D model",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        sp.add_argument("--config", "-c", help="TOML config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="run seed applied to every seeded section")
        sp.add_argument("--out", "-o", dest="output", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<subcommand>)")
        sp.add_argument("--verbose", "-v", action="store_true")
        if name in ("corrupt", "train", "probe"):
            sp.add_argument("--input", "-i", help="input dataset CSV")
        if name == "train":
            sp.add_argument("--test", help="test dataset CSV (clean labels scored)")
        if name == "grid":
            sp.add_argument("--model", help="model checkpoint JSON; trains from the config when omitted")
        if name in ("sweep", "sensitivity"):
            sp.add_argument("--workers", type=int, help="parallel worker processes")
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides, e.g. noise.rho=0.45")
    return p


def parse_cli(argv):
    """Parse ``argv`` into a :class:`CliCommand`; usage errors exit with status 2."""
    ns = _parser().parse_args(argv)
    for item in ns.overrides:
        if "=" not in item:
            _parser().error(f"override {item!r} is not KEY=VALUE")
    return CliCommand(
        subcommand=ns.subcommand, config=ns.config, overrides=list(ns.overrides), output=ns.output,
        seed=ns.seed, input=getattr(ns, "input", None), test=getattr(ns, "test", None),
        model=getattr(ns, "model", None), workers=getattr(ns, "workers", None), verbose=ns.verbose,
    )


def _out_dir(cmd, cfg):
    if cmd.output:
        path = cmd.output
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, cfg.experiment.get("output_dir", "out"))
        path = os.path.join(root, cmd.subcommand)
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def _noisy_circles(cfg):
    return datagen.corrupt_circles(datagen.gen_circles(cfg.circles), cfg.circles, cfg.noise)


def _cmd_generate(cmd, cfg, out):
    datagen.write_csv(datagen.gen_circles(cfg.circles), os.path.join(out, "train.csv"))
    datagen.write_csv(datagen.gen_circles_test(cfg.circles), os.path.join(out, "test.csv"))
    print(f"wrote {out}/train.csv and {out}/test.csv")


def _cmd_corrupt(cmd, cfg, out):
    clean = datagen.read_csv(cmd.input) if cmd.input else datagen.gen_circles(cfg.circles)
    noisy = datagen.corrupt_circles(clean, cfg.circles, cfg.noise)
    path = os.path.join(out, "noisy.csv")
    datagen.write_csv(noisy, path)
    print(f"wrote {path} (noise rate {datagen.noise_rate(noisy):.4f})")


def _cmd_pseudo_label(cmd, cfg, out):
    pool, summary = harness.pipeline_experiment(cfg.pipeline, cfg.circles)
    datagen.write_csv(pool, os.path.join(out, "pool.csv"))
    _write_json(summary, os.path.join(out, "pipeline.json"))
    print(json.dumps(summary, indent=1, sort_keys=True))


def _cmd_train(cmd, cfg, out):
    if cmd.input:
        data = datagen.read_csv(cmd.input, require_confidence=cfg.train.method == "ilfc")
    else:
        data = _noisy_circles(cfg)
    if cmd.test:
        test = datagen.read_csv(cmd.test, n_classes=data.n_classes)
    elif not cmd.input:
        test = datagen.gen_circles_test(cfg.circles)
    else:
        test = None
    diag = None
    if cfg.train.method == "ilfc":
        from csidn import noise_est

        diag = noise_est.Diagnostics()
        res = trainers.train_ilfc(data, cfg.train, test, diagnostics=diag)
    else:
        res = trainers.train(data, cfg.train, test)
    model_path = os.path.join(out, "model.json")
    nn.save_model(res.model, model_path)
    res.model_ref = "model.json"
    harness.persist_run(res, os.path.join(out, "run.json"))
    if diag is not None:
        diag.dump(os.path.join(out, "diagnostics.json"))
    last = f", final test accuracy {res.test_acc[-1]:.4f}" if res.test_acc else ""
    print(f"{cfg.train.method}: {len(res.train_loss)} epochs{last}; wrote {out}/run.json")


def _cmd_sweep(cmd, cfg, out):
    exp = cfg.experiment_config(out)
    report = harness.run_sweep(exp, out, cmd.workers)
    print(f"{len(report.results)} cells done, {len(report.failures)} failed; wrote {out}/curves.csv")
    if report.failures:
        raise RuntimeError(f"{len(report.failures)} sweep cells failed; see {out}/failures.json")


def _cmd_sensitivity(cmd, cfg, out):
    exp = cfg.experiment_config(out)
    report = harness.sensitivity_sweep(exp, out, cmd.workers)
    for rho, sigma, m, lo, hi, delta in report.rows():
        print(f"rho={rho:g} sigma={sigma:g}: final acc {m:.4f} [{lo:.4f}, {hi:.4f}] delta {delta:+.4f}")


def _cmd_probe(cmd, cfg, out):
    data = datagen.read_csv(cmd.input) if cmd.input else _noisy_circles(cfg)
    exp = cfg.experiment_config(out)
    report = harness.small_loss_probe(data, cfg.noise.w, cfg.train, exp.probe_epochs, exp.probe_keep, out)
    print(json.dumps(report.summary(), indent=1, sort_keys=True))


def _cmd_grid(cmd, cfg, out):
    exp = cfg.experiment_config(out)
    if cmd.model:
        model = nn.load_model(cmd.model)
    else:
        data = _noisy_circles(cfg)
        model = trainers.train(data, cfg.train).model
        nn.save_model(model, os.path.join(out, "model.json"))
    grid = harness.boundary_grid(model, exp.grid_bounds, exp.grid_resolution)
    harness.write_grid(grid, os.path.join(out, "grid.csv"))
    print(f"wrote {out}/grid.csv ({grid.shape[0]} rows)")


_HANDLERS = {
    "generate": _cmd_generate,
    "corrupt": _cmd_corrupt,
    "pseudo-label": _cmd_pseudo_label,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "sensitivity": _cmd_sensitivity,
    "probe": _cmd_probe,
    "grid": _cmd_grid,
}


def run(cmd):
    cfg = cfgmod.load_config(cmd.config, cmd.overrides)
    if cmd.seed is not None:
        cfg = cfgmod.with_seed(cfg, cmd.seed)
        if cmd.subcommand in ("sweep", "sensitivity"):
            cfg = replace(cfg, experiment={**cfg.experiment, "seeds": [cmd.seed]})
    out = _out_dir(cmd, cfg)
    _HANDLERS[cmd.subcommand](cmd, cfg, out)


def main(argv=None):
    cmd = parse_cli(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if cmd.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(cmd)
    except (ConfigError, ParseError, SchemaError) as exc:
        print(f"csidn: error: {exc}", file=sys.stderr)
        return 2
    except (CSIDNError, OSError, RuntimeError, ValueError) as exc:
        print(f"csidn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
