"""TOML configuration: strict parsing, dotted overrides, documented defaults."""

import re
from dataclasses import dataclass, field, fields, replace

from csidn import datagen, harness, trainers
from csidn.errors import ConfigError, ParseError, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = "digits"
    clean_size: int = 50
    valid_size: int = 200
    pool_size: int = 1000
    holdout_size: int = 300
    hidden: tuple = (128, 128)
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    temperature: float = None
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in ("digits", "circles"):
            raise ConfigError("must be 'digits' or 'circles'", "pipeline.dataset")
        for name in ("clean_size", "valid_size", "pool_size", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"pipeline.{name}")
        if self.holdout_size < 0:
            raise ConfigError("must be >= 0", "pipeline.holdout_size")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError("must be > 0", "pipeline.temperature")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class Config:
    circles: datagen.CirclesSpec = field(default_factory=datagen.CirclesSpec)
    noise: datagen.NoiseSpec = field(default_factory=datagen.NoiseSpec)
    train: trainers.TrainConfig = field(default_factory=trainers.TrainConfig)
    experiment: dict = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def experiment_config(self, output_dir=None):
        kw = dict(self.experiment)
        if output_dir is not None:
            kw["output_dir"] = output_dir
        return harness.ExperimentConfig(circles=self.circles, noise=self.noise, train=self.train, **kw)


SECTIONS = {
    "circles": datagen.CirclesSpec,
    "noise": datagen.NoiseSpec,
    "train": trainers.TrainConfig,
    "experiment": harness.ExperimentConfig,
    "pipeline": PipelineConfig,
}
# experiment keys whose values come from other sections
_EXPERIMENT_SKIP = {"circles", "noise", "train"}

DESCRIPTIONS = {
    "circles.radii": "mean radius of each class ring (strictly increasing)",
    "circles.sigma_r": "standard deviation of the radius around each ring",
    "circles.n_per_class": "training points per class (the test split has the same size)",
    "circles.seed": "generator seed (sweeps replace it with the run seed)",
    "noise.kind": "clean | ccn | idn | csidn",
    "noise.rho": "scale of the directional flip probability rho*(cos(w,x)+1)/2, in [0, 1]",
    "noise.w": "noise direction (normalized)",
    "noise.matrix": "row-stochastic K x K matrix for ccn",
    "noise.confidence_mode": "exact-posterior | keep-probability",
    "noise.flip_law": "uniform-other",
    "noise.seed": "corruption seed (sweeps replace it with the run seed)",
    "train.method": "naive | ilfc | fc | mae | lq | coteaching",
    "train.epochs": "training epochs (h_noisy gets the same budget)",
    "train.batch_size": "minibatch size",
    "train.lr": "SGD learning rate",
    "train.momentum": "SGD momentum in [0, 1)",
    "train.hidden": "hidden layer widths",
    "train.q": "L_q exponent in (0, 1]",
    "train.forget_rate": "co-teaching forget rate tau; unset = measured noise rate",
    "train.ramp_epochs": "epochs over which the co-teaching keep rate ramps down",
    "train.anchors": "anchor points per class for alpha / fixed-T estimation",
    "train.noisy_lr_schedule": "constant | cosine; learning-rate schedule of h_noisy (ILFC, FC)",
    "train.seed": "run seed (init, shuffling)",
    "experiment.rhos": "noise levels swept",
    "experiment.methods": "methods swept",
    "experiment.seeds": "seeds per cell",
    "experiment.sigmas": "confidence perturbation std devs for the sensitivity sweep",
    "experiment.probe_epochs": "epochs before the small-loss set is inspected",
    "experiment.probe_keep": "fraction of smallest-loss samples inspected",
    "experiment.grid_bounds": "x0_min, x0_max, x1_min, x1_max of the boundary grid",
    "experiment.grid_resolution": "grid points per axis",
    "experiment.output_dir": "default output directory",
    "experiment.workers": "parallel worker processes",
    "pipeline.dataset": "digits | circles",
    "pipeline.clean_size": "clean labelled subset used to fit the annotator",
    "pipeline.valid_size": "validation set used to pick the temperature",
    "pipeline.pool_size": "points labelled by the annotator",
    "pipeline.holdout_size": "held-out set for reporting calibration",
    "pipeline.hidden": "annotator hidden widths",
    "pipeline.epochs": "annotator training epochs",
    "pipeline.batch_size": "annotator minibatch size",
    "pipeline.lr": "annotator learning rate",
    "pipeline.momentum": "annotator momentum",
    "pipeline.temperature": "force a temperature instead of calibrating",
    "pipeline.seed": "split, init and shuffle seed",
}


def _keys(section):
    return [f.name for f in fields(SECTIONS[section]) if not (section == "experiment" and f.name in _EXPERIMENT_SKIP)]


def _defaults(section):
    obj = SECTIONS[section]()
    return {k: getattr(obj, k) for k in _keys(section)}


def _toml_value(v):
    if v is None:
        return None
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def config_reference():
    """Every config key with its default, as a commented TOML document."""
    lines = ["# csidn configuration reference (all keys optional; unknown keys are rejected)"]
    for section in SECTIONS:
        lines.append(f"\n[{section}]")
        for key, value in _defaults(section).items():
            desc = DESCRIPTIONS.get(f"{section}.{key}", "")
            text = _toml_value(value)
            if text is None:
                lines.append(f"# {key} = (unset)  # {desc}")
            else:
                lines.append(f"{key} = {text}  # {desc}")
    return "\n".join(lines) + "\n"


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, value = item.split("=", 1)
    key = key.strip()
    if key.count(".") != 1:
        raise ConfigError("override keys take the form section.key", key)
    return key, _parse_value(value.strip())


_LOC = re.compile(r"line (\d+), column (\d+)")


def parse_text(text, source="<config>"):
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _LOC.search(str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ParseError(f"{source}: {exc}", line=line, column=col) from None


def build_config(raw, overrides=()):
    """Validate a parsed document plus ``(dotted key, value)`` overrides."""
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for key, value in overrides:
        section, name = key.split(".", 1)
        raw.setdefault(section, {})[name] = value
    for section, body in raw.items():
        if section not in SECTIONS:
            raise ConfigError("unknown section", section)
        if not isinstance(body, dict):
            raise ConfigError("must be a table", section)
        allowed = set(_keys(section))
        for k in body:
            if k not in allowed:
                raise ConfigError("unknown key", f"{section}.{k}")
    built = {}
    for section in ("circles", "noise", "train", "pipeline"):
        body = dict(raw.get(section, {}))
        for k in ("radii", "w", "hidden"):
            if k in body and isinstance(body[k], list):
                body[k] = tuple(body[k])
        if "matrix" in body and body["matrix"] is not None:
            body["matrix"] = tuple(tuple(row) for row in body["matrix"])
        try:
            built[section] = SECTIONS[section](**body)
        except ConfigError:
            raise
        except (ValidationError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc), _guess_key(section, str(exc), body)) from None
    experiment = dict(raw.get("experiment", {}))
    try:
        harness.ExperimentConfig(**experiment)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "experiment") from None
    return Config(built["circles"], built["noise"], built["train"], experiment, built["pipeline"])


def _guess_key(section, message, body):
    for k in sorted(body, key=len, reverse=True):
        if re.search(rf"\b{re.escape(k)}\b", message):
            return f"{section}.{k}"
    return section


def load_config(path=None, overrides=()):
    """Read ``path`` (or defaults when None) and apply ``KEY=VALUE`` override strings."""
    parsed = [parse_override(o) if isinstance(o, str) else o for o in overrides]
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
        raw = parse_text(text, str(path))
    return build_config(raw, parsed)


def with_seed(cfg, seed):
    """Apply a run seed to every seeded section."""
    return replace(
        cfg,
        circles=replace(cfg.circles, seed=seed),
        noise=replace(cfg.noise, seed=seed),
        train=replace(cfg.train, seed=seed),
        pipeline=replace(cfg.pipeline, seed=seed),
    )
