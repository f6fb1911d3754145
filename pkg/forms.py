"""Run configuration: defaults, file/override merging and WTForms validation."""

import json
import os

from wtforms import BooleanField, FloatField, Form, IntegerField, SelectField, StringField
from wtforms.validators import AnyOf, InputRequired, NumberRange, ValidationError

from errors import ConfigError
from models import BACKBONES

FALSE_VALUES = ("false", "False", "", "0", "no", "off")

# Every accepted key, with its default. Dotted keys are run-level settings;
# the rest map one-to-one onto TrainConfig.
RUN_DEFAULTS = {
    "dataset.bundle": "data",       # overridden by IMCAT_DATA_DIR when not set
    "run.dir": "runs/default",
    "d": 64,
    "K": 4,
    "backbone": "bprmf",
    "n_layers": 2,                  # LightGCN only
    "batch_size": 1024,
    "lr": 1e-3,
    "weight_decay": 1e-3,
    "eta": 1.0,                     # Student-t degrees of freedom
    "tau": 1.0,                     # InfoNCE temperature
    "alpha": 1.0,                   # item-tag BPR weight
    "beta": 0.1,                    # alignment weight
    "gamma": 0.1,                   # clustering weight
    "delta": 0.7,                   # Jaccard threshold for similar items
    "lambda_ind": 1e-2,             # independence penalty weight
    "p_max": 4,                     # max positives per anchor and intent
    "max_epochs": 3000,
    "patience": 100,
    "pretrain_epochs": 500,
    "cluster_update_every": 10,
    "topn": 20,
    "seed": 0,
    "deterministic": True,
    "debug": False,
    "propagate_every_step": False,
    "propagated_alignment": False,
    "independence_target": "centers",
    "no_ui": False,
    "no_ut": False,
    "no_uit": False,
    "no_nlt": False,
    "no_isa": False,
}


def field_name(key):
    return key.replace(".", "_")


class RunConfigForm(Form):
    """Form for validating a flat run config."""

    dataset_bundle = StringField("dataset.bundle", validators=[InputRequired()])
    run_dir = StringField("run.dir", validators=[InputRequired()])

    d = IntegerField("d", validators=[InputRequired(), NumberRange(min=2)])
    K = IntegerField("K", validators=[InputRequired(), NumberRange(min=1)])
    backbone = SelectField("backbone", choices=list(BACKBONES),
                           validators=[InputRequired(), AnyOf(BACKBONES)])
    n_layers = IntegerField("n_layers", validators=[InputRequired(), NumberRange(min=0)])
    batch_size = IntegerField("batch_size", validators=[InputRequired(), NumberRange(min=1)])
    lr = FloatField("lr", validators=[InputRequired(), NumberRange(min=0)])
    weight_decay = FloatField("weight_decay", validators=[InputRequired(), NumberRange(min=0)])
    eta = FloatField("eta", validators=[InputRequired(), NumberRange(min=1e-12)])
    tau = FloatField("tau", validators=[InputRequired(), NumberRange(min=1e-12)])
    alpha = FloatField("alpha", validators=[InputRequired(), NumberRange(min=0)])
    beta = FloatField("beta", validators=[InputRequired(), NumberRange(min=0)])
    gamma = FloatField("gamma", validators=[InputRequired(), NumberRange(min=0)])
    delta = FloatField("delta", validators=[InputRequired(), NumberRange(min=0, max=1)])
    lambda_ind = FloatField("lambda_ind", validators=[InputRequired(), NumberRange(min=0)])
    p_max = IntegerField("p_max", validators=[InputRequired(), NumberRange(min=1)])
    max_epochs = IntegerField("max_epochs", validators=[InputRequired(), NumberRange(min=1)])
    patience = IntegerField("patience", validators=[InputRequired(), NumberRange(min=1)])
    pretrain_epochs = IntegerField("pretrain_epochs",
                                   validators=[InputRequired(), NumberRange(min=0)])
    cluster_update_every = IntegerField("cluster_update_every",
                                        validators=[InputRequired(), NumberRange(min=1)])
    topn = IntegerField("topn", validators=[InputRequired(), NumberRange(min=1)])
    seed = IntegerField("seed", validators=[InputRequired(), NumberRange(min=0)])
    independence_target = SelectField("independence_target", choices=["centers", "chunks"],
                                      validators=[InputRequired()])

    deterministic = BooleanField("deterministic", false_values=FALSE_VALUES)
    debug = BooleanField("debug", false_values=FALSE_VALUES)
    propagate_every_step = BooleanField("propagate_every_step", false_values=FALSE_VALUES)
    propagated_alignment = BooleanField("propagated_alignment", false_values=FALSE_VALUES)
    no_ui = BooleanField("no_ui", false_values=FALSE_VALUES)
    no_ut = BooleanField("no_ut", false_values=FALSE_VALUES)
    no_uit = BooleanField("no_uit", false_values=FALSE_VALUES)
    no_nlt = BooleanField("no_nlt", false_values=FALSE_VALUES)
    no_isa = BooleanField("no_isa", false_values=FALSE_VALUES)

    def validate_K(self, field):
        if self.d.data and field.data and self.d.data % field.data:
            raise ValidationError(f"d={self.d.data} is not divisible by K={field.data}")

    def validate_delta(self, field):
        if field.data is not None and not 0 < field.data < 1:
            raise ValidationError("delta must lie strictly between 0 and 1")

    def validate_d(self, field):
        if self.backbone.data == "neumf" and field.data and field.data % 2:
            raise ValidationError("neumf needs an even d")


class _FormData:
    """Minimal multidict over already-stringified config values."""

    def __init__(self, values):
        self._values = values

    def __contains__(self, key):
        return key in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def getlist(self, key):
        return [self._values[key]] if key in self._values else []


def _stringify(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_overrides(pairs):
    """['alpha=0.5', ...] -> {'alpha': '0.5', ...}."""

    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError({pair: ["expected key=value"]})
        overrides[key.strip()] = value.strip()
    return overrides


def read_config_file(path):
    if not os.path.exists(path):
        raise ConfigError({path: ["config file not found"]})
    with open(path) as handle:
        try:
            values = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError({path: [f"invalid JSON: {exc}"]}) from exc
    if not isinstance(values, dict):
        raise ConfigError({path: ["top level must be an object"]})
    return values


def validate_run_config(values):
    """Coerce and check a flat mapping; unknown keys are an error.

    Missing keys take their RUN_DEFAULTS value. Returns the resolved mapping
    keyed exactly like RUN_DEFAULTS.
    """

    unknown = sorted(set(values) - set(RUN_DEFAULTS))
    if unknown:
        raise ConfigError({key: ["unknown key"] for key in unknown})

    defaults = dict(RUN_DEFAULTS)
    defaults["dataset.bundle"] = os.environ.get("IMCAT_DATA_DIR", defaults["dataset.bundle"])
    merged = {**defaults, **values}

    form = RunConfigForm(_FormData({field_name(key): _stringify(value)
                                    for key, value in merged.items()}))
    if not form.validate():
        raise ConfigError({key: form.errors[field_name(key)] for key in RUN_DEFAULTS
                           if field_name(key) in form.errors})

    return {key: form[field_name(key)].data for key in RUN_DEFAULTS}


def load_run_config(path=None, overrides=()):
    """Config file (optional) with `--set` overrides applied on top."""

    values = read_config_file(path) if path else {}
    values.update(parse_overrides(overrides))
    return validate_run_config(values)


def write_run_config(config, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as handle:
        json.dump(config, handle, indent=2, sort_keys=True)
        handle.write("\n")
