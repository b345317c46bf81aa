"""Strict ``section.key = value`` run configuration."""

import os

from cortexforge.netcore import STAGE_FIELDS, NetworkConfig, StageConfig
from cortexforge.optim import SgdConfig


class ConfigKeyError(ValueError):
    pass


_STAGE_DEFAULTS = {f: StageConfig.__dataclass_fields__[f].default for f in STAGE_FIELDS[3:]}

DEFAULTS = {
    "run.seed": 0,
    "net.stages": 3,
    "net.input_height": 64,
    "net.input_width": 64,
    "net.input_maps": 1,
    "sgd.learning_rate": 1e-3,
    "sgd.minibatch_size": 100,
    "sgd.max_steps": 1000,
    "async.n_replicas": 2,
    "async.n_shards": 2,
    "async.fetch_period": 1,
    "async.push_period": 1,
    "async.mode": "simulation",
    "async.endpoints": "",
    "data.train_dir": "",
    "data.train_index": "",
    "data.whiten": True,
    "data.whiten_floor": 1e-2,
    "eval.pos_dir": "",
    "eval.neg_dir": "",
    "eval.ratio": 13026 / 37000,
    "eval.total": 0,
    "eval.bins": 50,
    "eval.hist_neurons": 1,
    "eval.n_filters": 1000,
    "eval.scales": "0.6,0.7,0.8,0.9,1.0,1.1,1.2,1.3",
    "eval.shifts": "-4,-3,-2,-1,0,1,2,3,4",
    "eval.n_stimuli": 10,
    "eval.rotation_dir": "",
    "sweep.values": "",
    "suphead.data_dir": "",
    "suphead.head_lr": 0.5,
    "suphead.head_steps": 500,
    "suphead.finetune_lr": 1e-2,
    "suphead.finetune_steps": 100,
    "suphead.pretrain_steps": 300,
    "suphead.pretrain_lr": 1e-3,
}
for _n in (1, 2, 3):
    for _f, _v in _STAGE_DEFAULTS.items():
        DEFAULTS[f"stage{_n}.{_f}"] = _v


def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigKeyError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


class RunConfig:
    """Resolved configuration; every known key has a value, unknown keys are rejected."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigKeyError(f"unknown config key: {key}")
        if isinstance(value, str):
            value = _coerce(key, value, DEFAULTS[key])
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key.count(".") != 1:
                raise ConfigKeyError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def dumps(self):
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def write(self, out_dir, name="config.resolved"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def floats(self, key):
        text = self.values[key]
        return [float(v) for v in str(text).split(",") if v.strip()]

    # -- typed views --------------------------------------------------------

    def network_config(self, **overrides):
        stages = []
        for n in range(1, self["net.stages"] + 1):
            kw = {f: self[f"stage{n}.{f}"] for f in STAGE_FIELDS[3:]}
            kw.update(overrides)
            stages.append(kw)
        return NetworkConfig.chain(self["net.input_height"], self["net.input_width"],
                                   self["net.input_maps"], stages)

    def sgd_config(self):
        return SgdConfig(self["sgd.learning_rate"], self["sgd.minibatch_size"],
                         self["sgd.max_steps"], self["run.seed"])

    def async_config(self):
        from cortexforge.distrib import AsyncConfig

        return AsyncConfig(self["async.n_replicas"], self["async.n_shards"],
                           self["async.fetch_period"], self["async.push_period"],
                           self.sgd_config())

    def endpoints(self):
        return [e.strip() for e in self["async.endpoints"].split(",") if e.strip()]
