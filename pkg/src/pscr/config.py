"""Flat ``key = value`` run configuration with dotted keys.

Precedence is command-line overrides, then the config file, then defaults.
Unknown keys are rejected. :func:`dump` writes a file that :func:`load_file`
reads back to the same effective configuration.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigurationError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _entries(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(";") if t.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        sep = ";" if any("," in str(v) for v in value) else ","
        return sep.join(str(v) for v in value)
    return str(value)


# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "seed": (int, 0, "master seed for split, init and pairing"),
    "data.manifest": (str, "", "manifest CSV (path,<dims...>)"),
    "data.features": (str, "", "precomputed feature CSV for backbone.kind = precomputed"),
    "data.split_ratio": (float, 0.8, "training fraction of the seeded split"),
    "out.dir": (str, "out", "output directory"),
    "train.arm": (str, "FR_PSCR", "FR | FR_PS | FR_CR | FR_PSCR"),
    "train.batch_size": (int, 8, "training batch size"),
    "train.epochs": (int, 100, "maximum epochs"),
    "train.learning_rate": (float, 1e-4, "Adam learning rate"),
    "train.weight_decay": (float, 1e-5, "L2 weight decay added to gradients"),
    "train.beta1": (float, 0.9, "Adam beta1"),
    "train.beta2": (float, 0.999, "Adam beta2"),
    "train.epsilon": (float, 1e-8, "Adam epsilon"),
    "train.exemplars_per_query": (int, 1, "exemplars drawn per query each epoch"),
    "train.patience": (int, 20, "early stop after this many non-improving epochs (0 = off)"),
    "train.freeze_backbone": (_bool, False, "train only the regression head"),
    "sampler.start_indices": (parse_ints, (0, 16, 32), "sliding-window start offsets"),
    "sampler.window": (int, 32, "sliding-window side"),
    "preprocess.resize_target": (int, 32, "resize side for the non-sampling arms"),
    "preprocess.override": (str, "", "force a preprocessor: resize:N | grid:N | overlap:S/W"),
    "backbone.kind": (str, "small_cnn", "small_cnn | precomputed"),
    "backbone.channels": (parse_ints, (8, 16, 32), "SmallCNN channels per block"),
    "backbone.feature_dim": (int, 32, "feature width for precomputed features"),
    "head.hidden": (int, 64, "hidden width of the regression head"),
    "vote.num_exemplars": (int, 10, "exemplars per test image"),
    "vote.seed": (int, 0, "exemplar selection seed"),
    "vote.selection": (str, "uniform", "uniform | stratified"),
    "vote.shared": (_bool, False, "use one exemplar set for every test image"),
    "eval.batch_size": (int, 20, "evaluation batch size"),
    "ablate.arms": (_words, ("FR", "FR_PS", "FR_CR", "FR_PSCR"), "arms to compare"),
    "ablate.preprocessors": (_entries, (), "';'-separated preprocessors crossed with every arm"),
    "ablate.start_lists": (_entries, (), "';'-separated S/W sampler specs for sampling arms"),
}


class RunConfig(dict):
    """Effective configuration; values are parsed Python objects keyed by dotted name."""

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v[1] for k, v in SCHEMA.items()})

    def set(self, key: str, raw: str, origin: str = "override") -> None:
        if key not in SCHEMA:
            raise ConfigurationError(f"{origin}: unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self[key] = parser(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{origin}: bad value for {key}: {exc}") from exc

    def update_raw(self, pairs: Mapping[str, str], origin: str = "override") -> None:
        for k, v in pairs.items():
            self.set(k, v, origin)

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in SCHEMA)


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigurationError(f"{origin}:{n}: expected 'key = value'")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigurationError(f"{origin}:{n}: unknown config key {key!r}")
        pairs[key] = value.strip()
    return pairs


def load_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def build(file: str | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    cfg = RunConfig.defaults()
    if file:
        cfg.update_raw(load_file(file), str(file))
    if overrides:
        cfg.update_raw(overrides)
    return cfg
