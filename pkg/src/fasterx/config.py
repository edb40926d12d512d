"""Layered run configuration: defaults < config file < command-line sets.

Config files are plain text, one ``dotted.key = value`` per line, with
``#`` comments. Dotted paths address nested dataclass fields, e.g.
``model.profile = nano`` or ``optimizer.lr = 0.01``.
"""

from __future__ import annotations

from dataclasses import fields, is_dataclass

from fasterx.train import TrainConfig


class ConfigError(ValueError):
    pass


def _coerce(current, text: str):
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def apply_override(cfg, dotted: str, value: str) -> None:
    obj = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config section {part!r} in {dotted!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, leaf, _coerce(getattr(obj, leaf), value))


def parse_config_file(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_train_config(config_file=None, sets=()) -> TrainConfig:
    from fasterx.model import DEFAULT_INPUT_SIZE

    cfg = TrainConfig()
    seen = set()
    pairs = list(parse_config_file(config_file)) if config_file else []
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    for key, value in pairs:
        apply_override(cfg, key, value)
        seen.add(key)
    # profile changes move the default input size unless pinned explicitly
    if "model.profile" in seen and "model.input_size" not in seen:
        cfg.model.input_size = DEFAULT_INPUT_SIZE[cfg.model.profile]
    # re-run validation on nested dataclasses after raw field writes
    cfg.model.__post_init__()
    return cfg
