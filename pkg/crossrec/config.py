"""
The run configuration: a tree of dataclasses stored as canonical JSON, dotted key
overrides, the config fingerprint and the per-command manifests.
"""
import hashlib
import json
import pathlib
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Optional, Tuple

from crossrec.errors import ConfigError
from crossrec.model import Hyperparams
from crossrec.tags import REPRESENTATIONS

PROVIDERS = ("mock", "planted", "openai")


@dataclass
class PathsConfig:
    """Input files and the output directory, relative paths resolve against the config file."""

    interactions: str = "interactions.tsv"
    items: str = "items.jsonl"
    image: str = "image.bin"
    text: str = "text.bin"
    tag_cache: str = "tag_cache.jsonl"
    out_dir: str = "run"


@dataclass
class FilterConfig:
    min_total: int = 10
    min_per_domain: int = 3
    min_item_interactions: int = 5


@dataclass
class TaggingConfig:
    provider: str = "mock"
    seed: int = 0
    model: Optional[str] = None
    retries: int = 2
    workers: int = 1
    representation: str = "weighted_multi_hot"
    source: str = "llm"

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise ConfigError("tagging.provider", f"must be one of {list(PROVIDERS)}, got '{self.provider}'.")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(
                "tagging.representation", f"must be one of {list(REPRESENTATIONS)}, got '{self.representation}'."
            )
        if self.source not in ("llm", "keyword"):
            raise ConfigError("tagging.source", f"must be 'llm' or 'keyword', got '{self.source}'.")
        if self.retries < 0:
            raise ConfigError("tagging.retries", f"must be >= 0, got {self.retries}.")
        if self.workers < 1:
            raise ConfigError("tagging.workers", f"must be >= 1, got {self.workers}.")


@dataclass
class ModeConfig:
    mode: str = "reference"
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("reference", "parallel"):
            raise ConfigError("mode.mode", f"must be 'reference' or 'parallel', got '{self.mode}'.")
        if self.threads < 1:
            raise ConfigError("mode.threads", f"must be >= 1, got {self.threads}.")


@dataclass
class RunConfig:
    """
    Everything a pipeline run reads. `base_dir` is where relative paths resolve and is
    not part of the serialised config.

    Usage:

    ```python
    from crossrec.config import RunConfig, apply_overrides

    config = RunConfig.from_dict(apply_overrides({}, ["hyper.lr=0.01", 'domains=["food", "kitchen"]']))
    assert config.hyper.lr == 0.01
    assert config.hyper.batch_size == 256
    assert RunConfig.from_json(config.to_json()) == config
    ```
    """

    domains: Tuple[str, str] = ("X", "Y")
    paths: PathsConfig = field(default_factory=PathsConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    tagging: TaggingConfig = field(default_factory=TaggingConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    mode: ModeConfig = field(default_factory=ModeConfig)
    base_dir: str = field(default=".", compare=False, metadata={"serialise": False})

    def path(self, name):
        return pathlib.Path(self.base_dir) / getattr(self.paths, name)

    @property
    def out_dir(self):
        return self.path("out_dir")

    def check_inputs(self, *names):
        """Raises a `ConfigError` for the first named input path that does not exist."""
        for name in names:
            if not self.path(name).exists():
                raise ConfigError(f"paths.{name}", f"file `{self.path(name)}` does not exist.")

    def to_dict(self):
        blob = {}
        for f in fields(self):
            if f.metadata.get("serialise", True):
                value = getattr(self, f.name)
                blob[f.name] = value.to_dict() if isinstance(value, Hyperparams) else _plain(value)
        return blob

    def to_json(self):
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, blob, base_dir="."):
        config = _build(cls, blob, prefix="")
        config.base_dir = str(base_dir)
        return config

    @classmethod
    def from_json(cls, text, base_dir="."):
        try:
            blob = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError("<root>", f"invalid JSON: {err}") from None
        return cls.from_dict(blob, base_dir=base_dir)


def _plain(value):
    if is_dataclass(value):
        return {k: _plain(v) for k, v in asdict(value).items()}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _check_type(key, value, hint):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(key, f"expected a list of {len(args)} values, got {value!r}.")
        return tuple(_check_type(f"{key}[{i}]", v, a) for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {getattr(hint, '__name__', hint)}, got {value!r}.")
    return value


def _build(cls, blob, prefix):
    if not isinstance(blob, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"expected an object, got {blob!r}.")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if f.metadata.get("serialise", True)}
    for key in blob:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown key.")
    values = {}
    for name in known:
        if name not in blob:
            continue
        key, hint = f"{prefix}{name}", hints[name]
        if is_dataclass(hint):
            values[name] = _build(hint, blob[name], prefix=f"{key}.")
        else:
            values[name] = _check_type(key, blob[name], hint)
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(err)) from None


def canonical_json(blob):
    return json.dumps(blob, sort_keys=True, indent=2) + "\n"


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(blob, overrides):
    """
    Applies `dotted.key=value` overrides to a config dictionary. Values are read as
    JSON and fall back to plain strings.
    """
    blob = json.loads(json.dumps(blob))
    defaults = RunConfig().to_dict()
    for override in overrides:
        if "=" not in override:
            raise ConfigError(override, "overrides look like `dotted.key=value`.")
        key, raw = override.split("=", 1)
        parts = key.strip().split(".")
        node, reference = blob, defaults
        for part in parts[:-1]:
            if not isinstance(reference, dict) or part not in reference:
                raise ConfigError(key, "unknown key.")
            reference = reference[part]
            node = node.setdefault(part, {})
        if not isinstance(reference, dict) or parts[-1] not in reference:
            raise ConfigError(key, "unknown key.")
        node[parts[-1]] = _parse_value(raw)
    return blob


def load_config(path=None, overrides=()):
    """Reads a config file (or the defaults when `path` is None) and applies overrides."""
    if path is None:
        return RunConfig.from_dict(apply_overrides({}, overrides))
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"config file `{path}` does not exist.")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("<root>", f"invalid JSON in `{path}`: {err}") from None
    return RunConfig.from_dict(apply_overrides(blob, overrides), base_dir=path.parent)


def fingerprint(config: RunConfig):
    """SHA-256 of the canonical JSON of a config."""
    return hashlib.sha256(config.to_json().encode("utf-8")).hexdigest()


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def versions():
    import numpy
    import torch

    from crossrec import __version__

    return {"crossrec": __version__, "numpy": numpy.__version__, "torch": torch.__version__}


def write_manifest(out_dir, command, config: RunConfig, inputs=(), outputs=()):
    """
    Writes `manifest-<command>.json` with the config fingerprint and the SHA-256 of
    every input and output. Paths are stored relative to `out_dir` where possible.
    """
    out_dir = pathlib.Path(out_dir)

    def name(p):
        p = pathlib.Path(p)
        try:
            return str(p.resolve().relative_to(out_dir.resolve()))
        except ValueError:
            return str(p)

    manifest = {
        "command": command,
        "config_fingerprint": fingerprint(config),
        "inputs": {name(p): sha256_file(p) for p in inputs},
        "outputs": {name(p): sha256_file(p) for p in outputs},
        "versions": versions(),
    }
    path = out_dir / f"manifest-{command.replace(' ', '-')}.json"
    path.write_text(canonical_json(manifest))
    return path
