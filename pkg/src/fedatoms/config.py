"""Experiment configuration: TOML/JSON files, defaults, consistency rules and
``--section.key value`` overrides."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ROOT_ENV = "FEDATOMS_OUTPUT_ROOT"

DATASET_KINDS = ("mixture", "synthetic2d", "csv")
PARTITION_MODES = ("shards", "dirichlet", "iid")
STRATEGIES = ("plain", "decomposed", "fast_slow", "personalized")

# per-kind dataset parameters and their defaults
DATASET_PARAMS = {
    "mixture": {"num_classes": 10, "channels": 1, "side": 8, "n": 1000, "test_n": 500, "separation": 2.5},
    "synthetic2d": {"n_per_class": 100, "test_n_per_class": 100},
    "csv": {"path": None, "test_path": None, "label_column": "label"},
}


@dataclass
class DatasetConfig:
    kind: str = ""
    params: dict = field(default_factory=dict)
    seed: int | None = None


@dataclass
class PartitionConfig:
    mode: str = "shards"
    clients: int = 0
    shards_per_client: int | None = None
    concentration: float | None = None
    client_test_fraction: float = 0.0
    seed: int | None = None


@dataclass
class ModelConfig:
    # each layer: [in_channels, out_channels, kernel, atoms, stride, pad]
    conv: list | None = None
    decomposed: bool | None = None
    atoms: int | None = None
    loss: str | None = None
    head_bias: bool | None = None


@dataclass
class FederationConfig:
    rounds: int = 0
    fraction: float = 0.1
    epochs: int = 1
    batch_size: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    mu_prox: float = 0.0
    strategy: str = "decomposed"
    beta: float | None = None
    personal_head: bool | None = None
    personal_epochs: int | None = None
    lr_schedule: str = "constant"
    variance_repeats: int = 0
    workers: int = 1
    check_identity: bool = False


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    checkpoints: bool = False
    checkpoint_every: int = 0
    record_time: bool = False


SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "federation": FederationConfig,
    "output": OutputConfig,
}
REQUIRED = (("dataset", "kind"), ("partition", "clients"), ("federation", "rounds"))


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    master_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def output_dir(self) -> Path:
        out = Path(self.output.dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _check_type(value, default, where):
    """Light type check against the field's default or annotation hint."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", where)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", where)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", where)
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", where)
    return value


def from_dict(raw: dict, source: str = "<config>") -> ExperimentConfig:
    """Validate a raw mapping and fill every default."""
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a table", source)
    unknown = set(raw) - set(SECTIONS) - {"master_seed"}
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}", source)
    given = {(sec, key) for sec in SECTIONS for key in (raw.get(sec) or {})}
    for sec, key in REQUIRED:
        if (sec, key) not in given:
            raise ConfigError("missing required field", f"{source}:{sec}.{key}")

    cfg = ExperimentConfig()
    seed = raw.get("master_seed", 0)
    cfg.master_seed = _check_type(seed, 0, f"{source}:master_seed")
    for sec, cls in SECTIONS.items():
        table = raw.get(sec) or {}
        if not isinstance(table, dict):
            raise ConfigError("expected a table", f"{source}:{sec}")
        names = {f.name for f in fields(cls)}
        bad = set(table) - names
        if bad:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(bad))}", f"{source}:{sec}")
        section = cls()
        for key, value in table.items():
            default = getattr(section, key)
            if default is not None and value is not None:
                value = _check_type(value, default, f"{source}:{sec}.{key}")
            setattr(section, key, value)
        setattr(cfg, sec, section)
    _resolve(cfg, source)
    return cfg


def _resolve(cfg: ExperimentConfig, source: str) -> None:
    """Fill context-dependent defaults and enforce cross-field rules."""
    d, p, m, f = cfg.dataset, cfg.partition, cfg.model, cfg.federation

    def err(msg, key):
        raise ConfigError(msg, f"{source}:{key}")

    if d.kind not in DATASET_KINDS:
        err(f"unknown dataset kind {d.kind!r}; choose from {', '.join(DATASET_KINDS)}", "dataset.kind")
    allowed = DATASET_PARAMS[d.kind]
    bad = set(d.params) - set(allowed)
    if bad:
        err(f"unknown parameter(s) for {d.kind}: {', '.join(sorted(bad))}", "dataset.params")
    d.params = {**allowed, **d.params}
    if d.kind == "csv" and not d.params["path"]:
        err("csv datasets need a path", "dataset.params.path")
    if d.seed is None:
        d.seed = cfg.master_seed

    if p.mode not in PARTITION_MODES:
        err(f"unknown partition mode {p.mode!r}", "partition.mode")
    if p.clients < 1:
        err("need at least one client", "partition.clients")
    if p.mode == "shards":
        if p.concentration is not None:
            err("concentration only applies to mode = 'dirichlet'", "partition.concentration")
        p.shards_per_client = 2 if p.shards_per_client is None else p.shards_per_client
        if p.shards_per_client < 1:
            err("must be >= 1", "partition.shards_per_client")
    elif p.mode == "dirichlet":
        if p.shards_per_client is not None:
            err("shards_per_client only applies to mode = 'shards'", "partition.shards_per_client")
        p.concentration = 0.5 if p.concentration is None else float(p.concentration)
        if p.concentration <= 0:
            err("must be positive", "partition.concentration")
    elif p.shards_per_client is not None or p.concentration is not None:
        err("iid partitions take neither shards_per_client nor concentration", "partition.mode")
    if not 0 <= p.client_test_fraction < 1:
        err("must lie in [0, 1)", "partition.client_test_fraction")
    if p.seed is None:
        p.seed = cfg.master_seed

    flat_input = d.kind != "mixture"
    if m.decomposed is None:
        m.decomposed = not flat_input
    if m.atoms is not None and not m.decomposed:
        err("atoms requires decomposed = true", "model.atoms")
    if m.atoms is None and m.decomposed:
        m.atoms = 9
    if m.conv is None:
        if flat_input:
            m.conv = []
        else:
            c = d.params["channels"]
            atoms = m.atoms or 9
            m.conv = [[c, 8, 3, atoms, 1, 1], [8, 16, 3, atoms, 2, 1]]
    for i, layer in enumerate(m.conv):
        if not (isinstance(layer, list) and len(layer) == 6 and all(
                isinstance(v, int) and not isinstance(v, bool) for v in layer)):
            err("each layer is [in, out, kernel, atoms, stride, pad] integers", f"model.conv[{i}]")
    if m.conv and flat_input:
        err(f"{d.kind} data is flat; conv layers need image input", "model.conv")
    if m.decomposed and not m.conv:
        err("decomposition needs at least one conv layer", "model.decomposed")
    if m.head_bias is None:
        # the 2-D task uses the two-parameter model w . x
        m.head_bias = d.kind != "synthetic2d"
    if m.loss is None:
        m.loss = "mse" if d.kind == "synthetic2d" else "cross_entropy"
    if m.loss not in ("cross_entropy", "mse"):
        err(f"unknown loss {m.loss!r}", "model.loss")

    if f.strategy not in STRATEGIES:
        err(f"unknown strategy {f.strategy!r}; choose from {', '.join(STRATEGIES)}", "federation.strategy")
    if f.strategy != "plain" and not m.decomposed:
        err(f"strategy {f.strategy!r} needs model.decomposed = true", "federation.strategy")
    if f.beta is not None and f.strategy != "fast_slow":
        err("beta only applies to strategy = 'fast_slow'", "federation.beta")
    if f.strategy == "fast_slow":
        f.beta = 1.0 if f.beta is None else float(f.beta)
        if not 0 < f.beta <= 1:
            err("must lie in (0, 1]", "federation.beta")
    personal = f.strategy == "personalized"
    if not personal and (f.personal_head is not None or f.personal_epochs is not None):
        err("personal_* keys need strategy = 'personalized'", "federation.strategy")
    if personal:
        f.personal_head = bool(f.personal_head)
    if f.rounds < 0:
        err("must be >= 0", "federation.rounds")
    if not 0 < f.fraction <= 1:
        err("must lie in (0, 1]", "federation.fraction")
    if f.epochs < 1 or f.batch_size < 1:
        err("epochs and batch_size must be >= 1", "federation")
    if f.lr < 0 or not 0 <= f.momentum < 1 or f.mu_prox < 0:
        err("need lr >= 0, 0 <= momentum < 1, mu_prox >= 0", "federation")
    if f.lr_schedule not in ("constant", "theoretical"):
        err(f"unknown schedule {f.lr_schedule!r}", "federation.lr_schedule")
    if f.variance_repeats == 1 or f.variance_repeats < 0:
        err("0 (off) or >= 2", "federation.variance_repeats")
    if f.workers < 1:
        err("must be >= 1", "federation.workers")
    if f.check_identity and f.strategy == "plain":
        err("the latent-client identity needs a decomposed strategy", "federation.check_identity")
    if cfg.output.checkpoint_every < 0:
        err("must be >= 0", "output.checkpoint_every")


def parse_value(text: str):
    """Command-line override value: JSON if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Merge ``[("section.key", value), ...]`` into a raw config mapping."""
    raw = json.loads(json.dumps(raw))
    for dotted, value in overrides:
        parts = dotted.split(".")
        if dotted == "master_seed":
            raw["master_seed"] = value
            continue
        if len(parts) < 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"override must look like section.key, got {dotted!r}", "<flags>")
        node = raw.setdefault(parts[0], {})
        for part in parts[1:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return raw


def load_raw(path) -> dict:
    path = Path(path)
    data = path.read_bytes()
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            return tomllib.loads(data.decode())
        if suffix == ".json":
            return json.loads(data)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed file: {exc}", str(path)) from None
    raise ConfigError("config must end in .toml or .json", str(path))


def parse_config(path, overrides=()) -> ExperimentConfig:
    """Load a TOML or JSON config, apply overrides, validate, fill defaults."""
    raw = apply_overrides(load_raw(path), overrides)
    return from_dict(raw, str(path))
