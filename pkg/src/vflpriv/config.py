"""Experiment configuration: schema, defaults, validation and seed splitting.

Configs are JSON documents. Every field is validated before any computation;
errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from vflpriv.data import ADULT_CARDINALITIES, column_kind
from vflpriv.errors import ConfigError, DomainError

LAYER_NAMES = ("linear", "relu", "tanh", "sigmoid", "batchnorm")


def _check_layers(tokens: list[str]) -> list[str]:
    for t in tokens:
        name, _, arg = t.strip().lower().partition(":")
        if name not in LAYER_NAMES:
            raise ValueError(f"unknown layer token {t!r}")
        if name == "linear":
            if not arg.isdigit() or int(arg) < 1:
                raise ValueError(f"linear layer needs a positive width, got {t!r}")
        elif arg:
            raise ValueError(f"layer {name!r} takes no argument")
    return tokens


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(_Strict):
    kind: Literal["purchase_like", "credit_like", "adult_like", "csv"]
    n: Optional[int] = Field(None, ge=2)
    d: Optional[int] = Field(None, ge=2)
    classes: Optional[int] = Field(None, ge=2)
    positive_rate: float = Field(0.00172, gt=0, lt=0.5)
    density: float = Field(0.5, gt=0, lt=1)
    flip: float = Field(0.1, ge=0, lt=0.5)
    coarse_columns: int = Field(0, ge=0)
    coarse_group: int = Field(2, ge=1)
    csv_path: Optional[str] = None
    schema_: Optional[list[str]] = Field(None, alias="schema")

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("schema_")
    @classmethod
    def _schema(cls, v):
        if v is not None:
            for s in v:
                try:
                    column_kind(s)
                except (DomainError, ValueError) as exc:
                    raise ValueError(str(exc)) from None
        return v


class ModelsConfig(_Strict):
    client: list[str] = ["linear:512", "relu"]
    head: list[str] = ["linear:256"]
    trunk: list[str] = ["relu"]
    decoder_hidden: list[str] = ["relu"]

    _v = field_validator("client", "head", "trunk", "decoder_hidden")(classmethod(lambda cls, v: _check_layers(v)))


class TrainConfig(_Strict):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-4, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"


class TargetConfig(_Strict):
    kind: Literal["auto", "binary", "regression", "categorical"] = "auto"
    columns: Optional[list[int]] = None
    n_classes: Optional[int] = Field(None, ge=2)


class AttackConfig(_Strict):
    mode: Literal["none", "static", "adaptive"] = "static"
    alpha: float = Field(0.05, ge=0, le=1)
    victim: Optional[int] = Field(None, ge=0)
    decoder_epochs: int = Field(30, ge=1)
    decoder_lr: Optional[float] = Field(None, gt=0)  # 0.01 static, 1e-4 adaptive
    decoder_batch_size: int = Field(128, ge=1)
    target: TargetConfig = TargetConfig()


class DefenseConfig(_Strict):
    mode: Literal["none", "naive", "basic", "fbs_auto", "fbs_fixed"] = "none"
    lam: float = Field(1.0, ge=0, alias="lambda")
    n2: int = Field(10, ge=0)
    m1: int = Field(1, ge=0)
    m2: int = Field(1, ge=0)
    tau1: float = Field(0.5, gt=0)
    tau2: float = Field(0.5, gt=0)
    tau_lr: float = Field(1e-2, ge=0)
    g_kind: Literal["neg", "inv", "exp"] = "exp"
    prox_kind: Literal["param", "feature"] = "param"
    auto_tau: Optional[bool] = None
    decoder_lr: float = Field(1e-3, gt=0)
    inner_lr: float = Field(1e-3, gt=0)
    inner_optimizer: Literal["adam", "sgd"] = "adam"
    inner_steps: int = Field(10, ge=0)
    decoder_steps: int = Field(10, ge=0)
    clients: Optional[list[int]] = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ExperimentConfig(_Strict):
    dataset: DatasetConfig
    partition: Optional[list[int]] = None
    models: ModelsConfig = ModelsConfig()
    train: TrainConfig = TrainConfig()
    attack: AttackConfig = AttackConfig()
    defense: DefenseConfig = DefenseConfig()
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: Optional[str] = None

    @property
    def n_clients(self) -> int:
        return len(self.partition)

    @property
    def victim(self) -> int:
        return self.attack.victim if self.attack.victim is not None else self.n_clients - 1

    @property
    def task(self) -> str:
        return "multiclass" if self.dataset.kind == "purchase_like" or (self.dataset.classes or 2) > 2 else "binary"

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        """sha256 of the canonical config; where results are written does not count."""
        data = self.model_dump(mode="json", by_alias=True, exclude={"output_dir"})
        canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


_KIND_DEFAULTS = {
    "purchase_like": dict(n=5000, d=600, classes=100),
    "credit_like": dict(n=20000, d=28, classes=2),
    "adult_like": dict(n=5000, d=len(ADULT_CARDINALITIES), classes=2),
    "csv": dict(classes=2),
}


def _resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill kind-dependent defaults and run cross-field checks."""
    ds = cfg.dataset
    for key, val in _KIND_DEFAULTS[ds.kind].items():
        if getattr(ds, key) is None:
            setattr(ds, key, val)
    if ds.kind == "csv":
        if not ds.csv_path:
            raise ConfigError("dataset.csv_path", "required for csv datasets")
        if not ds.schema_:
            raise ConfigError("dataset.schema", "required for csv datasets")
        if ds.d is not None and ds.d != len(ds.schema_):
            raise ConfigError("dataset.d", f"{ds.d} disagrees with schema length {len(ds.schema_)}")
        ds.d = len(ds.schema_)
    if ds.kind == "adult_like" and ds.d != len(ADULT_CARDINALITIES):
        raise ConfigError("dataset.d", f"adult_like has exactly {len(ADULT_CARDINALITIES)} attributes")
    if ds.kind == "credit_like" and ds.classes != 2:
        raise ConfigError("dataset.classes", "credit_like is a binary task")
    if ds.kind == "purchase_like":
        if ds.n < ds.classes:
            raise ConfigError("dataset.n", f"need n >= classes ({ds.n} < {ds.classes})")
        if ds.coarse_columns >= ds.d:
            raise ConfigError("dataset.coarse_columns", "must be smaller than d")
    if ds.kind == "credit_like" and ds.n * ds.positive_rate < 1:
        raise ConfigError("dataset.positive_rate", "n * positive_rate must give at least one positive")
    if cfg.partition is None:
        cfg.partition = [ds.d // 2, ds.d - ds.d // 2]
    if len(cfg.partition) < 1 or any(w < 1 for w in cfg.partition) or sum(cfg.partition) != ds.d:
        raise ConfigError("partition", f"widths {cfg.partition} must be positive and sum to d={ds.d}")
    m = len(cfg.partition)
    if cfg.attack.victim is not None and cfg.attack.victim >= m:
        raise ConfigError("attack.victim", f"no client {cfg.attack.victim} among {m}")
    tgt = cfg.attack.target
    if tgt.columns is not None:
        width = cfg.partition[cfg.victim]
        bad = [c for c in tgt.columns if not 0 <= c < width]
        if bad or not tgt.columns:
            raise ConfigError("attack.target.columns", f"columns must index the victim's {width} attributes")
    if cfg.attack.decoder_lr is None:
        cfg.attack.decoder_lr = 1e-4 if cfg.attack.mode == "adaptive" else 0.01
    if tgt.kind == "categorical" and tgt.columns is not None and len(tgt.columns) != 1:
        raise ConfigError("attack.target.columns", "categorical targets name exactly one attribute")
    dfn = cfg.defense
    if dfn.auto_tau is None:
        dfn.auto_tau = dfn.mode != "fbs_fixed"
    elif dfn.mode == "fbs_fixed" and dfn.auto_tau:
        raise ConfigError("defense.auto_tau", "fbs_fixed holds the step weights fixed")
    elif dfn.mode == "fbs_auto" and not dfn.auto_tau:
        raise ConfigError("defense.auto_tau", "fbs_auto updates the step weights")
    if dfn.clients is not None:
        bad = [c for c in dfn.clients if not 0 <= c < m]
        if bad:
            raise ConfigError("defense.clients", f"unknown clients {bad}")
    if cfg.train.batch_size < 2 and any("batchnorm" in t for t in cfg.models.client + cfg.models.head + cfg.models.trunk):
        raise ConfigError("train.batch_size", "batch normalisation needs batches of at least 2")
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(path, err["msg"]) from None
    return _resolve(cfg)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"{path}: no such file")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(data)


def sub_seed(master: int, label: str) -> int:
    """Derive an independent 63-bit seed for ``label`` from the master seed."""
    h = hashlib.blake2b(label.encode(), key=int(master).to_bytes(8, "little"), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


SEED_LABELS = ("data", "split", "init", "batching", "attack", "defense")


def split_seeds(master: int) -> dict[str, int]:
    return {label: sub_seed(master, label) for label in SEED_LABELS}
