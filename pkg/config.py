from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Literal, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Section):
    """Sorgente del grafo: una cartella su disco (path) oppure il CSBM sintetico."""

    path: Path | None = None
    synthetic: bool = True
    dim: int = Field(default=8, gt=0)
    mu_norm: float = Field(default=3.0, ge=0.0)
    n_per_class: int = Field(default=200, gt=0)
    num_id_classes: int = Field(default=3, ge=2)
    ood_size: int = Field(default=200, ge=0)
    p_in: float = Field(default=0.05, ge=0.0, le=1.0)
    p_out: float = Field(default=0.005, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self) -> "DatasetConfig":
        if self.path is None and not self.synthetic:
            raise ValueError("serve dataset.path oppure dataset.synthetic=true")
        if self.p_out > self.p_in:
            raise ValueError("p_out deve essere <= p_in")
        return self


class SplitConfig(_Section):
    ood_classes: tuple[int, ...] | None = None
    n_ood: int = Field(default=1, ge=0)
    ood_setting: Literal["last", "first", "random"] = "last"
    per_class_train: int = Field(default=20, gt=0)
    val_fraction: float = Field(default=1.0, ge=0.0, le=1.0)
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    seed: int | None = None


class _TrainSection(_Section):
    lr: float = Field(default=1e-3, ge=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    patience: int = Field(default=50, ge=0)
    min_delta: float = Field(default=0.0, ge=0.0)
    max_epochs: int = Field(default=1000, gt=0)
    log_every: int = Field(default=0, ge=0)


class BackboneConfig(_TrainSection):
    hidden_dim: int = Field(default=64, gt=0)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)


class EgnnConfig(_TrainSection):
    hidden_dim: int = Field(default=64, gt=0)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    activation: Literal["exp", "softplus"] = "exp"
    kl_weight: float = Field(default=1.0, ge=0.0)
    zero_init_head: bool = False


class ProbeConfig(_TrainSection):
    feature_layer: Literal["last", "second_to_last"] = "last"
    final_activation: Literal["none", "exp", "softplus"] = "none"
    freeze_w2b2: bool = True
    lambda1: float = Field(default=1e-2, ge=0.0)
    lambda2: float = Field(default=1e-2, ge=0.0)
    e_id: float = Field(default=100.0, ge=0.0)
    e_ood: float = Field(default=0.0, ge=0.0)
    stability_offset: float = Field(default=1.0, ge=0.0)
    lr: float = Field(default=1e-2, ge=0.0)

    @model_validator(mode="after")
    def _check_margins(self) -> "ProbeConfig":
        if not self.e_id > self.e_ood:
            raise ValueError("serve e_id > e_ood")
        return self


class PropConfig(_Section):
    mode: Literal["none", "vacuity", "evidence", "both"] = "none"
    gamma1: float = Field(default=0.5, ge=0.0, le=1.0)
    k1: int = Field(default=2, ge=0)
    gamma2: float = Field(default=0.1, ge=0.0, le=1.0)
    k2: int = Field(default=10, ge=0)


class EvalConfig(_Section):
    ece_bins: int = Field(default=10, gt=0)
    methods: tuple[str, ...] = ("epn", "epn-reg", "egnn", "entropy", "max-score", "energy", "gnnsafe")
    propagation_modes: tuple[Literal["none", "vacuity", "evidence", "both"], ...] = ("none",)
    energy_temperature: float = Field(default=1.0, gt=0.0)
    gnnsafe_gamma: float = Field(default=0.2, ge=0.0, le=1.0)
    gnnsafe_k: int = Field(default=2, ge=0)


class RunConfig(_Section):
    dataset: DatasetConfig = DatasetConfig()
    split: SplitConfig = SplitConfig()
    backbone: BackboneConfig = BackboneConfig()
    probe: ProbeConfig = ProbeConfig()
    egnn: EgnnConfig = EgnnConfig()
    propagation: PropConfig = PropConfig()
    eval: EvalConfig = EvalConfig()
    output_dir: Path = Path("outputs")
    seed: int = 0

    def split_seed(self) -> int:
        return self.seed if self.split.seed is None else int(self.split.seed)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "Configurazione non valida:\n  " + "\n  ".join(lines)


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"Override non valido {item!r}: atteso a.b.c=valore")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"Override senza chiave: {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(data: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Applica --set a.b.c=valore (valore decodificato come JSON, altrimenti stringa) su una copia di data."""
    data = copy.deepcopy(data)
    for item in overrides:
        path, value = _parse_override(item)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"Override {item!r}: {part!r} non è una sezione")
            node = child
        node[path[-1]] = value
    return data


def build_config(data: dict[str, Any] | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    payload = apply_overrides(data or {}, overrides)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    if path is None:
        return build_config({}, overrides)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config non trovata: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON non valido in {path}: riga {exc.lineno}, colonna {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: atteso un oggetto JSON alla radice")
    return build_config(data, overrides)
