"""Run configuration documents (JSON)."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import Dataset, DelimitedSchema, load_delimited, load_idx, synth_blobs
from .expr import TreeConstraints
from .fitness import ExperimentSpec, RangeCheckSpec
from .gp import GpConfig
from .nn import TrainConfig


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"seed", "output_dir", "gp", "experiment", "trainer", "range_check", "datasets"}
_DATASET_KINDS = {
    "blobs": {"class_count", "samples_per_class", "dims", "spread", "seed"},
    "delimited": {"path", "delimiter", "label_column", "header", "normalize", "class_count"},
    "idx": {"images", "labels", "normalize"},
}


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    take: int | None = None

    def load(self, base_dir: Path = Path(".")) -> Dataset:
        p = dict(self.params)
        if self.kind == "blobs":
            return synth_blobs(p.get("class_count", 3), p.get("samples_per_class", 200),
                               p.get("dims", 2), p.get("spread", 3.0), p.get("seed", 0),
                               name=self.name).take(self.take)
        if self.kind == "delimited":
            path = base_dir / p.pop("path")
            return load_delimited(path, DelimitedSchema(take=self.take, **p), name=self.name)
        return load_idx(base_dir / p["images"], base_dir / p["labels"], take=self.take,
                        normalize=p.get("normalize", True), name=self.name)


@dataclass(frozen=True)
class RunConfig:
    gp: GpConfig
    experiment: ExperimentSpec
    datasets: tuple[DatasetEntry, ...]
    range_check: RangeCheckSpec = RangeCheckSpec()
    output_dir: str = "runs"
    seed: int = 0
    base_dir: Path = Path(".")
    text: str = ""

    def load_datasets(self) -> dict[str, Dataset]:
        wanted = set(self.experiment.datasets)
        return {d.name: d.load(self.base_dir) for d in self.datasets if d.name in wanted}

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, seed=seed,
            gp=dataclasses.replace(self.gp, seed=seed),
            experiment=dataclasses.replace(self.experiment, seed=seed))


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value


def _build(cls, data: Any, where: str, forbidden=("seed",), nested=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(forbidden)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    kwargs = {k: _tupled(v) for k, v in data.items()}
    for key, sub in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = _build(sub, data[key], f"{where}.{key}", forbidden=())
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _dataset_entry(data: Any, where: str) -> DatasetEntry:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    kind = data.get("kind")
    if kind not in _DATASET_KINDS:
        raise ConfigError(f"{where}.kind: must be one of {', '.join(_DATASET_KINDS)}")
    if not isinstance(data.get("name"), str):
        raise ConfigError(f"{where}.name: required string")
    params = {k: v for k, v in data.items() if k not in ("name", "kind", "take")}
    unknown = sorted(set(params) - _DATASET_KINDS[kind])
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key for kind {kind!r}")
    take = data.get("take")
    if take is not None and (not isinstance(take, int) or take < 1):
        raise ConfigError(f"{where}.take: must be a positive integer")
    return DatasetEntry(data["name"], kind, params, take)


def parse_config(doc: dict, base_dir: Path = Path("."), text: str = "") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected an object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: must be an integer")
    trainer = _build(TrainConfig, doc.get("trainer", {}), "trainer")
    exp = _build(ExperimentSpec, doc.get("experiment", {}), "experiment",
                 forbidden=("seed", "trainer", "baseline_errors"))
    exp = dataclasses.replace(exp, trainer=trainer, seed=seed)
    gp = _build(GpConfig, doc.get("gp", {}), "gp", nested={"constraints": TreeConstraints})
    gp = dataclasses.replace(gp, seed=seed)
    rc = _build(RangeCheckSpec, doc.get("range_check", {}), "range_check", forbidden=())
    entries = doc.get("datasets", [])
    if not isinstance(entries, list) or not entries:
        raise ConfigError("datasets: expected a non-empty list")
    datasets = tuple(_dataset_entry(d, f"datasets[{i}]") for i, d in enumerate(entries))
    names = [d.name for d in datasets]
    for name in exp.datasets:
        if name not in names:
            raise ConfigError(f"experiment.datasets: {name!r} is not in the dataset manifest")
    out = doc.get("output_dir", "runs")
    if not isinstance(out, str):
        raise ConfigError("output_dir: must be a string")
    return RunConfig(gp, exp, datasets, rc, out, seed, base_dir, text)


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_config(doc, path.parent, text)
