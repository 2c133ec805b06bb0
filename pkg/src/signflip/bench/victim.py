"""Model directories and the pinned desk victim.

A model directory holds ``model.safetensors``, ``manifest.json`` and
``dataset.json`` (dataset spec, training config and the accuracies measured
right after training).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from ..errors import DataError
from ..nnengine import Dataset, Model, accuracy
from ..tensorstore import load_archive, load_manifest, save_archive, save_manifest
from .data import SyntheticDatasetSpec, gen_dataset, split
from .train import TrainConfig, desk_cnn_manifest, train

ARCHIVE_FILE = "model.safetensors"
MANIFEST_FILE = "manifest.json"
DATASET_FILE = "dataset.json"


@dataclass
class Victim:
    model: Model
    train: Dataset
    test: Dataset
    dataset_spec: SyntheticDatasetSpec
    train_config: TrainConfig
    train_acc: float | None = None
    test_acc: float | None = None


def train_desk_victim(spec: SyntheticDatasetSpec = SyntheticDatasetSpec(),
                      hyper: TrainConfig = TrainConfig()) -> Victim:
    tr, te = split(gen_dataset(spec))
    arch = desk_cnn_manifest(spec.image_size, spec.classes)
    model, _ = train(arch, tr, hyper)
    return Victim(model, tr, te, spec, hyper, accuracy(model, tr), accuracy(model, te))


def save_victim(v: Victim, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_archive(v.model.params, out / ARCHIVE_FILE)
    save_manifest(v.model.manifest, out / MANIFEST_FILE)
    meta = {"dataset": v.dataset_spec.to_json(), "train": v.train_config.to_json(),
            "train_acc": v.train_acc, "test_acc": v.test_acc}
    (out / DATASET_FILE).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_victim(model_dir: str | os.PathLike, archive_path: str | os.PathLike | None = None) -> Victim:
    d = Path(model_dir)
    for name in (MANIFEST_FILE, DATASET_FILE):
        if not (d / name).is_file():
            raise DataError(f"model directory {d} lacks {name}")
    manifest = load_manifest(d / MANIFEST_FILE)
    archive = load_archive(archive_path if archive_path is not None else d / ARCHIVE_FILE)
    try:
        meta = json.loads((d / DATASET_FILE).read_text(encoding="utf-8"))
        spec = SyntheticDatasetSpec(**meta["dataset"])
        hyper = TrainConfig(**meta["train"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{d / DATASET_FILE}: {exc}") from exc
    tr, te = split(gen_dataset(spec))
    return Victim(Model(manifest, archive), tr, te, spec, hyper, meta.get("train_acc"), meta.get("test_acc"))


def pinned_desk_victim(cache_dir: str | os.PathLike | None = None) -> Victim:
    """The default desk victim; trained once and cached when ``cache_dir`` is given."""
    if cache_dir is not None and (Path(cache_dir) / MANIFEST_FILE).is_file():
        return load_victim(cache_dir)
    v = train_desk_victim()
    if cache_dir is not None:
        save_victim(v, cache_dir)
    return v
