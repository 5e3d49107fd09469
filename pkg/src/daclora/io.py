"""Versioned checkpoint and dataset snapshot files (numpy ``.npz``, no pickling).

Each file stores its arrays verbatim plus a JSON header under ``__meta__``
holding a magic string and an integer format version. Readers refuse any
other magic or version.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import FewShotDataset
from .model import DualEncoderModel, LoraLinear

CHECKPOINT_MAGIC = "daclora-checkpoint"
DATASET_MAGIC = "daclora-dataset"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_meta(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)


def _read(path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing header")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("magic") != magic:
        raise CheckpointError(f"{path}: not a {magic} file (magic={meta.get('magic')!r})")
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('version')!r}, "
                              f"this reader understands version {FORMAT_VERSION}")
    return meta, arrays


def _write(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=_encode_meta(meta), **arrays)
    return path


def save_checkpoint(model: DualEncoderModel, path, extra: dict | None = None) -> Path:
    arrays: dict[str, np.ndarray] = {"class_embeddings": model.class_embeddings.data}
    layers_meta = []
    for i, layer in enumerate(model.lora_layers()):
        name = "text" if layer is model.text_adapter else f"layer{i}"
        for part in ("W", "bias", "A", "B"):
            t = getattr(layer, part)
            if t is not None:
                arrays[f"{name}.{part}"] = t.data
        layers_meta.append({"name": name, "gamma": layer.gamma, "rank": layer.rank,
                            "shape": [layer.d_out, layer.d_in], "has_bias": layer.bias is not None})
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": FORMAT_VERSION,
        "tau": model.tau,
        "layers": layers_meta,
        "frozen": sorted(k for k in arrays if not k.endswith((".A", ".B"))),
        "trainable": sorted(k for k in arrays if k.endswith((".A", ".B"))),
        "extra": extra or {},
    }
    return _write(path, meta, arrays)


def load_checkpoint(path) -> DualEncoderModel:
    meta, arrays = _read(path, CHECKPOINT_MAGIC)
    layers, text = [], None
    try:
        for lm in meta["layers"]:
            n = lm["name"]
            layer = LoraLinear(arrays[f"{n}.W"], arrays.get(f"{n}.bias"), arrays[f"{n}.A"], arrays[f"{n}.B"], lm["gamma"])
            if n == "text":
                text = layer
            else:
                layers.append(layer)
        model = DualEncoderModel(layers, arrays["class_embeddings"], meta["tau"], text)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    for layer in model.lora_layers():
        for t in (layer.W, layer.bias):
            if t is not None:
                t.requires_grad = False
    return model


def checkpoint_meta(path) -> dict:
    return _read(path, CHECKPOINT_MAGIC)[0]


_DATASET_ARRAYS = ("x_train", "y_train", "x_test", "y_test", "x_pretrain", "y_pretrain")


def save_dataset(ds: FewShotDataset, path, generator: dict | None = None) -> Path:
    meta = {"magic": DATASET_MAGIC, "version": FORMAT_VERSION, "num_classes": ds.num_classes, "shots": ds.shots,
            "side": ds.side, "seed": ds.seed, "difficulty": ds.difficulty, "generator": generator or {}}
    return _write(path, meta, {k: getattr(ds, k) for k in _DATASET_ARRAYS})


def load_dataset(path) -> FewShotDataset:
    meta, arrays = _read(path, DATASET_MAGIC)
    return FewShotDataset(meta["num_classes"], meta["shots"], meta["side"], meta["seed"], meta["difficulty"],
                          **{k: arrays[k] for k in _DATASET_ARRAYS})
