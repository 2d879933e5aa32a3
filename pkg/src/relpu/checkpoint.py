"""Model checkpoints: one .npz per snapshot, written atomically.

Layout inside the archive: ``param/<name>`` arrays for every named model
parameter, ``opt/<key>`` arrays when optimizer state is included, and a
``meta`` JSON string carrying the model configuration plus caller extras
(epoch counters and the like).
"""

from __future__ import annotations

import io
import json
import os

import numpy as np

from .autodiff import Adam
from .exceptions import InvalidModel
from .network import ModelVariant, build_variant

FORMAT_VERSION = 1


def save_checkpoint(path, model: ModelVariant, optimizer: Adam | None = None,
                    extra: dict | None = None) -> None:
    arrays = {}
    for name, buf in model.named_parameters():
        arrays[f"param/{name}"] = buf.value
    if optimizer is not None:
        for key, value in optimizer.state_dict().items():
            arrays[f"opt/{key}"] = np.asarray(value)
    meta = {
        "format_version": FORMAT_VERSION,
        "model": model.config(),
        "has_optimizer": optimizer is not None,
        "extra": dict(extra or {}),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _read_meta(npz) -> dict:
    if "meta" not in npz:
        raise InvalidModel("checkpoint has no metadata entry")
    try:
        meta = json.loads(str(npz["meta"][()]))
    except json.JSONDecodeError as exc:
        raise InvalidModel(f"corrupt checkpoint metadata: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise InvalidModel(
            f"unsupported checkpoint format {meta.get('format_version')!r}")
    return meta


def load_checkpoint(path, with_optimizer: bool = False,
                    ) -> tuple[ModelVariant, Adam | None, dict]:
    """Rebuild a model (and optionally its optimizer) from a snapshot.

    Returns (model, optimizer or None, extra). The optimizer is a fresh
    Adam over the rebuilt parameters with moments, step count, and
    learning rate restored, ready to resume training.
    """
    if not os.path.exists(path):
        raise InvalidModel(f"checkpoint not found: {path}")
    try:
        npz = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise InvalidModel(f"unreadable checkpoint: {exc}") from None
    with npz:
        meta = _read_meta(npz)
        model = build_variant(**meta["model"])
        for name, buf in model.named_parameters():
            key = f"param/{name}"
            if key not in npz:
                raise InvalidModel(f"checkpoint missing parameter {name}")
            stored = npz[key]
            if stored.shape != buf.value.shape:
                raise InvalidModel(
                    f"parameter {name} has shape {stored.shape}, "
                    f"expected {buf.value.shape}")
            buf.value[...] = stored
        optimizer = None
        if with_optimizer:
            if not meta["has_optimizer"]:
                raise InvalidModel("checkpoint carries no optimizer state")
            state = {key[len("opt/"):]: npz[key] for key in npz.files
                     if key.startswith("opt/")}
            optimizer = Adam(model.parameters())
            try:
                optimizer.load_state_dict(state)
            except KeyError as exc:
                raise InvalidModel(
                    f"checkpoint optimizer state missing {exc}") from None
    return model, optimizer, meta["extra"]
