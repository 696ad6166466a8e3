"""Parameter archives: a zip holding ``manifest.json`` and one raw little-endian f64 blob."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from . import tensor as tn
from .exceptions import FormatError

CHECKPOINT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_checkpoint(path, params, config, extras=None):
    """Write named tensors plus a JSON-serialisable ``config`` and optional ``extras``.

    Tensors are stored back to back in name order inside ``params.bin``; the
    manifest records each name, shape and element offset.
    """
    names = sorted(params)
    arrays = [np.asarray(tn.as_tensor(params[k]).data, dtype=_LE_F64, order="C") for k in names]
    entries, offset = [], 0
    for name, arr in zip(names, arrays):
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {"version": CHECKPOINT_VERSION, "dtype": "<f8", "config": config,
                "tensors": entries, "extras": extras or {}}
    blob = b"".join(a.tobytes() for a in arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_fixed_info("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        zf.writestr(_fixed_info("params.bin"), blob)
    return path


def _fixed_info(name):
    # constant timestamps keep archives byte-identical across runs
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def load_checkpoint(path):
    """Return ``(params, config, extras)`` with params as trainable tensors."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("params.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a valid checkpoint ({exc})") from None
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version!r}")
    flat = np.frombuffer(blob, dtype=_LE_F64)
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + size > flat.size:
            raise FormatError(f"{path}: tensor {entry['name']} runs past the payload")
        data = flat[start:start + size].astype(np.float64).reshape(shape)
        params[entry["name"]] = tn.Tensor(data, requires_grad=True)
    return params, manifest["config"], manifest.get("extras", {})
