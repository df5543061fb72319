"""Deterministic single-file archives for parameter arrays.

An archive is an uncompressed zip holding one ``.npy`` member per array (keyed
by its hierarchical dotted name) and a ``metadata.json`` member. Member order
and timestamps are fixed so that identical inputs give identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_META = "metadata.json"


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; give the file ordinary permissions
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_archive(arrays: dict, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        meta = dict(metadata or {})
        meta.setdefault("format_version", FORMAT_VERSION)
        zf.writestr(_member(_META), canonical_json(meta).encode())
        for name in sorted(arrays):
            arr = np.ascontiguousarray(np.asarray(arrays[name]))
            member = io.BytesIO()
            np.lib.format.write_array(member, arr, allow_pickle=False)
            zf.writestr(_member(f"{name}.npy"), member.getvalue())
    return buf.getvalue()


def save_archive(path, arrays: dict, metadata: dict | None = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, dumps_archive(arrays, metadata))
    return path


def load_archive(path) -> tuple[dict, dict]:
    """Return ``(arrays, metadata)``."""
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        metadata = json.loads(zf.read(_META))
        for name in zf.namelist():
            if name == _META:
                continue
            with zf.open(name) as fh:
                arrays[name[: -len(".npy")]] = np.lib.format.read_array(
                    io.BytesIO(fh.read()), allow_pickle=False
                )
    return arrays, metadata


def state_dict_to_arrays(module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_arrays_into(module, arrays: dict, prefix: str = "") -> None:
    import torch

    state = {
        k[len(prefix):]: torch.from_numpy(np.array(v))
        for k, v in arrays.items()
        if k.startswith(prefix)
    }
    module.load_state_dict(state)
