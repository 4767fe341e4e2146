"""Single-file checkpoint archive.

A zip (stored, fixed timestamps) holding ``metadata.json`` plus one ``.npy``
member per array, keyed by module path. Writing the same state twice gives the
same bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import DataError

VERSION = "eps-seg-ckpt-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_archive(path, metadata: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata, version=VERSION, arrays=sorted(arrays))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _member(zf, "metadata.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for key in sorted(arrays):
            _member(zf, f"arrays/{key}.npy", _npy(arrays[key]))
    tmp.replace(path)
    return path


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("metadata.json"))
            if meta.get("version") != VERSION:
                raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
            arrays = {
                key: np.load(io.BytesIO(zf.read(f"arrays/{key}.npy")), allow_pickle=False)
                for key in meta["arrays"]
            }
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataError(f"{path}: not a valid checkpoint archive ({exc})") from exc
    return meta, arrays


# ---------------------------------------------------------------- torch state <-> arrays


def module_arrays(module: torch.nn.Module, prefix: str = "model/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict, prefix: str = "model/") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str = "optim/") -> tuple[dict, dict[str, np.ndarray]]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for name, val in st.items():
            arrays[f"{prefix}{idx}/{name}"] = torch.as_tensor(val).detach().cpu().numpy()
    return {"param_groups": sd["param_groups"]}, arrays


def load_optimizer_arrays(opt: torch.optim.Optimizer, meta: dict, arrays: dict, prefix: str = "optim/") -> None:
    state: dict[int, dict[str, Any]] = {}
    for key, val in arrays.items():
        if not key.startswith(prefix):
            continue
        idx, name = key[len(prefix):].split("/", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(val.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
