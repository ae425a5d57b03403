"""Named-tensor archive used for checkpoints and backbone assets.

Layout (a zip file)::

    manifest.json        {"format_version", "metadata", "tensors": [...]}
    tensors/000000.bin   raw little-endian bytes, C order

Each manifest entry records ``name``, ``shape``, ``dtype`` and ``byteorder``.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def write_archive(path, tensors: Mapping[str, torch.Tensor], metadata: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, t) in enumerate(tensors.items()):
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
            arr = t.numpy()
            if arr.dtype.byteorder == ">":
                arr = arr.byteswap().view(arr.dtype.newbyteorder("<"))
            fname = f"tensors/{i:06d}.bin"
            zf.writestr(fname, arr.tobytes(order="C"))
            entries.append(
                {
                    "name": name,
                    "shape": list(t.shape),
                    "dtype": _DTYPES[t.dtype],
                    "byteorder": "little",
                    "file": fname,
                }
            )
        manifest = {
            "format_version": FORMAT_VERSION,
            "metadata": dict(metadata or {}),
            "tensors": entries,
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def read_archive(path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
            tensors = {}
            for e in manifest["tensors"]:
                dtype = np.dtype(e["dtype"]).newbyteorder("<")
                raw = zf.read(e["file"])
                arr = np.frombuffer(raw, dtype=dtype).reshape(e["shape"])
                tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
                if tensors[e["name"]].dtype != _TORCH_DTYPES[e["dtype"]]:
                    raise CheckpointError(f"{path}: dtype mismatch for {e['name']!r}")
    except (zipfile.BadZipFile, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return tensors, manifest["metadata"]
