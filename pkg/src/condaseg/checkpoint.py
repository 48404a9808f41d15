"""Checkpoint archives.

A checkpoint is a zip archive holding ``header.json`` plus one ``.npy`` entry
per named array. Floating point tensors are stored as little-endian float32;
entries are written in sorted order with a fixed timestamp so identical
contents give byte-identical files.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu()
        if value.is_floating_point():
            value = value.to(torch.float32)
        value = value.numpy()
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    return arr.astype(arr.dtype.newbyteorder("<"))


def write_archive(path: str | Path, header: dict, arrays: dict[str, object]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(_to_numpy(arrays[name])),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH), buf.getvalue())
    tmp.replace(path)


def read_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        for name in zf.namelist():
            if name.startswith("arrays/"):
                arrays[name[len("arrays/"):-len(".npy")]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False)
    return header, arrays


def load_into(net: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``prefix``-scoped arrays into ``net``; names and shapes must agree exactly."""
    own = net.state_dict()
    stored = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    if set(stored) != set(own):
        missing, extra = set(own) - set(stored), set(stored) - set(own)
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, t in own.items():
        if tuple(stored[k].shape) != tuple(t.shape):
            raise ValueError(f"shape mismatch for {k}: {stored[k].shape} vs {tuple(t.shape)}")
    net.load_state_dict({k: torch.from_numpy(np.array(v)).to(own[k].dtype) for k, v in stored.items()})


def save_network(path: str | Path, net: nn.Module, architecture: str, arguments: dict,
                 step: int = 0) -> None:
    header = {"architecture": architecture, "arguments": arguments, "step": step}
    write_archive(path, header, dict(net.state_dict()))


def load_network(path: str | Path) -> tuple[nn.Module, dict]:
    from .nets import ARCHITECTURES

    header, arrays = read_archive(path)
    net = ARCHITECTURES[header["architecture"]](**header["arguments"])
    load_into(net, arrays)
    return net, header
