"""Named-tensor archive: length-prefixed JSON manifest + raw f32 payload.

File layout::

    [u64 little-endian: manifest byte length]
    [UTF-8 JSON manifest: {name: {"shape": [...], "dtype": "f32", "offset": N}}]
    [zero padding to the first 64-byte boundary]
    [tensor payloads, little-endian float32, each starting 64-byte aligned]

Offsets are absolute file positions and always multiples of 64.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np
import torch

from .errors import ArchiveError

_ALIGN = 64


def _align(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def write_archive(path, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write tensors under their names; values are stored as float32."""
    arrays = {
        name: t.detach().to(torch.float32).contiguous().cpu().numpy().astype("<f4")
        for name, t in tensors.items()
    }
    # Offsets depend on the manifest length, which depends on the offsets;
    # iterate until the layout is stable (digit widths converge quickly).
    offsets = {name: 0 for name in arrays}
    for _ in range(8):
        manifest = json.dumps(
            {
                name: {"shape": list(a.shape), "dtype": "f32", "offset": offsets[name]}
                for name, a in arrays.items()
            }
        ).encode("utf-8")
        pos = _align(8 + len(manifest))
        new_offsets = {}
        for name, a in arrays.items():
            new_offsets[name] = pos
            pos = _align(pos + a.nbytes)
        if new_offsets == offsets:
            break
        offsets = new_offsets
    else:  # pragma: no cover - layout always converges
        raise ArchiveError("archive layout did not converge")

    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for name, a in arrays.items():
            pad = offsets[name] - fh.tell()
            if pad < 0:  # pragma: no cover
                raise ArchiveError("internal layout error")
            fh.write(b"\x00" * pad)
            fh.write(a.tobytes())


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise ArchiveError(f"{path}: too short for a manifest length prefix")
        (length,) = struct.unpack("<Q", head)
        raw = fh.read(length)
    if len(raw) < length:
        raise ArchiveError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: malformed manifest ({exc})") from exc
    if not isinstance(manifest, dict):
        raise ArchiveError(f"{path}: manifest must be a JSON object")
    return manifest


def read_archive(path) -> dict[str, torch.Tensor]:
    """Load every tensor in the archive; validates offsets and payload size."""
    manifest = read_manifest(path)
    with open(path, "rb") as fh:
        data = fh.read()
    out: dict[str, torch.Tensor] = {}
    for name, entry in manifest.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            dtype = entry["dtype"]
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"{path}: bad manifest entry for {name!r}: {exc}") from exc
        if dtype != "f32":
            raise ArchiveError(f"{path}: {name!r} has unsupported dtype {dtype!r}")
        if offset % _ALIGN:
            raise ArchiveError(f"{path}: {name!r} offset {offset} is not 64-byte aligned")
        count = 1
        for s in shape:
            count *= s
        end = offset + 4 * count
        if end > len(data):
            raise ArchiveError(
                f"{path}: truncated payload for {name!r} (needs bytes up to {end}, file has {len(data)})"
            )
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[name] = torch.from_numpy(arr.copy())
    return out


def save_weights(model: torch.nn.Module, path) -> None:
    """Archive every named parameter of the model."""
    write_archive(path, dict(model.named_parameters()))


def load_weights(
    model: torch.nn.Module, path, rename: Mapping[str, str] | None = None
) -> torch.nn.Module:
    """Load an archive into the model's parameters, bit-exact.

    ``rename`` maps archive tensor names to model parameter names (e.g. a
    teacher->student inheritance map).  Name or shape mismatches are
    collected and reported together.
    """
    tensors = read_archive(path)
    if rename is not None:
        missing_src = [n for n in rename if n not in tensors]
        if missing_src:
            raise ArchiveError(f"{path}: rename sources absent from archive: {sorted(missing_src)}")
        tensors = {rename[n]: t for n, t in tensors.items() if n in rename}
    params = dict(model.named_parameters())
    problems = []
    for name in sorted(set(params) - set(tensors)):
        problems.append(f"missing tensor {name}")
    for name in sorted(set(tensors) - set(params)):
        problems.append(f"unknown tensor {name}")
    for name in sorted(set(params) & set(tensors)):
        if tuple(tensors[name].shape) != tuple(params[name].shape):
            problems.append(
                f"shape mismatch {name}: archive {tuple(tensors[name].shape)} "
                f"vs model {tuple(params[name].shape)}"
            )
    if problems:
        raise ArchiveError(f"{path}: " + "; ".join(problems))
    with torch.no_grad():
        for name, param in params.items():
            param.copy_(tensors[name])
    return model
