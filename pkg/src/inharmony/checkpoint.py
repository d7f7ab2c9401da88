"""Checkpoint container: a text manifest plus one raw little-endian f32 file per tensor.

Manifest layout::

    <name>\tf32\t<d0,d1,...>\t<relative file>      one line per parameter
    [optimizer]
    step\t<int>
    m:<name>\tf32\t<dims>\t<relative file>          Adam first moment
    v:<name>\tf32\t<dims>\t<relative file>          Adam second moment

The optimizer section is optional. Loading into a store refuses names the
store does not know and reports names the checkpoint lacks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffcore import ParamStore

MANIFEST = "manifest.txt"
OPT_HEADER = "[optimizer]"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments: dict[str, dict[str, np.ndarray]] = field(default_factory=lambda: {"m": {}, "v": {}})
    step: int | None = None


def _write_tensor(root: Path, rel: str, arr: np.ndarray) -> str:
    dims = ",".join(str(d) for d in arr.shape)
    (root / rel).parent.mkdir(parents=True, exist_ok=True)
    (root / rel).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return dims


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.float32)


def save_tensors(path, tensors: dict, moments: dict | None = None, step: int | None = None) -> None:
    """Write ``tensors`` (name -> array) and optional Adam state under directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        rel = f"params/{name}.f32"
        lines.append(f"{name}\tf32\t{_write_tensor(root, rel, _to_numpy(tensors[name]))}\t{rel}")
    if moments is not None or step is not None:
        lines.append(OPT_HEADER)
        lines.append(f"step\t{int(step or 0)}")
        for kind in ("m", "v"):
            for name in sorted((moments or {}).get(kind, {})):
                rel = f"optim/{kind}.{name}.f32"
                arr = _to_numpy(moments[kind][name])
                lines.append(f"{kind}:{name}\tf32\t{_write_tensor(root, rel, arr)}\t{rel}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def _read_tensor(root: Path, dims: str, rel: str) -> np.ndarray:
    shape = tuple(int(d) for d in dims.split(",")) if dims else ()
    try:
        raw = (root / rel).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"missing tensor file {rel}") from exc
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"{rel}: {arr.size} values, expected shape {shape}")
    return arr.reshape(shape).astype(np.float32)


def read_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        text = (root / MANIFEST).read_text()
    except OSError as exc:
        raise CheckpointError(f"no checkpoint manifest in {root}") from exc
    ckpt = Checkpoint(params={})
    in_opt = False
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line == OPT_HEADER:
            in_opt = True
            continue
        parts = line.split("\t")
        if in_opt and parts[0] == "step" and len(parts) == 2:
            ckpt.step = int(parts[1])
            continue
        if len(parts) != 4 or parts[1] != "f32":
            raise CheckpointError(f"{MANIFEST}:{lineno}: malformed line {line!r}")
        name, _, dims, rel = parts
        arr = _read_tensor(root, dims, rel)
        if in_opt:
            kind, _, pname = name.partition(":")
            if kind not in ("m", "v"):
                raise CheckpointError(f"{MANIFEST}:{lineno}: unknown optimizer entry {name!r}")
            ckpt.moments[kind][pname] = arr
        else:
            ckpt.params[name] = arr
    return ckpt


def save_store(path, store: ParamStore, moments=None, step=None) -> None:
    save_tensors(path, dict(store.items()), moments, step)


def load_into(store: ParamStore, path, prefix: str | None = None, strict: bool = True) -> Checkpoint:
    """Copy checkpoint tensors into ``store`` in place.

    With ``prefix`` only names under it are accepted. ``strict`` also
    requires every store entry (under ``prefix``) to be present.
    """
    ckpt = read_checkpoint(path)
    unknown = [n for n in ckpt.params if n not in store or (prefix and not n.startswith(prefix))]
    if unknown:
        raise CheckpointError(f"checkpoint has unknown parameters: {unknown[:5]}")
    if strict:
        expected = [n for n in store.names() if not prefix or n.startswith(prefix)]
        missing = [n for n in expected if n not in ckpt.params]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, arr in ckpt.params.items():
        try:
            store.assign(name, torch.from_numpy(arr).to(store[name].dtype))
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
    return ckpt


def import_frozen_weights(store: ParamStore, path) -> None:
    """Load externally converted extractor weights (names ``domenc.frozen.*``)."""
    load_into(store, path, prefix="domenc.frozen.", strict=True)
