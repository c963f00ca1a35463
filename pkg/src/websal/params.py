"""Named parameter storage with explicit aliasing, and the checkpoint container."""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn import BatchNormState
from .tensor import Tensor

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ParamStore:
    """Ordered name -> Tensor map; several names may resolve to one storage.

    Batch-norm running moments live in ``buffers`` under the layer prefix
    (e.g. ``stage1.decoder.layer3``) and are aliased the same way.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._alias_of: dict[str, str] = {}
        self.buffers: "OrderedDict[str, BatchNormState]" = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def alias(self, name: str, target: str) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        root = self._alias_of.get(target, target)
        self._params[name] = self._params[root]
        self._alias_of[name] = root

    def add_buffer(self, name: str, state: BatchNormState) -> None:
        self.buffers[name] = state

    def alias_buffer(self, name: str, target: str) -> None:
        self.buffers[name] = self.buffers[target]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_alias(self, name: str) -> bool:
        return name in self._alias_of

    def aliases(self) -> dict[str, str]:
        return dict(self._alias_of)

    def unique(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        """Canonical (non-alias) parameters, optionally filtered by name prefix."""
        return [(k, t) for k, t in self._params.items()
                if k not in self._alias_of and k.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(t.size for _, t in self.unique(prefix))

    def zero_grad(self) -> None:
        for _, t in self.unique():
            t.zero_grad()

    def checksum(self, prefix: str = "") -> str:
        import hashlib
        h = hashlib.sha256()
        for k, t in self.unique(prefix):
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> None:
        for _, t in self.unique():
            t.data = t.data.astype(dtype)
            t.grad = np.zeros_like(t.data)
        for st in {id(s): s for s in self.buffers.values()}.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)


def save_checkpoint(path, params: ParamStore, optim_state: dict | None = None, meta: dict | None = None) -> Path:
    """Write parameters, buffers and optimizer state as little-endian float32 arrays.

    The container is an uncompressed ``.npz``; every array carries its own
    shape and dtype header, and ``__meta__`` holds a UTF-8 JSON document with
    the format version and the alias table.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, t in params.unique():
        arrays[f"param/{name}"] = t.data.astype("<f4")
    buf_alias: dict[str, str] = {}
    seen: dict[int, str] = {}
    for name, st in params.buffers.items():
        if id(st) in seen:
            buf_alias[name] = seen[id(st)]
            continue
        seen[id(st)] = name
        arrays[f"buffer/{name}/mean"] = st.running_mean.astype("<f4")
        arrays[f"buffer/{name}/var"] = st.running_var.astype("<f4")
    optim_meta = {}
    for opt_name, st in (optim_state or {}).items():
        optim_meta[opt_name] = {k: v for k, v in st.items() if k not in ("m", "v")}
        for pname, arr in st.get("m", {}).items():
            arrays[f"optim/{opt_name}/m/{pname}"] = arr.astype("<f4")
        for pname, arr in st.get("v", {}).items():
            arrays[f"optim/{opt_name}/v/{pname}"] = arr.astype("<f4")
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "param_order": params.names(),
        "aliases": params.aliases(),
        "buffer_order": list(params.buffers),
        "buffer_aliases": buf_alias,
        "optim": optim_meta,
        "meta": meta or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, dict, dict]:
    """Inverse of :func:`save_checkpoint`; returns (params, optimizer state, meta)."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing __meta__ record")
    doc = json.loads(arrays.pop("__meta__").tobytes().decode())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {doc.get('format_version')}")

    store = ParamStore()
    aliases = doc["aliases"]
    for name in doc["param_order"]:
        if name in aliases:
            store.alias(name, aliases[name])
        else:
            store.add(name, arrays[f"param/{name}"].astype(dtype))
    for name in doc["buffer_order"]:
        if name in doc["buffer_aliases"]:
            store.alias_buffer(name, doc["buffer_aliases"][name])
        else:
            store.add_buffer(name, BatchNormState(arrays[f"buffer/{name}/mean"].astype(dtype),
                                                  arrays[f"buffer/{name}/var"].astype(dtype)))
    optim: dict = {}
    for opt_name, st in doc["optim"].items():
        st = dict(st)
        st["m"], st["v"] = {}, {}
        for key, arr in arrays.items():
            for slot in ("m", "v"):
                pre = f"optim/{opt_name}/{slot}/"
                if key.startswith(pre):
                    st[slot][key[len(pre):]] = arr.astype(dtype)
        optim[opt_name] = st
    return store, optim, doc["meta"]
