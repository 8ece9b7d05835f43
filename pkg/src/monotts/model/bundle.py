"""On-disk model bundle: ``manifest.json`` plus one little-endian blob.

The manifest holds the config, a parameter index (name, shape, offset in
values) and, for block-sparse layers, the packed block mask. Pruned
weights are stored densely with exact zeros, so the blob layout does not
depend on sparsity.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import BundleFormatError, ConfigError
from ..sparsity import BlockSparseMatrix
from .config import ModelConfig
from .seq2seq import Seq2Seq

BUNDLE_FORMAT = "monotts-bundle"
BUNDLE_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_LE = {"float32": "<f4", "float64": "<f8"}


def _pack_mask(mask: np.ndarray) -> str:
    return np.packbits(mask.ravel(), bitorder="little").tobytes().hex()


def _unpack_mask(text: str, shape) -> np.ndarray:
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(text), dtype=np.uint8), bitorder="little")
    if bits.size < n:
        raise BundleFormatError(f"block mask has {bits.size} bits, expected {n}")
    return bits[:n].astype(bool).reshape(shape)


def save_bundle(model: Seq2Seq, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``model`` to directory ``path``; output bytes depend only on the model."""
    path = Path(path)
    cfg = model.config
    le = _LE[cfg.precision]
    index, chunks, offset = [], [], 0
    for name, p in model.named_parameters().items():
        arr = np.ascontiguousarray(p.data, dtype=le)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    sparse = {
        layer: {
            "block_shape": list(w.kernel.block_shape),
            "mask_shape": list(w.kernel.block_mask.shape),
            "mask": _pack_mask(w.kernel.block_mask),
        }
        for layer, w in sorted(model.sparse.items())
    }
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "precision": cfg.precision,
        "dtype": le,
        "config": cfg.to_dict(),
        "parameters": index,
        "total_values": offset,
        "sparse": sparse,
        "extra": extra or {},
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=le)
        (path / BLOB).write_bytes(blob.astype(le, copy=False).tobytes())
        (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise BundleFormatError(f"cannot write bundle to {path}: {exc}") from exc
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"cannot read {path / MANIFEST}: {exc}") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleFormatError(f"{path} is not a model bundle")
    if manifest.get("version") != BUNDLE_VERSION:
        raise BundleFormatError(f"unsupported bundle version {manifest.get('version')}")
    return manifest


def load_bundle(path: str | Path) -> Seq2Seq:
    """Rebuild the model saved at ``path``, including block-sparse layers."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        config = ModelConfig.from_dict(manifest["config"])
        le = manifest["dtype"]
        if _LE.get(config.precision) != le:
            raise BundleFormatError(f"dtype {le} does not match precision {config.precision}")
        blob = np.frombuffer((path / BLOB).read_bytes(), dtype=le)
        if blob.size != manifest["total_values"]:
            raise BundleFormatError(f"{BLOB} holds {blob.size} values, manifest says {manifest['total_values']}")
        model = Seq2Seq(config)
        arrays = {}
        for e in manifest["parameters"]:
            n = int(np.prod(e["shape"]))
            arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(model.dtype)
        model.load_state_dict(arrays)
        for layer, s in manifest["sparse"].items():
            mask = _unpack_mask(s["mask"], tuple(s["mask_shape"]))
            dense = model.params[f"{layer}.weight"].data
            model.set_sparse(layer, BlockSparseMatrix.from_dense(dense, tuple(s["block_shape"]), mask))
    except OSError as exc:
        raise BundleFormatError(f"cannot read bundle at {path}: {exc}") from exc
    except (KeyError, TypeError) as exc:
        raise BundleFormatError(f"malformed manifest at {path}: {exc!r}") from exc
    except ConfigError as exc:
        raise BundleFormatError(f"bad config in {path}: {exc}") from exc
    except ValueError as exc:
        raise BundleFormatError(f"corrupt bundle at {path}: {exc}") from exc
    return model
