"""Binary file formats for datasets and checkpoints.

Dataset files ("ARTW", version 1): magic, u32 version, u64 window count,
u64 window length, u64 feature count, then all windows and all targets as
little-endian float64. The split assignment travels in the sidecar
manifest.json.

Checkpoint files ("ARTP"): magic, u32 version, then one length-prefixed
block per named float64 array: u32 name length, UTF-8 name, u64 rank,
u64 dims, raw little-endian float64 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ContractViolation
from .dslob import WindowedDataset

__all__ = [
    "write_dataset",
    "read_dataset",
    "write_checkpoint",
    "read_checkpoint",
    "DATASET_MAGIC",
    "CHECKPOINT_MAGIC",
]

DATASET_MAGIC = b"ARTW"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"ARTP"
CHECKPOINT_VERSION = 1


def write_dataset(path, windows, targets):
    windows = np.ascontiguousarray(windows, dtype="<f8")
    targets = np.ascontiguousarray(targets, dtype="<f8")
    n, L, dx = windows.shape
    if targets.shape != (n,):
        raise ContractViolation("targets must align with windows")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<QQQ", n, L, dx))
        f.write(windows.tobytes())
        f.write(targets.tobytes())


def read_dataset(path):
    """Returns (windows (n, L, dx), targets (n,))."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise ContractViolation(f"bad dataset magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != DATASET_VERSION:
            raise ContractViolation(f"unsupported dataset version {version}")
        n, L, dx = struct.unpack("<QQQ", f.read(24))
        windows = np.frombuffer(f.read(n * L * dx * 8), dtype="<f8").reshape(n, L, dx)
        targets = np.frombuffer(f.read(n * 8), dtype="<f8")
        if targets.shape != (n,):
            raise ContractViolation("dataset file truncated")
    return windows.copy(), targets.copy()


def write_split_dataset(out_dir, dataset: WindowedDataset, manifest_extra=None):
    """One ARTW file per split plus manifest.json; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "ARTW", "version": DATASET_VERSION, "splits": {}}
    for tag in ("train", "val", "test"):
        w, y = dataset.subset(tag)
        name = f"{tag}.artw"
        write_dataset(out / name, w, y)
        manifest["splits"][tag] = {
            "file": name, "n": int(len(y)),
            "window_len": int(w.shape[1]), "feature_count": int(w.shape[2]),
        }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def read_split_dataset(in_dir) -> WindowedDataset:
    """Rebuild a WindowedDataset from a directory written by
    write_split_dataset."""
    src = Path(in_dir)
    with open(src / "manifest.json") as f:
        manifest = json.load(f)
    parts, split_ids = [], []
    for i, tag in enumerate(("train", "val", "test")):
        w, y = read_dataset(src / manifest["splits"][tag]["file"])
        parts.append((w, y))
        split_ids.append(np.full(len(y), i, dtype=np.int8))
    return WindowedDataset(
        windows=np.concatenate([p[0] for p in parts]),
        targets=np.concatenate([p[1] for p in parts]),
        split=np.concatenate(split_ids),
    )


def write_checkpoint(path, blocks: dict):
    """blocks: {name: float array}; insertion order is preserved."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in blocks.items():
            # asarray keeps 0-d shapes; ascontiguousarray would promote to 1-d
            arr = np.asarray(arr, dtype="<f8", order="C")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> dict:
    blocks = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", f.read(8))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8")
            if data.size != count:
                raise ContractViolation("checkpoint file truncated")
            blocks[name] = data.reshape(shape).copy()
    return blocks
