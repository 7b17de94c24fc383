"""On-disk formats: volumes, slice stacks, transform tables, checkpoints,
and run manifests.

Arrays are stored as raw little-endian float32 next to a JSON sidecar that
carries the geometry, so everything stays inspectable with standard tools.
Transform tables are plain text, nine anchor coordinates per line; 4x4
homogeneous matrices are accepted on input.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import IoError, MissingCheckpoint
from .forward_model import Slice, SliceStackSet, VolumeGrid
from .geometry import AnchorPoints, PlaneExtent, RigidTransform, anchors_to_transform, transform_to_anchors


def _data_path(sidecar: Path) -> Path:
    return sidecar.with_suffix(".bin")


def _write_raw(path: Path, arr: np.ndarray):
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_raw(path: Path, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    n = int(np.prod(shape))
    if arr.size != n:
        raise IoError(f"{path}: expected {n} float32 values, found {arr.size}")
    return arr.astype(float).reshape(shape)


# -- volumes --------------------------------------------------------------

def save_volume(path, vol: VolumeGrid):
    """Write ``<stem>.json`` geometry sidecar and ``<stem>.bin`` voxel data."""
    sidecar = Path(path).with_suffix(".json")
    meta = {
        "kind": "volume",
        "shape": list(vol.shape),
        "spacing_mm": vol.spacing_mm.tolist(),
        "origin_mm": vol.origin_mm.tolist(),
        "data": _data_path(sidecar).name,
    }
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    _write_raw(_data_path(sidecar), vol.data)


def load_volume(path) -> VolumeGrid:
    sidecar = Path(path).with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read volume sidecar {sidecar}: {e}") from e
    if meta.get("kind") != "volume":
        raise IoError(f"{sidecar} is not a volume sidecar")
    data = _read_raw(sidecar.parent / meta["data"], meta["shape"])
    return VolumeGrid(data, meta["spacing_mm"], meta["origin_mm"])


# -- slice stacks ---------------------------------------------------------

def save_stacks(directory, stacks: SliceStackSet, ext: PlaneExtent):
    """Write a stack directory: ``stacks.json`` + one raster blob.

    Ground-truth transforms, when present, are stored as anchor coordinates.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "stacks",
        "size_px": ext.size_px,
        "res_mm": ext.res_mm,
        "data": "slices.bin",
        "slices": [
            {
                "stack_index": s.stack_index,
                "slice_index": s.slice_index,
                "thickness_mm": s.thickness_mm,
            }
            for s in stacks.slices
        ],
    }
    if stacks.transforms_gt is not None:
        meta["gt_anchors"] = [transform_to_anchors(t, ext).as_flat().tolist()
                              for t in stacks.transforms_gt]
    (d / "stacks.json").write_text(json.dumps(meta, indent=2) + "\n")
    blob = np.stack([s.pixels for s in stacks.slices])
    _write_raw(d / "slices.bin", blob)


def load_stacks(directory):
    """Read a stack directory; returns (SliceStackSet, PlaneExtent)."""
    d = Path(directory)
    try:
        meta = json.loads((d / "stacks.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read stack metadata in {d}: {e}") from e
    if meta.get("kind") != "stacks":
        raise IoError(f"{d}/stacks.json is not a stack description")
    ext = PlaneExtent(meta["size_px"], meta["res_mm"])
    n = len(meta["slices"])
    blob = _read_raw(d / meta["data"], (n, ext.size_px, ext.size_px))
    slices = [Slice(blob[i], ext, m["thickness_mm"], m["stack_index"], m["slice_index"])
              for i, m in enumerate(meta["slices"])]
    gt = None
    if "gt_anchors" in meta:
        gt = [anchors_to_transform(AnchorPoints.from_flat(a), ext)
              for a in meta["gt_anchors"]]
    return SliceStackSet(slices, gt), ext


# -- transform tables -----------------------------------------------------

def save_transforms(path, transforms, ext: PlaneExtent):
    """One line per slice: nine anchor coordinates (mm)."""
    lines = [" ".join(f"{v:.10g}" for v in transform_to_anchors(t, ext).as_flat())
             for t in transforms]
    Path(path).write_text("\n".join(lines) + "\n")


def load_transforms(path, ext: PlaneExtent):
    """Accepts 9 numbers (anchors), or 12/16 numbers (homogeneous matrix rows)."""
    out = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read transforms {path}: {e}") from e
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        vals = np.array([float(v) for v in line.split()])
        if vals.size == 9:
            out.append(anchors_to_transform(AnchorPoints.from_flat(vals), ext))
        elif vals.size in (12, 16):
            m = np.eye(4)
            m[:vals.size // 4] = vals.reshape(-1, 4)
            out.append(RigidTransform.from_matrix(m))
        else:
            raise IoError(f"{path}:{ln}: expected 9, 12 or 16 numbers, got {vals.size}")
    return out


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(directory, config_dict: dict, params: dict):
    """``manifest.json`` (config + tensor table) next to one float32 blob."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    chunks = []
    for name in sorted(params):
        arr = params[name].data if hasattr(params[name], "data") else np.asarray(params[name])
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.asarray(arr, dtype="<f4").ravel())
        offset += arr.size
    (d / "manifest.json").write_text(json.dumps(
        {"kind": "checkpoint", "config": config_dict, "tensors": table,
         "data": "weights.bin"}, indent=2) + "\n")
    _write_raw(d / "weights.bin", np.concatenate(chunks) if chunks else np.zeros(0))


def load_checkpoint(directory):
    """Returns (config_dict, {name: float array})."""
    d = Path(directory)
    manifest = d / "manifest.json"
    if not manifest.exists():
        raise MissingCheckpoint(f"no checkpoint manifest at {manifest}")
    try:
        meta = json.loads(manifest.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read {manifest}: {e}") from e
    if meta.get("kind") != "checkpoint":
        raise MissingCheckpoint(f"{manifest} is not a checkpoint manifest")
    total = sum(int(np.prod(t["shape"])) for t in meta["tensors"])
    blob = _read_raw(d / meta["data"], (total,)) if total else np.zeros(0)
    params = {}
    for t in meta["tensors"]:
        n = int(np.prod(t["shape"]))
        params[t["name"]] = blob[t["offset"]:t["offset"] + n].reshape(t["shape"])
    return meta["config"], params


# -- run manifests --------------------------------------------------------

def config_digest(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(directory, command: str, config_dict: dict, seed,
                   elapsed_s: float, extras: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "seed": seed,
        "config_sha256": config_digest(config_dict),
        "config": config_dict,
        "elapsed_s": round(elapsed_s, 3),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "versions": {
            "slicereg": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    if extras:
        meta.update(extras)

    def _plain(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"cannot serialize {type(o).__name__}")

    (d / "manifest.json").write_text(json.dumps(meta, indent=2, default=_plain) + "\n")
    return meta
