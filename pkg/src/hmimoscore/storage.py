"""Binary pilot datasets with JSON sidecar manifests.

Layout: 8-byte magic, uint32 format version, uint32 flags (bit 0 set when
ground truth is stored), then one little-endian float32 record per sample
holding ``y`` followed, when flagged, by ``h``.
"""
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .channel import PilotSet

MAGIC = b"HMIMOPLT"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_F32 = np.dtype("<f4")


class StorageError(OSError):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class DatasetManifest:
    n_antennas: int
    spacing: float
    environment: str
    beta: float
    inv_snr: float
    count: int
    seed: int
    with_truth: bool
    format_version: int = VERSION


def manifest_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_dataset(path, pilots: PilotSet, manifest: DatasetManifest) -> None:
    """Write ``pilots`` to ``path`` and its manifest to ``path + '.json'``."""
    path = Path(path)
    with_truth = pilots.h is not None
    if with_truth != manifest.with_truth or len(pilots) != manifest.count:
        raise StorageError("manifest does not describe the pilot set")
    records = pilots.y if not with_truth else np.concatenate([pilots.y, pilots.h], axis=1)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, int(with_truth)))
        fh.write(np.ascontiguousarray(records, dtype=_F32).tobytes())
    manifest_path(path).write_text(json.dumps(asdict(manifest), indent=2) + "\n")


def read_manifest(path) -> DatasetManifest:
    try:
        raw = json.loads(manifest_path(path).read_text())
        return DatasetManifest(**raw)
    except FileNotFoundError as exc:
        raise StorageError(f"missing manifest for {path}") from exc
    except (TypeError, json.JSONDecodeError) as exc:
        raise StorageError(f"malformed manifest for {path}: {exc}") from exc


def _read_records(path) -> tuple[np.ndarray, DatasetManifest, bool]:
    manifest = read_manifest(path)
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise StorageError(f"{path} is truncated")
    magic, version, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise StorageError(f"{path} is not a pilot dataset")
    if version != VERSION:
        raise StorageError(f"{path} has unsupported format version {version}")
    with_truth = bool(flags & 1)
    width = 2 * manifest.n_antennas * (2 if with_truth else 1)
    data = np.frombuffer(blob, dtype=_F32, offset=_HEADER.size)
    if data.size != width * manifest.count or with_truth != manifest.with_truth:
        raise StorageError(f"{path} disagrees with its manifest")
    return data.reshape(manifest.count, width), manifest, with_truth


def read_pilots(path) -> tuple[np.ndarray, DatasetManifest]:
    """Return only the measured pilots; ground truth is never materialized."""
    records, manifest, _ = _read_records(path)
    return records[:, : 2 * manifest.n_antennas].astype(np.float64), manifest


def read_dataset(path) -> tuple[PilotSet, DatasetManifest]:
    """Return pilots and, if stored, ground truth. Intended for evaluation."""
    records, manifest, with_truth = _read_records(path)
    n2 = 2 * manifest.n_antennas
    y = records[:, :n2].astype(np.float64)
    h = records[:, n2:].astype(np.float64) if with_truth else None
    return PilotSet(y, manifest.inv_snr, manifest.environment, h), manifest
