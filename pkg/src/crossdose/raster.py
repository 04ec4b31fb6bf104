"""Flat binary containers for images and parameter tensors, plus the dataset layout.

Two tiny formats, both little-endian regardless of host byte order so files
are portable across machines:

* ``PTR1`` raster: magic ``PTR1`` | version u8 = 1 | height u32 | width u32 |
  height*width float32 payload, row-major.  Used for every image on disk.
* ``PTN1`` tensor: magic ``PTN1`` | rank u8 | dims u32[rank] | float32 payload.
  The N-D generalization, used for network parameters inside checkpoints.

A dataset root looks like::

    root/
      manifest.txt          # key/value sidecar (seed, split, dose levels, ...)
      s00/full.ptr          # full-dose reference slice (SUV)
      s00/d001.ptr          # 1% dose, d002.ptr = 2%, ... d050.ptr = 50%
      s01/...

Round trips are bit-exact: ``read_raster(write_raster(x)) == x`` down to the
float32 payload bytes.
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingDataError, ValidationError

RASTER_MAGIC = b"PTR1"
TENSOR_MAGIC = b"PTN1"
RASTER_VERSION = 1

#: The six count levels used throughout: 1%, 2%, 5%, 10%, 25% and 50%.
STANDARD_DOSES = (0.01, 0.02, 0.05, 0.10, 0.25, 0.50)

# Guard against absurd headers before allocating payload buffers.
_MAX_PIXELS = 2**28


def dose_filename(dose: float) -> str:
    """File name for a low-dose slice, e.g. 0.05 -> ``d005.ptr``."""
    pct = round(dose * 100)
    if not 1 <= pct <= 99:
        raise ValidationError(f"dose fraction {dose} outside (0.01, 0.99)")
    return f"d{pct:03d}.ptr"


def parse_dose_filename(name: str) -> float:
    if not (name.startswith("d") and name.endswith(".ptr") and len(name) == 8):
        raise FormatError(f"not a dose file name: {name!r}")
    return int(name[1:4]) / 100.0


def _check_image(img: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(img, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected a 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains NaN or Inf values")
    return arr


def write_raster(path, img: np.ndarray) -> None:
    """Write a 2-D float32 image to ``path`` in the PTR1 layout."""
    arr = _check_image(img)
    h, w = arr.shape
    payload = arr.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(struct.pack("<B", RASTER_VERSION))
        f.write(struct.pack("<II", h, w))
        f.write(payload)


def read_raster(path) -> np.ndarray:
    """Read a PTR1 file back into a (height, width) float32 array."""
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"raster file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 13:
        raise FormatError(f"{path}: header truncated ({len(blob)} bytes)")
    if blob[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {RASTER_MAGIC!r}")
    version = blob[4]
    if version != RASTER_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    h, w = struct.unpack("<II", blob[5:13])
    if h == 0 or w == 0 or h * w > _MAX_PIXELS:
        raise FormatError(f"{path}: dimension overflow, height={h} width={w}")
    expected = 13 + 4 * h * w
    if len(blob) < expected:
        missing = (expected - len(blob) + 3) // 4
        raise FormatError(f"{path}: payload truncated, {missing} float(s) short")
    if len(blob) > expected:
        raise FormatError(f"{path}: {len(blob) - expected} trailing byte(s) after payload")
    arr = np.frombuffer(blob, dtype="<f4", count=h * w, offset=13)
    return np.ascontiguousarray(arr.reshape(h, w)).astype(np.float32, copy=False)


def write_tensor(path, arr: np.ndarray) -> None:
    """Write an N-D float32 array in the PTN1 layout (checkpoint blobs)."""
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if a.ndim < 1:
        a = a.reshape(1)
    if a.ndim > 255:
        raise ValidationError(f"rank {a.ndim} exceeds u8")
    if not np.all(np.isfinite(a)):
        raise ValidationError("tensor contains NaN or Inf values")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<B", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.astype("<f4", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"tensor file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 5:
        raise FormatError(f"{path}: header truncated")
    if blob[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {TENSOR_MAGIC!r}")
    rank = blob[4]
    if rank < 1 or len(blob) < 5 + 4 * rank:
        raise FormatError(f"{path}: rank/dims field truncated (rank={rank})")
    dims = struct.unpack(f"<{rank}I", blob[5 : 5 + 4 * rank])
    n = int(np.prod(dims, dtype=np.int64))
    if n <= 0 or n > _MAX_PIXELS:
        raise FormatError(f"{path}: dimension overflow, dims={dims}")
    expected = 5 + 4 * rank + 4 * n
    if len(blob) != expected:
        raise FormatError(f"{path}: payload size {len(blob)} != expected {expected}")
    arr = np.frombuffer(blob, dtype="<f4", count=n, offset=5 + 4 * rank)
    return np.ascontiguousarray(arr.reshape(dims)).astype(np.float32, copy=False)


@dataclass(frozen=True)
class DatasetManifest:
    """What a generated dataset contains and how it is split.

    ``kappa`` (expected full-dose counts per SUV per pixel) and ``size`` are
    the generation parameters; keeping them in the manifest lets analyses
    re-derive phantom geometry deterministically.
    """

    subject_ids: tuple[str, ...]
    dose_levels: tuple[float, ...]
    split: dict[str, str] = field(default_factory=dict)  # subject -> train|test
    seed: int = 0
    suv_clip_max: float = 16.0
    kappa: float = 50.0
    size: int = 128

    def __post_init__(self):
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise ValidationError("subject ids are not unique")
        bad = [d for d in self.dose_levels if not any(abs(d - s) < 1e-9 for s in STANDARD_DOSES)]
        if bad:
            raise ValidationError(f"dose levels {bad} outside the standard set {STANDARD_DOSES}")
        if self.suv_clip_max <= 0:
            raise ValidationError("suv_clip_max must be positive")
        for sid, part in self.split.items():
            if part not in ("train", "test"):
                raise ValidationError(f"split[{sid}] = {part!r}, expected train|test")

    @property
    def train_subjects(self) -> tuple[str, ...]:
        return tuple(s for s in self.subject_ids if self.split.get(s) == "train")

    @property
    def test_subjects(self) -> tuple[str, ...]:
        return tuple(s for s in self.subject_ids if self.split.get(s) == "test")


def write_manifest(root, manifest: DatasetManifest) -> None:
    cp = configparser.ConfigParser()
    cp["dataset"] = {
        "seed": str(manifest.seed),
        "suv_clip_max": repr(float(manifest.suv_clip_max)),
        "kappa": repr(float(manifest.kappa)),
        "size": str(manifest.size),
        "dose_levels": ",".join(f"{d:.2f}" for d in manifest.dose_levels),
        "train": ",".join(manifest.train_subjects),
        "test": ",".join(manifest.test_subjects),
    }
    with open(Path(root) / "manifest.txt", "w") as f:
        cp.write(f)


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise MissingDataError(f"manifest not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
        sec = cp["dataset"]
        train = tuple(s for s in sec.get("train", "").split(",") if s)
        test = tuple(s for s in sec.get("test", "").split(",") if s)
        manifest = DatasetManifest(
            subject_ids=train + test,
            dose_levels=tuple(float(d) for d in sec["dose_levels"].split(",") if d),
            split={**{s: "train" for s in train}, **{s: "test" for s in test}},
            seed=int(sec["seed"]),
            suv_clip_max=float(sec["suv_clip_max"]),
            kappa=float(sec.get("kappa", "50.0")),
            size=int(sec.get("size", "128")),
        )
    except (KeyError, configparser.Error, ValueError) as e:
        raise FormatError(f"{path}: malformed manifest ({e})") from e
    return manifest


def subject_dir(root, subject_id: str) -> Path:
    return Path(root) / subject_id


def reference_path(root, subject_id: str) -> Path:
    return subject_dir(root, subject_id) / "full.ptr"


def lowdose_path(root, subject_id: str, dose: float) -> Path:
    return subject_dir(root, subject_id) / dose_filename(dose)


def scan_dataset(root) -> DatasetManifest:
    """Validate a dataset tree and return its manifest.

    Purely a read: repeated scans of an unchanged tree return identical
    manifests.  Any missing subject/dose file is reported by name.
    """
    root = Path(root)
    subject_dirs = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not subject_dirs:
        raise MissingDataError(f"no subjects found under {root}")
    manifest = read_manifest(root)
    problems = []
    for sid in manifest.subject_ids:
        if sid not in subject_dirs:
            problems.append(f"subject {sid}: directory missing")
            continue
        if not reference_path(root, sid).exists():
            problems.append(f"subject {sid}: full.ptr missing")
        for d in manifest.dose_levels:
            if not lowdose_path(root, sid, d).exists():
                problems.append(f"subject {sid}: dose {d:.2f} ({dose_filename(d)}) missing")
    extras = sorted(set(subject_dirs) - set(manifest.subject_ids))
    for sid in extras:
        problems.append(f"subject {sid}: on disk but not in manifest")
    if problems:
        raise FormatError("dataset layout violation:\n  " + "\n  ".join(problems))
    return manifest
