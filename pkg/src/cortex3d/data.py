"""Volume I/O, synthetic phantoms, normalization and fold planning.

File formats (all little-endian):

* VOL1 volume file: magic ``VOL1``, u32 channels, u32 depth, u32 height,
  u32 width, u32 dtype code (1 = 32-bit float), then channels*depth*height*
  width float32 values in row-major order, width fastest.
* Dataset manifest: UTF-8 CSV ``subject_id,path,label`` with a header row;
  relative paths resolve against the manifest's directory.
* ACNN1 checkpoint container: magic ``ACNN1``, u32 tensor count, then per
  tensor u32 name length, UTF-8 name, u32 rank, u32 dims..., float32
  payload. Names follow the ``layer{i}.{param}`` convention.
"""

import csv
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

RAW_LABELS = ("AD", "MCI", "NC")

VOL_MAGIC = b"VOL1"
VOL_DTYPE_F32 = 1
CKPT_MAGIC = b"ACNN1"


class FormatError(ValueError):
    """A binary file failed validation; the message carries the byte offset."""


@dataclass
class Volume:
    """One labeled single-channel scan."""

    voxels: np.ndarray  # (1, D, H, W) float32
    label: str
    subject_id: str
    source: str = "phantom"

    def __post_init__(self):
        if self.voxels.ndim != 4 or self.voxels.shape[0] != 1:
            raise ValueError(f"volume voxels must be (1, D, H, W), got shape {self.voxels.shape}")
        if self.voxels.dtype != np.float32:
            raise ValueError(f"volume voxels must be float32, got {self.voxels.dtype}")


@dataclass(frozen=True)
class ClassRanges:
    """Uniform sampling ranges for one class's phantom anatomy (voxels / scale)."""

    ventricle_radius: tuple
    shell_thickness: tuple
    brain_scale: tuple


# Adjacent classes overlap slightly (0.2 voxels in radius/thickness, 0.04 in
# scale) so no single feature separates them perfectly, but the three
# correlated features together do.
DEFAULT_CLASS_RANGES = {
    "NC": ClassRanges(ventricle_radius=(2.0, 3.3), shell_thickness=(3.6, 4.6), brain_scale=(0.96, 1.04)),
    "MCI": ClassRanges(ventricle_radius=(3.1, 4.5), shell_thickness=(2.8, 3.8), brain_scale=(0.92, 1.00)),
    "AD": ClassRanges(ventricle_radius=(4.3, 5.8), shell_thickness=(2.0, 3.0), brain_scale=(0.88, 0.96)),
}

# Tissue intensities before noise, all inside [0, 1].
_BACKGROUND = 0.02
_TISSUE = 0.55
_SHELL = 0.95
_VENTRICLE = 0.05


@dataclass
class PhantomParams:
    """Synthetic brain-like volume generator settings."""

    grid: int = 32
    class_ranges: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_RANGES))
    noise_sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def generate_phantom(params: PhantomParams, label: str, index: int = 0) -> Volume:
    """One phantom volume: concentric ellipsoids with class-dependent anatomy.

    A bright cortical shell of class-dependent thickness wraps mid-intensity
    tissue; a dark central ventricle ellipsoid has class-dependent radius;
    the whole brain is scaled by a class-dependent factor. Gaussian noise is
    added and everything is clipped to [0, 1]. Deterministic given
    (params.seed, label, index).
    """
    if label not in params.class_ranges:
        raise ValueError(f"unknown label {label!r}; have ranges for {sorted(params.class_ranges)}")
    rng = derive_rng(params.seed, "phantom", label, index)
    ranges = params.class_ranges[label]
    radius = rng.uniform(*ranges.ventricle_radius)
    thickness = rng.uniform(*ranges.shell_thickness)
    scale = rng.uniform(*ranges.brain_scale)

    g = params.grid
    semi = (0.42 * g * scale, 0.40 * g * scale, 0.38 * g * scale)
    if radius >= min(semi) or thickness >= min(semi):
        raise ValueError(
            f"phantom shapes exceed the grid: ventricle {radius:.1f} / shell {thickness:.1f} "
            f"vs brain semi-axes {tuple(round(s, 1) for s in semi)}"
        )
    center = (g - 1) / 2.0
    z, y, x = np.ogrid[:g, :g, :g]
    z = z - center
    y = y - center
    x = x - center

    rho = np.sqrt((z / semi[0]) ** 2 + (y / semi[1]) ** 2 + (x / semi[2]) ** 2)
    mean_semi = sum(semi) / 3.0
    vent = np.sqrt((z / radius) ** 2 + (y / (0.8 * radius)) ** 2 + (x / (0.9 * radius)) ** 2)

    vol = np.full((g, g, g), _BACKGROUND, dtype=np.float64)
    vol[rho <= 1.0] = _TISSUE
    vol[(rho <= 1.0) & (rho >= 1.0 - thickness / mean_semi)] = _SHELL
    vol[vent <= 1.0] = _VENTRICLE
    if params.noise_sigma > 0:
        vol += rng.normal(0.0, params.noise_sigma, size=vol.shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return Volume(voxels=vol[None], label=label, subject_id=f"{label}{index:03d}", source="phantom")


def generate_dataset(params: PhantomParams, per_class: int, labels=RAW_LABELS) -> list[Volume]:
    """``per_class`` phantoms for each label, deterministic given params.seed."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    return [generate_phantom(params, label, i) for label in labels for i in range(per_class)]


def normalize_intensity(arr: np.ndarray) -> np.ndarray:
    """Linear rescale so min -> 0 and max -> 1.

    A constant input has no scale; it maps to all zeros with a warning.
    """
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        warnings.warn("normalize_intensity: constant input, returning zeros", stacklevel=2)
        return np.zeros_like(arr)
    return ((arr - lo) / (hi - lo)).astype(arr.dtype)


def write_vol(volume: Volume, path) -> None:
    """Serialize one volume as VOL1 (voxels only; identity lives in the manifest)."""
    c, d, h, w = volume.voxels.shape
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<5I", c, d, h, w, VOL_DTYPE_F32))
        f.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def read_vol(path, label: str = "", subject_id: str = "") -> Volume:
    """Parse a VOL1 file; read_vol(write_vol(v)) is bitwise lossless."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != VOL_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {VOL_MAGIC!r}")
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes < 24")
    c, d, h, w, code = struct.unpack_from("<5I", raw, 4)
    if code != VOL_DTYPE_F32:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 20, expected {VOL_DTYPE_F32}")
    count = c * d * h * w
    expected = 24 + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload truncated at offset {len(raw)}, expected {expected} bytes "
            f"for shape ({c},{d},{h},{w})"
        )
    voxels = np.frombuffer(raw, dtype="<f4", count=count, offset=24).reshape(c, d, h, w)
    sid = subject_id or os.path.splitext(os.path.basename(path))[0]
    return Volume(voxels=np.ascontiguousarray(voxels), label=label, subject_id=sid, source="file")


def write_manifest(entries, path) -> None:
    """CSV rows (subject_id, path, label) with a header."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "path", "label"])
        for subject_id, vol_path, label in entries:
            writer.writerow([subject_id, vol_path, label])


def read_manifest(path) -> list[tuple[str, str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["subject_id", "path", "label"]:
            raise FormatError(f"{path}: bad manifest header {header!r}")
        return [(row[0], row[1], row[2]) for row in reader]


def load_dataset(manifest_path) -> list[Volume]:
    """Read every volume a manifest names, attaching subject ids and labels."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    volumes = []
    for subject_id, vol_path, label in read_manifest(manifest_path):
        full = vol_path if os.path.isabs(vol_path) else os.path.join(base, vol_path)
        volumes.append(read_vol(full, label=label, subject_id=subject_id))
    return volumes


@dataclass
class FoldPlan:
    """K disjoint subject-id folds covering a dataset, class-stratified."""

    folds: list


def stratified_kfold(dataset, k: int, seed: int) -> FoldPlan:
    """Split subjects into k folds with per-class counts differing by <= 1.

    Subjects are sorted by id before the seeded shuffle, so the plan does not
    depend on dataset order.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    by_class: dict[str, list[str]] = {}
    for v in dataset:
        by_class.setdefault(v.label, []).append(v.subject_id)
    smallest = min(len(ids) for ids in by_class.values())
    if k > smallest:
        raise ValueError(f"k={k} exceeds the smallest class size {smallest}")
    folds: list[list[str]] = [[] for _ in range(k)]
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        rng = derive_rng(seed, "kfold", label)
        order = rng.permutation(len(ids))
        for i, idx in enumerate(order):
            folds[i % k].append(ids[idx])
    return FoldPlan(folds=[sorted(f) for f in folds])


def write_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    """Serialize named float32 tensors in the ACNN1 container format."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse an ACNN1 container back into named float32 arrays, in file order."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 5 or raw[:5] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r} at offset 0, expected {CKPT_MAGIC!r}")
    off = 5
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            if len(raw) < off + name_len:
                raise struct.error("name runs past end of file")
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if len(raw) < off + 4 * n:
                raise struct.error("payload runs past end of file")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            tensors[name] = np.ascontiguousarray(arr)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated container at offset {off}: {exc}") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return tensors
