"""Synthetic CT-like phantoms, intensity/spatial preprocessing and the volume file format.

All arrays use a fixed (x, y, z) axis order and C (row-major) memory layout.
Every operation is a pure function of its inputs and seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from einops import rearrange
from scipy.ndimage import correlate1d

from .errors import ArgumentError, CorruptFileError, StateError

ORIENTATION_TAG = "XYZ"
AIR_HU = -1000.0
SOFT_TISSUE_HU = 40.0
LUNG_HU = -800.0
HU_SCALE = 1000.0

FILE_MAGIC = b"VLPVOL\x00\x01"
FILE_VERSION = 1
DTYPE_TAG = "float32-le"


@dataclass
class Volume:
    """A 3D scalar grid with physical voxel spacing.

    ``data`` holds raw Hounsfield units until :func:`normalize_hu` is applied,
    after which every voxel lies in [-1, 1] and ``normalized`` is True.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalized: bool = False
    orientation_tag: str = ORIENTATION_TAG

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ArgumentError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or not all(s > 0 and math.isfinite(s) for s in self.spacing_mm):
            raise ArgumentError(f"spacing must be three positive reals, got {self.spacing_mm}")
        if self.orientation_tag != ORIENTATION_TAG:
            raise ArgumentError(f"unsupported orientation {self.orientation_tag!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def air_value(self) -> float:
        return -1.0 if self.normalized else AIR_HU


@dataclass(frozen=True)
class LesionSpec:
    center: tuple[int, int, int]
    radius: tuple[float, float, float]
    intensity_offset: float
    abnormality: int


@dataclass
class GroundTruth:
    labels: np.ndarray
    lesion_specs: list[LesionSpec] = field(default_factory=list)

    @classmethod
    def from_lesions(cls, lesions: Sequence[LesionSpec], catalogue_size: int) -> "GroundTruth":
        labels = np.zeros(catalogue_size, dtype=np.int64)
        for lesion in lesions:
            labels[lesion.abnormality] = 1
        return cls(labels=labels, lesion_specs=list(lesions))


def lesion_offset_hu(abnormality: int) -> float:
    """Intensity offset planted for an abnormality index (strictly increasing in the index)."""
    return 250.0 + 45.0 * abnormality


def _halton(index: int, base: int) -> float:
    f, r = 1.0, 0.0
    i = index + 1
    while i > 0:
        f /= base
        r += f * (i % base)
        i //= base
    return r


def lesion_home(abnormality: int) -> tuple[float, float, float]:
    """Fractional (x, y, z) position around which lesions of this abnormality are placed."""
    return tuple(0.28 + 0.44 * _halton(abnormality, b) for b in (2, 3, 5))


def _ellipsoid_mask(shape, center, radii):
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    d = ((gx - center[0]) / radii[0]) ** 2 + ((gy - center[1]) / radii[1]) ** 2 + ((gz - center[2]) / radii[2]) ** 2
    return d <= 1.0


def generate_phantom(
    seed: int,
    catalogue_size: int = 18,
    shape: Sequence[int] = (64, 64, 64),
    lesion_count_range: tuple[int, int] = (0, 3),
    spacing_mm: Sequence[float] = (1.0, 1.0, 1.0),
    noise_hu: float = 15.0,
) -> tuple[Volume, GroundTruth]:
    """Build a chest-like phantom in raw HU with planted ellipsoidal lesions.

    The background is an air shell around a soft-tissue body ellipsoid holding
    two lung ellipsoids. Each lesion adds :func:`lesion_offset_hu` of its
    abnormality index and sits near :func:`lesion_home` of that index.
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or any(n < 32 for n in shape):
        raise ArgumentError(f"phantom shape must be three ints >= 32, got {shape}")
    if catalogue_size < 1:
        raise ArgumentError("catalogue must hold at least one abnormality")
    lo, hi = (int(v) for v in lesion_count_range)
    if lo < 0 or hi < lo:
        raise ArgumentError(f"invalid lesion count range {lesion_count_range}")

    rng = np.random.default_rng(seed)
    sx, sy, sz = shape
    data = np.full(shape, AIR_HU, dtype=np.float64)

    jitter = rng.uniform(-0.02, 0.02, size=3)
    body_c = ((0.5 + jitter[0]) * sx, (0.5 + jitter[1]) * sy, 0.5 * sz)
    body_r = (0.42 * sx, 0.34 * sy, 0.46 * sz)
    data[_ellipsoid_mask(shape, body_c, body_r)] = SOFT_TISSUE_HU
    for side in (-1.0, 1.0):
        lung_c = (body_c[0] + side * 0.19 * sx, body_c[1] - 0.02 * sy, body_c[2] + 0.04 * sz)
        lung_r = (0.15 * sx, 0.22 * sy, 0.32 * sz)
        data[_ellipsoid_mask(shape, lung_c, lung_r)] = LUNG_HU

    lesions = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        idx = int(rng.integers(catalogue_size))
        home = lesion_home(idx)
        center = tuple(
            int(np.clip(round((home[a] + rng.uniform(-0.05, 0.05)) * shape[a]), 0, shape[a] - 1)) for a in range(3)
        )
        # roughly one 8-voxel patch across or more after resampling 1 mm to 2 mm
        base_r = rng.uniform(0.12, 0.15) * min(shape)
        radius = tuple(float(base_r * rng.uniform(0.85, 1.15)) for _ in range(3))
        lesions.append(LesionSpec(center, radius, lesion_offset_hu(idx), idx))
    for lesion in lesions:
        data[_ellipsoid_mask(shape, lesion.center, lesion.radius)] += lesion.intensity_offset

    if noise_hu > 0:
        data += rng.normal(0.0, noise_hu, size=shape)
    volume = Volume(data.astype(np.float32), spacing_mm=tuple(spacing_mm))
    return volume, GroundTruth.from_lesions(lesions, catalogue_size)


def normalize_hu(v: Volume) -> Volume:
    """Map HU to [-1, 1] by dividing by 1000 and clipping."""
    if v.normalized:
        raise StateError("volume is already normalized")
    data = np.clip(v.data / np.float32(HU_SCALE), -1.0, 1.0).astype(np.float32)
    return Volume(data, v.spacing_mm, normalized=True)


def triangle_kernel(ratio: float) -> np.ndarray:
    """Antialiasing weights for downsampling by ``ratio`` (> 1).

    w(k) = max(0, 1 - |k| / ratio) for integer offsets k, normalized to sum 1.
    For ratio 2 this gives [0.25, 0.5, 0.25].
    """
    half = int(math.ceil(ratio)) - 1
    k = np.arange(-half, half + 1, dtype=np.float64)
    w = np.maximum(0.0, 1.0 - np.abs(k) / ratio)
    return w / w.sum()


def _prefilter_axis(a: np.ndarray, axis: int, ratio: float) -> np.ndarray:
    w = triangle_kernel(ratio)
    half = len(w) // 2
    n = a.shape[axis]
    # x0 + sum_k w_k (x_k - x0) keeps constant signals exactly constant
    acc = np.zeros_like(a)
    for j, wk in enumerate(w):
        if j == half:
            continue
        idx = np.clip(np.arange(n) + (j - half), 0, n - 1)
        acc += wk * (np.take(a, idx, axis=axis) - a)
    return a + acc


def _linear_axis(a: np.ndarray, axis: int, n_out: int, scale: float) -> np.ndarray:
    n_in = a.shape[axis]
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    bshape = [1, 1, 1]
    bshape[axis] = n_out
    return lo + frac.reshape(bshape) * (hi - lo)


def resample(v: Volume, target_spacing_mm: Sequence[float]) -> Volume:
    """Trilinear resampling to a new voxel spacing.

    Output shape per axis is round(shape * spacing / target). Any downsampled
    axis is first low-passed with :func:`triangle_kernel` (edge-replicated).
    Voxel centres are aligned, i.e. output voxel i samples input coordinate
    (i + 0.5) * target / spacing - 0.5.
    """
    target = tuple(float(t) for t in target_spacing_mm)
    if len(target) != 3 or not all(t > 0 and math.isfinite(t) for t in target):
        raise ArgumentError(f"target spacing must be three positive reals, got {target_spacing_mm}")
    if target == v.spacing_mm:
        return Volume(v.data.copy(), v.spacing_mm, v.normalized)
    a = v.data.astype(np.float64)
    for axis in range(3):
        src, dst = v.spacing_mm[axis], target[axis]
        if src == dst:
            continue
        n_out = max(1, int(round(a.shape[axis] * src / dst)))
        ratio = dst / src
        if ratio > 1.0:
            a = _prefilter_axis(a, axis, ratio)
        a = _linear_axis(a, axis, n_out, ratio)
    return Volume(a.astype(np.float32), target, v.normalized)


def crop(v: Volume, size: Sequence[int], mode: str = "center", seed: int = 0) -> Volume:
    """Crop to ``size``; axes shorter than ``size`` are first padded symmetrically with air."""
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) <= 0:
        raise ArgumentError(f"crop size must be three positive ints, got {size}")
    if mode not in ("center", "random"):
        raise ArgumentError(f"unknown crop mode {mode!r}")
    data = v.data
    pads = []
    for n, s in zip(data.shape, size):
        total = max(0, s - n)
        pads.append((total // 2, total - total // 2))
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="constant", constant_values=v.air_value)
    rng = np.random.default_rng(seed)
    slices = []
    for n, s in zip(data.shape, size):
        if mode == "center":
            start = (n - s) // 2
        else:
            start = int(rng.integers(0, n - s + 1))
        slices.append(slice(start, start + s))
    return Volume(data[tuple(slices)].copy(), v.spacing_mm, v.normalized)


_PATCH_PATTERN = "(gx px) (gy py) (gz pz) -> (gx gy gz) (px py pz)"
_UNPATCH_PATTERN = "(gx gy gz) (px py pz) -> (gx px) (gy py) (gz pz)"


def patchify(data, patch_size: int):
    """Split a 3D grid into row-major flattened cubic patches.

    Token t = (ix * gy + iy) * gz + iz; within a patch voxels are flattened
    in (x, y, z) row-major order. Works on numpy arrays and torch tensors.
    """
    if isinstance(data, Volume):
        data = data.data
    shape = tuple(data.shape)
    if patch_size <= 0 or any(n % patch_size for n in shape):
        raise ArgumentError(f"shape {shape} is not divisible by patch size {patch_size}")
    p = patch_size
    return rearrange(data, _PATCH_PATTERN, px=p, py=p, pz=p)


def unpatchify(tokens, grid: Sequence[int], patch_size: int):
    p = patch_size
    gx, gy, gz = grid
    return rearrange(tokens, _UNPATCH_PATTERN, gx=gx, gy=gy, gz=gz, px=p, py=p, pz=p)


def token_grid(shape: Sequence[int], patch_size: int) -> tuple[int, int, int]:
    if any(n % patch_size for n in shape):
        raise ArgumentError(f"shape {tuple(shape)} is not divisible by patch size {patch_size}")
    return tuple(int(n) // patch_size for n in shape)


# --- spatial / intensity augmentation presets -------------------------------

AUGMENT_LEVELS = ("off", "low", "high")


def augment(data: np.ndarray, spatial: str, intensity: str, seed, normalized: bool = True) -> np.ndarray:
    """Apply a fixed augmentation preset to a (normalized) array.

    spatial: low = integer shift up to 2 voxels per axis; high = shift up to
    4 voxels plus a random flip of the x axis.
    intensity: low = gain in [0.95, 1.05] and Gaussian noise sigma 0.01;
    high = gain in [0.85, 1.15], gamma in [0.8, 1.25] on the [0, 1] rescaled
    intensities, 3-tap blur with probability 0.5 and noise sigma 0.05.
    """
    if spatial not in AUGMENT_LEVELS or intensity not in AUGMENT_LEVELS:
        raise ArgumentError(f"unknown augmentation level ({spatial!r}, {intensity!r})")
    if spatial == "off" and intensity == "off":
        return data
    rng = np.random.default_rng(seed)
    out = data.astype(np.float32, copy=True)
    air = -1.0 if normalized else AIR_HU
    if spatial != "off":
        max_shift = 2 if spatial == "low" else 4
        for axis in range(3):
            s = int(rng.integers(-max_shift, max_shift + 1))
            if s:
                out = np.roll(out, s, axis=axis)
                idx = [slice(None)] * 3
                idx[axis] = slice(0, s) if s > 0 else slice(s, None)
                out[tuple(idx)] = air
        if spatial == "high" and rng.random() < 0.5:
            out = out[::-1].copy()
    if intensity != "off":
        lo_hi = (0.95, 1.05) if intensity == "low" else (0.85, 1.15)
        out = out * np.float32(rng.uniform(*lo_hi))
        if intensity == "high":
            gamma = rng.uniform(0.8, 1.25)
            unit = np.clip((out + 1.0) / 2.0, 0.0, 1.0)
            out = (2.0 * unit**gamma - 1.0).astype(np.float32)
            if rng.random() < 0.5:
                w = np.array([0.25, 0.5, 0.25])
                for axis in range(3):
                    out = correlate1d(out, w, axis=axis, mode="nearest")
        sigma = 0.01 if intensity == "low" else 0.05
        out = out + rng.normal(0.0, sigma, size=out.shape).astype(np.float32)
        if normalized:
            out = np.clip(out, -1.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


# --- on-disk format ----------------------------------------------------------


def write_volume(path, v: Volume) -> None:
    """Write magic, a uint32-LE header length, a UTF-8 JSON header and the float32-LE payload."""
    header = {
        "version": FILE_VERSION,
        "shape": list(v.shape),
        "spacing_mm": list(v.spacing_mm),
        "dtype": DTYPE_TAG,
        "normalized": bool(v.normalized),
        "orientation": v.orientation_tag,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(FILE_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if not raw.startswith(FILE_MAGIC) or len(raw) < len(FILE_MAGIC) + 4:
        raise CorruptFileError(f"{path}: not a volume file")
    offset = len(FILE_MAGIC)
    (head_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    try:
        header = json.loads(raw[offset : offset + head_len].decode("utf-8"))
        shape = tuple(int(n) for n in header["shape"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        normalized = bool(header["normalized"])
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from exc
    if dtype != DTYPE_TAG:
        raise CorruptFileError(f"{path}: unsupported dtype {dtype!r}")
    payload = raw[offset + head_len :]
    expected = int(np.prod(shape)) * 4
    if len(shape) != 3 or len(payload) != expected:
        raise CorruptFileError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(data, spacing, normalized, header.get("orientation", ORIENTATION_TAG))


def write_labels(path, rows: Sequence[tuple[str, Sequence[int]]]) -> None:
    """Sidecar label file: one ``case_id,l0,l1,...`` line per case."""
    with open(path, "w", encoding="utf-8") as fh:
        for case_id, labels in rows:
            fh.write(case_id + "," + ",".join(str(int(x)) for x in labels) + "\n")


def read_labels(path) -> dict[str, np.ndarray]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        case_id, *values = line.split(",")
        try:
            labels = np.array([int(x) for x in values], dtype=np.int64)
        except ValueError as exc:
            raise CorruptFileError(f"{path}:{lineno}: non-integer label") from exc
        if not np.isin(labels, (0, 1)).all():
            raise CorruptFileError(f"{path}:{lineno}: labels must be binary")
        out[case_id] = labels
    return out
