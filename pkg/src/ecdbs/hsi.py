"""Hyperspectral cube I/O, patch extraction, splitting and report emitters.

Cube files use the HSIC format, label masks the HSIL format (both little
endian, see read/write docstrings).  Change maps are written as binary PGM
(P5) and tabular reports as UTF-8 CSV with a header row.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass

import numpy as np

HSIC_MAGIC = b"HSIC"
HSIL_MAGIC = b"HSIL"
HSIC_VERSION = 1
HSIL_VERSION = 1
_DTYPE_F32 = 1

UNCHANGED, CHANGED, UNLABELED = 0, 1, 2


class FormatError(ValueError):
    """Base class for file-format failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class HsiCube:
    """A bands x height x width single-precision raster, band-major."""

    def __init__(self, data):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        if arr.ndim != 3:
            raise ValueError(f"cube must be (B,h,w), got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError(f"cube needs at least 2 bands, got {arr.shape[0]}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("cube contains non-finite values")
        self.data = arr

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        return isinstance(other, HsiCube) and np.array_equal(self.data, other.data)


class LabelMask:
    """Per-pixel labels: 0 unchanged, 1 changed, 2 unlabeled."""

    def __init__(self, values):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.uint8))
        if arr.ndim != 2:
            raise ValueError(f"label mask must be (h,w), got shape {arr.shape}")
        if arr.max(initial=0) > 2:
            raise ValueError("label values must be in {0,1,2}")
        self.values = arr

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def labeled_mask(self):
        return self.values != UNLABELED


def write_cube(cube: HsiCube, path) -> None:
    """Write the HSIC format: magic, version u16, dtype u16, B/h/w u32, f32 payload."""
    header = struct.pack(
        "<4sHHIII",
        HSIC_MAGIC,
        HSIC_VERSION,
        _DTYPE_F32,
        cube.bands,
        cube.height,
        cube.width,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(cube.data.astype("<f4").tobytes())


def read_cube(path) -> HsiCube:
    """Read an HSIC file back, validating magic, version, size and finiteness."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise TruncatedError(f"{path}: file shorter than the HSIC header")
    magic, version, dtype, b, h, w = struct.unpack("<4sHHIII", raw[:20])
    if magic != HSIC_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != HSIC_VERSION:
        raise VersionError(f"{path}: unsupported HSIC version {version}")
    if dtype != _DTYPE_F32:
        raise VersionError(f"{path}: unsupported dtype code {dtype}")
    expected = b * h * w * 4
    payload = raw[20:]
    if len(payload) != expected:
        raise TruncatedError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(b, h, w)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    if b < 2:
        raise ValueError(f"{path}: cube needs at least 2 bands, got {b}")
    return HsiCube(data)


def write_labels(mask: LabelMask, path) -> None:
    header = struct.pack("<4sHII", HSIL_MAGIC, HSIL_VERSION, mask.height, mask.width)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(mask.values.tobytes())


def read_labels(path) -> LabelMask:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14:
        raise TruncatedError(f"{path}: file shorter than the HSIL header")
    magic, version, h, w = struct.unpack("<4sHII", raw[:14])
    if magic != HSIL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != HSIL_VERSION:
        raise VersionError(f"{path}: unsupported HSIL version {version}")
    payload = raw[14:]
    if len(payload) != h * w:
        raise TruncatedError(f"{path}: payload holds {len(payload)} bytes, header promises {h * w}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if values.max(initial=0) > 2:
        raise FormatError(f"{path}: label values outside {{0,1,2}}")
    return LabelMask(values)


def difference_image(t1: HsiCube, t2: HsiCube) -> HsiCube:
    """Signed per-element difference t2 - t1 of two co-registered cubes."""
    if t1.shape != t2.shape:
        raise ValueError(f"cube shapes disagree: {t1.shape} vs {t2.shape}")
    return HsiCube(t2.data - t1.data)


# ---------------------------------------------------------------------------
# patches and splits


class PatchSet:
    """Centered s x s neighborhoods of labeled pixels, views into a padded cube.

    Patch views borrow the padded raster held by this object; they must not
    outlive it.
    """

    def __init__(self, padded, rows, cols, labels, size):
        self._padded = padded
        self.rows = rows
        self.cols = cols
        self.labels = labels
        self.size = size

    def __len__(self):
        return len(self.rows)

    def patch(self, i):
        s = self.size
        r, c = self.rows[i], self.cols[i]
        return self._padded[:, r : r + s, c : c + s]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return PatchSet(
            self._padded, self.rows[idx], self.cols[idx], self.labels[idx], self.size
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.rows[i], self.cols[i], self.patch(i), int(self.labels[i])


def pad_cube_reflect(cube: HsiCube, s: int) -> np.ndarray:
    """Mirror-reflect the spatial borders by s//2 so every pixel has a patch."""
    half = s // 2
    return np.pad(cube.data, ((0, 0), (half, half), (half, half)), mode="reflect")


def extract_patches(cube: HsiCube, labels: LabelMask, s: int) -> PatchSet:
    """One patch per labeled (non-2) pixel, centered, mirror-reflected borders."""
    if s % 2 == 0:
        raise ValueError(f"patch size must be odd, got {s}")
    if s > min(cube.height, cube.width):
        raise ValueError(
            f"patch size {s} exceeds image extent {cube.height}x{cube.width}"
        )
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ValueError(
            f"label mask {labels.height}x{labels.width} does not match cube {cube.height}x{cube.width}"
        )
    padded = pad_cube_reflect(cube, s)
    rows, cols = np.nonzero(labels.labeled_mask())
    if rows.size == 0:
        warnings.warn("label mask is fully unlabeled; patch set is empty")
    return PatchSet(
        padded,
        rows.astype(np.int64),
        cols.astype(np.int64),
        labels.values[rows, cols].astype(np.int64),
        s,
    )


@dataclass
class SplitSpec:
    """Stratified train/val/test split: validation is carved from the train share."""

    train_fraction: float
    val_fraction: float = 0.01
    seed: int = 0

    def validate(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train fraction must be in (0,1), got {self.train_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val fraction must be in [0,1), got {self.val_fraction}")


def split(patches: PatchSet, spec: SplitSpec):
    """Deterministic stratified split into (train, val, test) PatchSets."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x5B117]))
    train_idx, val_idx, test_idx = [], [], []
    for cls in (UNCHANGED, CHANGED):
        members = np.nonzero(patches.labels == cls)[0]
        if members.size == 0:
            continue
        order = rng.permutation(members.size)
        n_train = int(round(spec.train_fraction * members.size))
        if n_train == 0:
            raise ValueError(
                f"train fraction {spec.train_fraction} yields zero samples of class {cls}"
            )
        picked = members[order]
        train_cls = picked[:n_train]
        test_idx.append(picked[n_train:])
        n_val = int(round(spec.val_fraction * n_train))
        val_idx.append(train_cls[:n_val])
        train_idx.append(train_cls[n_val:])
    def _gather(parts):
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))
    return (
        patches.subset(_gather(train_idx)),
        patches.subset(_gather(val_idx)),
        patches.subset(_gather(test_idx)),
    )


# ---------------------------------------------------------------------------
# diagnostics


def band_entropy(cube: HsiCube) -> np.ndarray:
    """Shannon entropy (nats) of a 256-bin histogram per min-max-normalised band."""
    out = np.zeros(cube.bands, dtype=np.float64)
    for b in range(cube.bands):
        band = cube.data[b].astype(np.float64).ravel()
        lo, hi = band.min(), band.max()
        if hi == lo:
            out[b] = 0.0
            continue
        norm = (band - lo) / (hi - lo)
        bins = np.minimum((norm * 256).astype(np.int64), 255)
        counts = np.bincount(bins, minlength=256)
        p = counts[counts > 0] / band.size
        out[b] = float(-(p * np.log(p)).sum())
    return out


# ---------------------------------------------------------------------------
# report emitters


def write_change_map(predictions, path) -> None:
    """Binary PGM (P5, maxval 255): changed pixels 255, unchanged 0."""
    arr = np.asarray(predictions)
    if arr.ndim != 2:
        raise ValueError(f"change map must be (h,w), got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("change map values must be 0 or 1")
    h, w = arr.shape
    payload = (arr.astype(np.uint8) * 255).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write change map to {path}: {exc}") from exc


def write_csv_report(header, rows, path) -> None:
    """UTF-8 CSV with a required header row; floats keep full repr precision."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def _cell(value):
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value


def read_csv_report(path):
    """Parse a CSV written by write_csv_report back into (header, rows of str)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]
