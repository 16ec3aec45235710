"""Volume files, normalisation, patch sampling, dataset splits and synthetic data.

File formats (all little-endian):

* VXV1 volume: ``b"VXV1"``, three u32 dims ``(d, h, w)``, f32 voxels in C order.
* VXPC patch cache: ``b"VXPC"``, u32 patch length, u64 count, f32 values.
* Manifest: UTF-8 CSV with header ``path,label,subject_id,split``.
"""

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateInputError, DimensionError, FormatError, ParameterError
from .tensor_core import Rng, derive_seed
from .validation import as_float_array

AD, MCI, HC = 0, 1, 2
CLASS_NAMES = {AD: "AD", MCI: "MCI", HC: "HC"}
SPLITS = ("train", "val", "test")

_VOL_MAGIC = b"VXV1"
_PATCH_MAGIC = b"VXPC"


class VolumeRecord(NamedTuple):
    volume: np.ndarray
    label: int
    subject_id: str


class ManifestEntry(NamedTuple):
    path: str
    label: int
    subject_id: str
    split: str


def dump_volume(t):
    t = as_float_array(t, 3, "volume")
    return _VOL_MAGIC + struct.pack("<III", *t.shape) + t.astype("<f4").tobytes()


def parse_volume(raw):
    """Decode VXV1 bytes into a float64 ``(d, h, w)`` array."""
    if len(raw) < 4 or raw[:4] != _VOL_MAGIC:
        raise FormatError("not a VXV1 volume: bad magic", 0)
    if len(raw) < 16:
        raise FormatError("truncated VXV1 header", len(raw))
    dims = struct.unpack_from("<III", raw, 4)
    expected = 16 + 4 * int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise FormatError(
            f"VXV1 payload for dims {dims} needs {expected} bytes, file has {len(raw)}",
            min(len(raw), expected),
        )
    return np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64).reshape(dims)


def save_volume(t, path):
    with open(path, "wb") as fh:
        fh.write(dump_volume(t))


def load_volume(path):
    with open(path, "rb") as fh:
        return parse_volume(fh.read())


def read_volume_header(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head[:4] != _VOL_MAGIC:
        raise FormatError("not a VXV1 volume: bad magic", 0)
    if len(head) < 16:
        raise FormatError("truncated VXV1 header", len(head))
    return struct.unpack_from("<III", head, 4)


def normalize_volume(t):
    """Zero mean, unit population standard deviation, per volume."""
    t = as_float_array(t, 3, "volume")
    mean = t.mean()
    centred = t - mean
    sd = np.sqrt(np.mean(centred * centred))
    if not sd > 1e-12:
        raise DegenerateInputError(f"volume is (nearly) constant: std={sd:.3g}")
    return centred / sd


def _sample_corners(shape, size, per_scan, rng):
    limits = [n - a + 1 for n, a in zip(shape, size)]
    if min(limits) < 1:
        raise DimensionError(f"patch size {size} does not fit volume {shape}")
    return np.stack([rng.integers(lim, per_scan) for lim in limits], axis=1)


def extract_patches_3d(volumes, per_scan, size=(5, 5, 5), seed=0, return_corners=False):
    """``per_scan`` random ``size`` blocks from every volume, each flattened.

    Corners are uniform over all valid positions; scan ``i`` uses the stream
    ``derive_seed(seed, "patches", i)``.  Returns an ``(n_patches, prod(size))``
    array (and the ``(n_patches, 4)`` array of ``(scan, d, h, w)`` corners).
    """
    size = tuple(int(a) for a in size)
    if len(size) != 3:
        raise DimensionError(f"3D patch size must be a triple, got {size}")
    return _extract(volumes, per_scan, size, seed, return_corners)


def extract_patches_2d(volumes, per_scan, size=(11, 11), seed=0, return_corners=False):
    """In-slice patches: corners ``(slice, row, col)`` on the depth axis."""
    size = tuple(int(a) for a in size)
    if len(size) != 2:
        raise DimensionError(f"2D patch size must be a pair, got {size}")
    return _extract(volumes, per_scan, (1,) + size, seed, return_corners)


def _extract(volumes, per_scan, size, seed, return_corners):
    if per_scan < 0:
        raise ParameterError(f"per_scan must be >= 0, got {per_scan}")
    n = int(np.prod(size))
    patches, corners = [], []
    for i, vol in enumerate(volumes):
        vol = as_float_array(vol, 3, "volume")
        c = _sample_corners(vol.shape, size, per_scan, Rng(derive_seed(seed, "patches", i)))
        for d, h, w in c:
            patches.append(vol[d:d + size[0], h:h + size[1], w:w + size[2]].reshape(-1))
        corners.append(np.column_stack([np.full(len(c), i), c]))
    P = np.array(patches).reshape(-1, n)
    if return_corners:
        C = np.concatenate(corners) if corners else np.empty((0, 4), dtype=np.int64)
        return P, C
    return P


def split_counts(n, fractions):
    """Counts per split from fractions; rounding leftovers go to train."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    val = int(np.floor(fractions[1] * n))
    test = int(np.floor(fractions[2] * n))
    return n - val - test, val, test


def split_manifest(n, counts=None, fractions=None, seed=0):
    """Deterministic train/val/test assignment for ``n`` entries.

    Give explicit ``counts`` ``(train, val, test)`` or ``fractions``.  Returns a
    list of split names indexed by entry.
    """
    if counts is None:
        counts = split_counts(n, fractions if fractions is not None else (0.7, 0.15, 0.15))
    counts = [int(c) for c in counts]
    if len(counts) != 3 or min(counts) < 0 or sum(counts) != n:
        raise ParameterError(f"split counts {counts} must be three non-negative values summing to {n}")
    order = Rng(derive_seed(seed, "split")).permutation(n)
    out = [None] * n
    pos = 0
    for name, c in zip(SPLITS, counts):
        for idx in order[pos:pos + c]:
            out[idx] = name
        pos += c
    return out


def dump_manifest(entries):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label", "subject_id", "split"])
    for e in entries:
        writer.writerow([e.path, int(e.label), e.subject_id, e.split])
    return buf.getvalue()


def parse_manifest(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["path", "label", "subject_id", "split"]:
        raise FormatError("manifest header must be 'path,label,subject_id,split'", 0)
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise FormatError(f"manifest line {lineno} has {len(row)} fields, expected 4")
        path, label, subject, split = row
        if split not in SPLITS:
            raise FormatError(f"manifest line {lineno}: unknown split {split!r}")
        try:
            label = int(label)
        except ValueError:
            raise FormatError(f"manifest line {lineno}: label {label!r} is not an integer") from None
        entries.append(ManifestEntry(path, label, subject, split))
    return entries


def write_manifest(entries, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dump_manifest(entries))


def read_manifest(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_manifest(fh.read())


def dump_patches(P):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise DimensionError(f"patch array must be 2D, got shape {P.shape}")
    return _PATCH_MAGIC + struct.pack("<IQ", P.shape[1], P.shape[0]) + P.astype("<f4").tobytes()


def parse_patches(raw):
    if raw[:4] != _PATCH_MAGIC:
        raise FormatError("not a VXPC patch cache: bad magic", 0)
    if len(raw) < 16:
        raise FormatError("truncated VXPC header", len(raw))
    length, count = struct.unpack_from("<IQ", raw, 4)
    expected = 16 + 4 * length * count
    if len(raw) != expected:
        raise FormatError(f"VXPC payload is {len(raw)} bytes, expected {expected}",
                          min(len(raw), expected))
    return np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64).reshape(count, length)


def save_patches(P, path):
    with open(path, "wb") as fh:
        fh.write(dump_patches(P))


def load_patches(path):
    with open(path, "rb") as fh:
        return parse_patches(fh.read())


def _default_blobs():
    # per class: list of (center offset from volume centre, radius, intensity)
    # AD: shrunken central structure, MCI: intermediate, HC: intact
    return {
        AD: [((0, 0, 0), 3.0, 0.4), ((-4, 5, 3), 2.5, 1.0), ((4, -5, -3), 2.0, 0.3)],
        MCI: [((0, 0, 0), 3.5, 0.7), ((-4, 5, 3), 2.5, 0.6), ((4, -5, -3), 2.0, 0.7)],
        HC: [((0, 0, 0), 4.0, 1.0), ((-4, 5, 3), 2.5, 0.3), ((4, -5, -3), 2.0, 1.0)],
    }


@dataclass
class SynthConfig:
    """Desk-scale stand-in for labelled MRI scans.

    Every volume is a shared ellipsoidal "brain" plus class-specific Gaussian
    blobs, jittered per subject by up to ``jitter`` voxels, plus i.i.d. noise.
    """

    shape: tuple = (20, 24, 20)
    blobs: dict = field(default_factory=_default_blobs)
    background: float = 0.5
    noise_sd: float = 0.6
    jitter: int = 0
    count_per_class: int = 100
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ParameterError(f"synthetic shape must be a positive triple, got {self.shape}")
        centre = np.array(self.shape, dtype=float) / 2.0
        for label, blobs in self.blobs.items():
            for offset, radius, _ in blobs:
                c = centre + np.array(offset, dtype=float)
                lo = c - radius - self.jitter
                hi = c + radius + self.jitter
                if np.any(lo < 0) or np.any(hi > np.array(self.shape)):
                    raise ParameterError(
                        f"blob at offset {offset} radius {radius} of class {label} "
                        f"leaves the {self.shape} volume"
                    )
        if self.noise_sd < 0 or self.count_per_class < 0:
            raise ParameterError("noise_sd and count_per_class must be non-negative")
        return self


def synth_generate(cfg=None):
    """Generate ``count_per_class`` labelled volumes per class (class-major order)."""
    cfg = (cfg or SynthConfig()).validate()
    shape = tuple(int(a) for a in cfg.shape)
    grid = np.stack(np.meshgrid(*[np.arange(n) + 0.5 for n in shape], indexing="ij"))
    centre = np.array(shape, dtype=float)[:, None, None, None] / 2.0
    radii = np.array(shape, dtype=float)[:, None, None, None] * 0.4
    base = cfg.background * np.exp(-np.sum(((grid - centre) / radii) ** 2, axis=0))
    records = []
    for label in sorted(cfg.blobs):
        for i in range(cfg.count_per_class):
            rng = Rng(derive_seed(cfg.seed, f"synth-{label}", i))
            vol = base.copy()
            shifts = rng.integers(2 * cfg.jitter + 1, 3 * len(cfg.blobs[label])) - cfg.jitter
            for b, (offset, radius, intensity) in enumerate(cfg.blobs[label]):
                c = centre[:, 0, 0, 0] + np.array(offset, dtype=float) + shifts[3 * b:3 * b + 3]
                r2 = np.sum((grid - c[:, None, None, None]) ** 2, axis=0)
                vol += intensity * np.exp(-r2 / (2.0 * radius**2))
            if cfg.noise_sd:
                vol += rng.normal(vol.size, cfg.noise_sd).reshape(shape)
            records.append(VolumeRecord(vol, label, f"{CLASS_NAMES.get(label, label)}_{i:04d}"))
    return records
