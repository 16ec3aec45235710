"""Frozen convolution + max-pool feature extraction for whole volumes.

Stacking order of a feature vector:

* 3D mode: filter-major, then the pooled map in C order ``(d, h, w)``.
* 2D mode: filter-major, then slice (depth axis), then the pooled slice in
  C order ``(h, w)``.
"""

import struct

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DimensionError, FormatError, ParameterError
from .tensor_core import convolve_bank3d, maxpool_trailing, sigmoid
from .validation import as_float_array, check_window

_FV_MAGIC = b"VXFV"
_FV_VERSION = 1


class ConvFeatureBank:
    """Immutable set of filters, biases and pooling configuration.

    ``mode`` is ``"3d"`` (filters ``r x s x t``, pool ``(a, b, c)``) or ``"2d"``
    (filters ``r x s`` applied to every depth slice, pool ``(a, b)``).
    """

    def __init__(self, mode, filters, biases, pool_window, input_shape):
        if mode not in ("3d", "2d"):
            raise ParameterError(f"mode must be '3d' or '2d', got {mode!r}")
        nd = 3 if mode == "3d" else 2
        filters = np.array(filters, dtype=np.float64)
        biases = np.array(biases, dtype=np.float64).reshape(-1)
        if filters.ndim != nd + 1:
            raise DimensionError(f"{mode} bank needs {nd}D filters, got array of shape {filters.shape}")
        if filters.shape[0] != biases.shape[0]:
            raise DimensionError(f"{filters.shape[0]} filters but {biases.shape[0]} biases")
        input_shape = tuple(int(a) for a in input_shape)
        if len(input_shape) != 3:
            raise DimensionError(f"input_shape must be a triple, got {input_shape}")
        filters.setflags(write=False)
        biases.setflags(write=False)
        self.mode = mode
        self.filters = filters
        self.biases = biases
        self.pool_window = check_window(pool_window, nd)
        self.input_shape = input_shape
        # validates every dimension up front
        self.pooled_shape

    @classmethod
    def from_bases(cls, bases, mode, pool_window, input_shape):
        """Build from ``[(filter, bias), ...]`` as returned by ``extract_bases``."""
        filters = np.stack([f for f, _ in bases])
        biases = np.array([bb for _, bb in bases])
        return cls(mode, filters, biases, pool_window, input_shape)

    @property
    def n_filters(self):
        return self.filters.shape[0]

    @property
    def filter_shape(self):
        return self.filters.shape[1:]

    @property
    def map_shape(self):
        """Shape of one (unpooled) feature map, per slice in 2D mode."""
        spatial = self.input_shape if self.mode == "3d" else self.input_shape[1:]
        out = tuple(n - r + 1 for n, r in zip(spatial, self.filter_shape))
        if min(out) < 1:
            raise DimensionError(
                f"filter {self.filter_shape} does not fit input {self.input_shape}"
            )
        return out

    @property
    def pooled_shape(self):
        pooled = tuple(n // a for n, a in zip(self.map_shape, self.pool_window))
        if min(pooled) < 1:
            raise DimensionError(
                f"pool window {self.pool_window} larger than feature map {self.map_shape}"
            )
        return pooled

    @property
    def n_features(self):
        per_filter = int(np.prod(self.pooled_shape))
        if self.mode == "2d":
            per_filter *= self.input_shape[0]
        return self.n_filters * per_filter

    def _kernels3d(self):
        # a 2D filter is a depth-1 3D filter applied slice by slice
        return self.filters if self.mode == "3d" else self.filters[:, None]

    def __repr__(self):
        return (f"ConvFeatureBank(mode={self.mode!r}, n_filters={self.n_filters}, "
                f"filter_shape={self.filter_shape}, pool_window={self.pool_window}, "
                f"input_shape={self.input_shape})")


def feature_map(x, w, b):
    """``sigmoid(conv(x, w) + b)`` for a single 3D or 2D filter."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim == 2 and w.ndim == 2:
        return sigmoid(convolve_bank3d(x[None], w[None, None])[0, 0] + b)
    if w.ndim == 2:
        w = w[None]
    return sigmoid(convolve_bank3d(x, w[None])[0] + b)


def _check_scan(scan, bank):
    scan = as_float_array(scan, 3, "scan")
    for axis, (got, want) in enumerate(zip(scan.shape, bank.input_shape)):
        if got != want:
            raise DimensionError(
                f"scan extent {got} along axis {axis} does not match bank input {want}"
            )
    return scan


def _pooled_maps(scan, bank):
    """Pooled feature maps, shape ``(p,) + pooled`` (3D) or ``(p, depth) + pooled`` (2D).

    Only the map region that survives pooling is convolved, one slab of pooled
    rows (3D) or one slice (2D) at a time to bound peak memory.
    """
    kernels = bank._kernels3d()
    biases = bank.biases[:, None, None, None]
    win = bank.pool_window
    k = bank.filter_shape
    kept = tuple(n * a for n, a in zip(bank.pooled_shape, win))
    if bank.mode == "3d":
        crop = scan[: kept[0] + k[0] - 1, : kept[1] + k[1] - 1, : kept[2] + k[2] - 1]
        out = np.empty((bank.n_filters,) + bank.pooled_shape)
        for d in range(bank.pooled_shape[0]):
            slab = crop[d * win[0]: (d + 1) * win[0] + k[0] - 1]
            maps = sigmoid(convolve_bank3d(slab, kernels) + biases)
            out[:, d] = maxpool_trailing(maps, win)[:, 0]
        return out
    crop = scan[:, : kept[0] + k[0] - 1, : kept[1] + k[1] - 1]
    out = np.empty((bank.n_filters, scan.shape[0]) + bank.pooled_shape)
    for z in range(scan.shape[0]):
        maps = sigmoid(convolve_bank3d(crop[z:z + 1], kernels) + biases)
        out[:, z] = maxpool_trailing(maps[:, 0], win)
    return out


def featurize3d(scan, bank):
    if bank.mode != "3d":
        raise ParameterError("featurize3d needs a bank in 3d mode")
    return _pooled_maps(_check_scan(scan, bank), bank).reshape(-1)


def featurize2d(scan, bank):
    if bank.mode != "2d":
        raise ParameterError("featurize2d needs a bank in 2d mode")
    return _pooled_maps(_check_scan(scan, bank), bank).reshape(-1)


def featurize(scan, bank):
    return featurize3d(scan, bank) if bank.mode == "3d" else featurize2d(scan, bank)


def write_pgm(path, image):
    """Write an 8-bit P5 PGM; ``image`` is a 2D uint8 array (rows, cols)."""
    image = np.asarray(image, dtype=np.uint8)
    rows, cols = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise FormatError("not a binary PGM (P5)", 0)
    cols, rows, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", pos)
    pos += 1
    if len(raw) - pos != rows * cols:
        raise FormatError("PGM pixel data has wrong length", pos)
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(rows, cols).copy()


def to_gray(values):
    """Min-max scale to 0..255; a constant array maps to mid-gray (128)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_feature_slice(scan, bank, filter_index, slice_index, path):
    """Save one depth slice of one unpooled feature map as a PGM image.

    In 3D mode the slice is taken from the ``(d, h, w)`` map; in 2D mode it is
    the feature map of input slice ``slice_index``.  Returns the pixel array.
    """
    scan = _check_scan(scan, bank)
    if not 0 <= filter_index < bank.n_filters:
        raise ParameterError(f"filter_index {filter_index} outside [0, {bank.n_filters})")
    if bank.mode == "3d":
        depth = bank.map_shape[0]
        if not 0 <= slice_index < depth:
            raise ParameterError(f"slice_index {slice_index} outside [0, {depth})")
        k = bank.filter_shape[0]
        slab = scan[slice_index: slice_index + k]
        fm = feature_map(slab, bank.filters[filter_index], bank.biases[filter_index])[0]
    else:
        depth = scan.shape[0]
        if not 0 <= slice_index < depth:
            raise ParameterError(f"slice_index {slice_index} outside [0, {depth})")
        fm = feature_map(scan[slice_index], bank.filters[filter_index],
                         bank.biases[filter_index])
    image = to_gray(fm)
    write_pgm(path, image)
    return image


def write_feature_cache(path, vectors):
    """Concatenated VXFV records: magic, u32 version, u64 length, f32 LE values."""
    with open(path, "wb") as fh:
        for v in vectors:
            v = np.asarray(v).reshape(-1)
            fh.write(_FV_MAGIC)
            fh.write(struct.pack("<IQ", _FV_VERSION, v.shape[0]))
            fh.write(v.astype("<f4").tobytes())


def read_feature_cache(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    out = []
    pos = 0
    while pos < len(raw):
        if len(raw) - pos < 16:
            raise FormatError("truncated VXFV header", pos)
        if raw[pos:pos + 4] != _FV_MAGIC:
            raise FormatError("bad VXFV magic", pos)
        version, length = struct.unpack_from("<IQ", raw, pos + 4)
        if version != _FV_VERSION:
            raise FormatError(f"unsupported VXFV version {version}", pos + 4)
        pos += 16
        end = pos + 4 * length
        if end > len(raw):
            raise FormatError("truncated VXFV payload", len(raw))
        out.append(np.frombuffer(raw[pos:end], dtype="<f4").astype(np.float32))
        pos = end
    return out


class VolumeFeaturizer(TransformerMixin, BaseEstimator):
    """Transformer mapping volumes ``(N, d, h, w)`` to stacked pooled features.

    ``fit`` only validates: the bank is frozen and never trained here.
    """

    def __init__(self, bank=None):
        self.bank = bank

    def fit(self, X=None, y=None):
        if self.bank is None:
            raise ParameterError("VolumeFeaturizer needs a ConvFeatureBank")
        self.n_features_out_ = self.bank.n_features
        return self

    def transform(self, X):
        if self.bank is None:
            raise ParameterError("VolumeFeaturizer needs a ConvFeatureBank")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4:
            raise DimensionError(f"expected volumes of shape (N, d, h, w), got {X.shape}")
        return np.stack([featurize(scan, self.bank) for scan in X])
