"""Volume ingestion, preprocessing, temporal encoding and dataset splits.

Supported inputs are a subset of single-file NIfTI-1 (``.nii``; u8, i16, f32
voxels; scl_slope/scl_inter applied) and the ``.rvol`` raw format::

    b"RVOL" | version u16 LE (=1) | dtype u8 (NIfTI code 2/4/16) | reserved u8
    | d, h, w as u32 LE | payload, little-endian, row-major

NIfTI voxel ``(i, j, k)`` lands at array index ``[i, j, k]`` (the file stores
``i`` fastest); ``.rvol`` payloads are C-ordered ``(d, h, w)``.
"""
import math
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (ClassTooSmall, MalformedHeader, ManifestError, ShortBuffer, UnsupportedDatatype,
                     VoxelCountMismatch)

NIFTI_HEADER_SIZE = 348
RVOL_MAGIC = b"RVOL"
RVOL_HEADER = struct.Struct("<4sHBBIII")

# NIfTI datatype code -> (name, numpy base dtype)
DTYPES = {2: ("u8", np.uint8), 4: ("i16", np.int16), 16: ("f32", np.float32)}
CODES = {name: code for code, (name, _) in DTYPES.items()}
MAX_EXTENT = 4096


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple
    voxel_dtype: str = "f32"
    endianness: str = "little"
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    source_path: str = ""

    def __post_init__(self):
        if len(self.dims) != 3 or any(not 1 <= int(n) <= MAX_EXTENT for n in self.dims):
            raise MalformedHeader(f"dims must be three extents in [1, {MAX_EXTENT}], got {self.dims}")
        if self.voxel_dtype not in CODES:
            raise UnsupportedDatatype(f"voxel dtype {self.voxel_dtype!r}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))


@dataclass
class Volume3D:
    meta: VolumeMeta
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != self.meta.dims:
            if self.data.size != int(np.prod(self.meta.dims)):
                raise VoxelCountMismatch(f"{self.data.size} voxels for dims {self.meta.dims}")
            self.data = self.data.reshape(self.meta.dims)

    @classmethod
    def from_array(cls, arr, source_path=""):
        arr = np.asarray(arr, dtype=np.float32)
        return cls(VolumeMeta(arr.shape, source_path=source_path), arr)

    def with_data(self, arr):
        arr = np.asarray(arr, dtype=np.float32)
        meta = VolumeMeta(arr.shape, self.meta.voxel_dtype, self.meta.endianness,
                          self.meta.scl_slope, self.meta.scl_inter, self.meta.source_path)
        return Volume3D(meta, arr)


# -- NIfTI -----------------------------------------------------------------
def _header_fields(buf, order):
    sizeof_hdr = struct.unpack_from(order + "i", buf, 0)[0]
    dim = struct.unpack_from(order + "8h", buf, 40)
    return sizeof_hdr, dim


def parse_nifti_header(buf):
    """Decode the fields of a NIfTI-1 header this package relies on."""
    buf = bytes(buf)
    if len(buf) < NIFTI_HEADER_SIZE:
        raise ShortBuffer(f"NIfTI header needs {NIFTI_HEADER_SIZE} bytes, got {len(buf)}")
    order = None
    for cand in ("<", ">"):
        sizeof_hdr, dim = _header_fields(buf, cand)
        if sizeof_hdr == NIFTI_HEADER_SIZE and 1 <= dim[0] <= 7:
            order = cand
            break
    if order is None:
        raise MalformedHeader("sizeof_hdr != 348 or dim[0] outside 1..7 under both byte orders")
    _, dim = _header_fields(buf, order)
    ndim = dim[0]
    if any(n > 1 for n in dim[4:ndim + 1]):
        raise MalformedHeader(f"only 3-D volumes are supported, got dim={dim[:ndim + 1]}")
    dims = tuple(dim[i] if i <= ndim else 1 for i in (1, 2, 3))
    if any(n < 1 for n in dims):
        raise MalformedHeader(f"non-positive extent in dim={dim}")
    code = struct.unpack_from(order + "h", buf, 70)[0]
    if code not in DTYPES:
        raise UnsupportedDatatype(f"NIfTI datatype code {code} is not supported")
    slope, inter = struct.unpack_from(order + "2f", buf, 112)
    if slope == 0 or not math.isfinite(slope):
        slope = 1.0
    if not math.isfinite(inter):
        inter = 0.0
    return VolumeMeta(dims, DTYPES[code][0], "little" if order == "<" else "big",
                      float(slope), float(inter))


def _nifti_vox_offset(buf, meta):
    order = "<" if meta.endianness == "little" else ">"
    off = struct.unpack_from(order + "f", buf, 108)[0]
    return max(int(off), NIFTI_HEADER_SIZE + 4) if math.isfinite(off) else NIFTI_HEADER_SIZE + 4


def _decode(payload, meta, order):
    base = np.dtype(DTYPES[CODES[meta.voxel_dtype]][1]).newbyteorder(order)
    n = int(np.prod(meta.dims))
    if len(payload) < n * base.itemsize:
        raise VoxelCountMismatch(
            f"payload holds {len(payload) // base.itemsize} voxels, header promises {n}")
    return np.frombuffer(payload, dtype=base, count=n)


def _scaled(raw, meta):
    vals = raw.astype(np.float32)
    if meta.scl_slope != 1.0 or meta.scl_inter != 0.0:
        vals = (vals.astype(np.float64) * meta.scl_slope + meta.scl_inter).astype(np.float32)
    return vals


def _finite(data, path):
    if not np.all(np.isfinite(data)):
        raise VoxelCountMismatch(f"{path}: non-finite voxel values")
    return data


def load_nifti(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    meta = parse_nifti_header(buf[:NIFTI_HEADER_SIZE])
    meta = VolumeMeta(meta.dims, meta.voxel_dtype, meta.endianness, meta.scl_slope,
                      meta.scl_inter, str(path))
    off = _nifti_vox_offset(buf, meta)
    raw = _decode(buf[off:], meta, "<" if meta.endianness == "little" else ">")
    data = _scaled(raw, meta).reshape(meta.dims, order="F")
    return Volume3D(meta, _finite(np.ascontiguousarray(data), path))


# -- RVOL ------------------------------------------------------------------
def load_rvol(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < RVOL_HEADER.size:
        raise ShortBuffer(f"{path}: truncated .rvol header")
    magic, version, code, _, d, h, w = RVOL_HEADER.unpack_from(buf, 0)
    if magic != RVOL_MAGIC or version != 1:
        raise MalformedHeader(f"{path}: not an RVOL v1 file")
    if code not in DTYPES:
        raise UnsupportedDatatype(f"RVOL dtype code {code}")
    meta = VolumeMeta((d, h, w), DTYPES[code][0], "little", source_path=str(path))
    raw = _decode(buf[RVOL_HEADER.size:], meta, "<")
    return Volume3D(meta, _finite(raw.astype(np.float32).reshape(meta.dims), path))


def write_rvol(vol, path, dtype="f32"):
    """Write ``vol`` as ``.rvol``. Integer dtypes require integral in-range values."""
    if dtype not in CODES:
        raise UnsupportedDatatype(f"voxel dtype {dtype!r}")
    base = np.dtype(DTYPES[CODES[dtype]][1]).newbyteorder("<")
    data = np.asarray(vol.data if isinstance(vol, Volume3D) else vol, dtype=np.float32)
    if base.kind != "f":
        info = np.iinfo(base)
        if not np.all(np.round(data) == data) or data.min() < info.min or data.max() > info.max:
            raise ValueError(f"values do not fit {dtype} exactly")
    d, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(RVOL_HEADER.pack(RVOL_MAGIC, 1, CODES[dtype], 0, d, h, w))
        fh.write(np.ascontiguousarray(data.astype(base)).tobytes())


def load_volume(path):
    """Load ``.nii`` or ``.rvol`` (chosen by extension) as float32 voxels."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".nii":
        return load_nifti(path)
    if ext == ".rvol":
        return load_rvol(path)
    raise UnsupportedDatatype(f"unsupported volume extension {ext!r} ({path})")


# -- preprocessing ---------------------------------------------------------
def _interp_axis(a, axis, n_out):
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def resample_trilinear(vol, target):
    """Corner-aligned trilinear resampling (grid endpoints map to endpoints)."""
    target = tuple(int(n) for n in target)
    if len(target) != 3 or any(n < 1 for n in target):
        raise ValueError(f"target extents must be three positive integers, got {target}")
    if target == vol.data.shape:
        return vol.with_data(vol.data.copy())
    a = vol.data.astype(np.float64)
    for axis, n in enumerate(target):
        a = _interp_axis(a, axis, n)
    return vol.with_data(a.astype(np.float32))


def zscore_normalize(vol, eps=1e-6):
    """``(x - mean) / max(std, eps)`` with the population standard deviation."""
    a = vol.data.astype(np.float64)
    mu = a.mean()
    sd = a.std()
    return vol.with_data(((a - mu) / max(sd, eps)).astype(np.float32))


def encode_temporal(vol, T, noise_sigma=0.1, seed=0):
    """Stack ``T`` copies of the volume, each with its own i.i.d. Gaussian noise.

    The noise of step ``t`` comes from a generator keyed on ``(seed, t)``, so
    steps can be produced in any order.
    """
    if T < 1 or noise_sigma < 0:
        raise ValueError("need T >= 1 and noise_sigma >= 0")
    base = vol.data if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float32)
    out = np.empty((T,) + base.shape, dtype=np.float32)
    for t in range(T):
        if noise_sigma == 0:
            out[t] = base
        else:
            rng = np.random.default_rng([int(seed), t])
            out[t] = base + np.float32(noise_sigma) * rng.standard_normal(base.shape, dtype=np.float32)
    return out


@dataclass(frozen=True)
class EncodedSample:
    tensor: np.ndarray    # (T, d, h, w)
    label: int
    seed: int


def preprocess(vol, dims, T, noise_sigma=0.1, seed=0, label=0):
    """Resample, z-score and temporally encode one volume."""
    v = zscore_normalize(resample_trilinear(vol, dims))
    return EncodedSample(encode_temporal(v, T, noise_sigma, seed), int(label), int(seed))


# -- splits ----------------------------------------------------------------
@dataclass
class SplitPlan:
    fold_assignments: list
    train_indices: list
    val_indices: list
    test_indices: list
    ratio: str

    @property
    def n_folds(self):
        return max(self.fold_assignments) + 1 if self.fold_assignments else 0

    def fold(self, k):
        """``(train, held_out)`` index lists for fold ``k`` of a k-fold plan."""
        held = [i for i, f in enumerate(self.fold_assignments) if f == k]
        rest = [i for i, f in enumerate(self.fold_assignments) if f != k]
        return rest, held


_SCHEME = re.compile(r"^\s*(holdout|kfold)\(\s*([0-9.:]+)\s*\)\s*$")


def _parse_scheme(scheme):
    m = _SCHEME.match(scheme)
    if not m:
        raise ValueError(f"split scheme must be 'holdout(r)' or 'kfold(k)', got {scheme!r}")
    kind, arg = m.groups()
    if kind == "kfold":
        return kind, int(arg), f"{int(arg)}-fold"
    if ":" in arg:
        a, b = (float(s) for s in arg.split(":"))
        r = a / (a + b)
    else:
        r = float(arg)
    if not 0 < r < 1:
        raise ValueError(f"holdout train fraction must lie in (0, 1), got {r}")
    tag = arg if ":" in arg else f"{round(r * 10):g}:{round((1 - r) * 10):g}"
    return kind, r, tag


def stratified_split(labels, scheme="holdout(8:2)", seed=0):
    """Per-class shuffle, then proportional assignment.

    ``holdout(r)`` puts ``round(n_c * r)`` members of each class in train
    (at least one on each side); ``kfold(k)`` deals shuffled class members to
    folds round-robin, continuing the rotation across classes so fold sizes
    differ by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    kind, arg, tag = _parse_scheme(scheme)
    need = arg if kind == "kfold" else 2
    classes, counts = np.unique(labels, return_counts=True)
    small = [int(c) for c, n in zip(classes, counts) if n < need]
    if small:
        raise ClassTooSmall(f"classes {small} have fewer than {need} members")
    rng = np.random.default_rng(int(seed))
    assign = np.zeros(labels.size, dtype=np.int64)
    cursor = 0
    for c in classes:
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        if kind == "kfold":
            for j, idx in enumerate(members):
                assign[idx] = (cursor + j) % arg
            cursor = (cursor + members.size) % arg
        else:
            n_train = int(math.floor(members.size * arg + 0.5))
            n_train = min(max(n_train, 1), members.size - 1)
            assign[members[n_train:]] = 1
    folds = [int(f) for f in assign]
    if kind == "kfold":
        return SplitPlan(folds, list(range(labels.size)), [], [], tag)
    train = [i for i, f in enumerate(folds) if f == 0]
    test = [i for i, f in enumerate(folds) if f == 1]
    return SplitPlan(folds, train, [], test, tag)


# -- synthetic data --------------------------------------------------------
def blob_layout(classes, dims, seed):
    """Blob centres and radius per class: class ``c`` carries ``c`` blobs."""
    radius = max(1, min(dims) // 8)
    layout = {}
    for c in range(classes):
        rng = np.random.default_rng([int(seed), 7919, c])
        layout[c] = [tuple(int(rng.integers(radius, n - radius)) if n > 2 * radius else n // 2
                           for n in dims) for _ in range(c)]
    return layout, radius


def synth_dataset(n_per_class, classes=3, dims=(32, 32, 32), seed=0, amplitude=2.0):
    """Separable stand-in data: unit Gaussian noise plus class-specific blobs.

    Returns ``(volumes, labels)`` in class-major order.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    dims = tuple(int(n) for n in dims)
    layout, radius = blob_layout(classes, dims, seed)
    grid = np.indices(dims, dtype=np.float64)
    signals = []
    for c in range(classes):
        sig = np.zeros(dims)
        for centre in layout[c]:
            r2 = sum((g - x0) ** 2 for g, x0 in zip(grid, centre))
            sig += amplitude * (r2 <= radius * radius)
        signals.append(sig)
    vols, labels = [], []
    for c in range(classes):
        for i in range(n_per_class):
            rng = np.random.default_rng([int(seed), c, i])
            data = (rng.standard_normal(dims) + signals[c]).astype(np.float32)
            vols.append(Volume3D.from_array(data, source_path=f"synth:{seed}:{c}:{i}"))
            labels.append(c)
    return vols, labels


# -- manifest --------------------------------------------------------------
@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str = ""


def read_manifest(path):
    """Lines ``<path>\\t<label>[\\t<split>]``; relative paths resolve against the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ManifestError(f"{path}:{n}: expected '<path>\\t<label>[\\t<split>]'")
            p = parts[0] if os.path.isabs(parts[0]) else os.path.join(base, parts[0])
            try:
                label = int(parts[1])
            except ValueError:
                raise ManifestError(f"{path}:{n}: label {parts[1]!r} is not an integer") from None
            out.append(ManifestEntry(p, label, parts[2].strip() if len(parts) > 2 else ""))
    return out


def write_manifest(entries, path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            p = os.path.relpath(os.path.abspath(e.path), base)
            fh.write(f"{p}\t{e.label}" + (f"\t{e.split}" if e.split else "") + "\n")
