"""CPDS dataset container and PPM channel export.

CPDS layout (little-endian)::

    "CPDS"  u32 version  u8 kind  u32 p  u32 m  u32 n  u32 count
    p x (u32 len, utf-8 channel name)
    p x (f64 mean, f64 std)
    count x (u8 label, u32 len, utf-8 provenance, p*m*n f64 patch)
"""

from __future__ import annotations

import os

import numpy as np

from ..binio import Reader, Writer
from ..errors import FormatError, ValidationError
from ..events import EventKind
from .dataset import PatchDataset

CPDS_MAGIC = b"CPDS"
CPDS_VERSION = 1
# refuse headers describing absurd patches before allocating anything
_MAX_PATCH_VALUES = 1 << 28


def dataset_to_bytes(ds: PatchDataset) -> bytes:
    w = Writer()
    w.raw(CPDS_MAGIC)
    w.u32(CPDS_VERSION)
    w.u8(int(ds.kind))
    p, m, n = ds.dims
    for v in (p, m, n, len(ds)):
        w.u32(v)
    for name in ds.channel_names:
        w.text(name)
    w.f64_array(ds.stats.reshape(-1))
    for i in range(len(ds)):
        w.u8(int(ds.labels[i]))
        w.text(ds.provenance[i])
        w.f64_array(ds.patches[i])
    return w.getvalue()


def dataset_from_bytes(data: bytes) -> PatchDataset:
    r = Reader(data)
    if r.raw(4, "magic") != CPDS_MAGIC:
        raise FormatError("not a CPDS file (bad magic)", 0)
    pos = r.pos
    version = r.u32("version")
    if version != CPDS_VERSION:
        raise FormatError(f"unsupported CPDS version {version}", pos)
    pos = r.pos
    code = r.u8("event kind")
    try:
        kind = EventKind(code)
    except ValueError:
        raise FormatError(f"unknown event kind code {code}", pos) from None
    pos = r.pos
    p, m, n, count = (r.u32(w) for w in ("channel count", "height", "width", "record count"))
    if min(p, m, n) == 0 or p * m * n > _MAX_PATCH_VALUES:
        raise FormatError(f"invalid patch dims {p}x{m}x{n}", pos)
    names = [r.text("channel name") for _ in range(p)]
    stats = r.f64_array(2 * p, "channel stats").reshape(p, 2)
    size = p * m * n
    # each record needs at least 1 + 4 + 8*size bytes
    if count > (len(data) - r.pos) // (5 + 8 * size):
        raise FormatError(f"truncated file: header promises {count} records", r.pos)
    patches = np.empty((count, p, m, n))
    labels = np.empty(count, dtype=np.uint8)
    provenance = []
    for i in range(count):
        pos = r.pos
        label = r.u8(f"label of record {i}")
        if label > 1:
            raise FormatError(f"record {i} has label {label}", pos)
        labels[i] = label
        provenance.append(r.text(f"provenance of record {i}"))
        patches[i] = r.f64_array(size, f"patch of record {i}").reshape(p, m, n)
    r.expect_end()
    try:
        return PatchDataset(kind, names, patches, labels, provenance, stats)
    except ValidationError as exc:
        raise FormatError(f"invalid dataset contents: {exc}") from None


def write_dataset(ds: PatchDataset, path) -> None:
    """Write ``ds`` to ``path`` atomically (temp file then rename)."""
    data = dataset_to_bytes(ds)
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_dataset(path) -> PatchDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def channel_to_ppm(image: np.ndarray) -> bytes:
    """Encode a 2-D array as a grey binary PPM (P6), min-max scaled to 0..255.

    A constant image maps to mid-grey.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError(f"expected a 2-D channel, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        scaled = np.rint((image - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full(image.shape, 128.0)
    grey = scaled.astype(np.uint8)
    rgb = np.repeat(grey[:, :, None], 3, axis=2)
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def export_ppm(ds: PatchDataset, index: int, channel, path) -> None:
    """Write channel ``channel`` (name or position) of record ``index`` as PPM."""
    if not 0 <= index < len(ds):
        raise ValidationError(f"record index {index} out of range 0..{len(ds) - 1}")
    if isinstance(channel, str) and channel in ds.channel_names:
        c = ds.channel_names.index(channel)
    else:
        try:
            c = int(channel)
        except (TypeError, ValueError):
            raise ValidationError(f"unknown channel {channel!r}; have {', '.join(ds.channel_names)}") from None
        if not 0 <= c < ds.dims[0]:
            raise ValidationError(f"channel index {c} out of range")
    with open(path, "wb") as fh:
        fh.write(channel_to_ppm(ds.patches[index, c]))
