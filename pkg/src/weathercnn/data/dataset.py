"""Labelled patch datasets: construction, normalisation and splitting."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..events import EventKind
from ..numerics import DTYPE, Rng
from .fields import synth_event_field
from .patches import BoundingBox, PatchRecord, Provenance, extract_patch


@dataclass
class PatchDataset:
    """Patches of one event kind stored as a single ``(N, p, m, n)`` array.

    ``stats`` holds the per-channel ``(mean, std)`` that was applied to the
    stored values; raw data carries the identity ``(0, 1)``. A channel with
    ``std == 0`` was constant when the stats were fitted.
    """

    kind: EventKind
    channel_names: tuple[str, ...]
    patches: np.ndarray
    labels: np.ndarray
    provenance: list[str]
    stats: np.ndarray = field(default=None)

    def __post_init__(self):
        self.kind = EventKind.parse(self.kind)
        self.channel_names = tuple(self.channel_names)
        self.patches = np.ascontiguousarray(self.patches, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.provenance = list(self.provenance)
        if self.patches.ndim != 4:
            raise ValidationError(f"patches must be (N, p, m, n), got {self.patches.shape}")
        n, p = self.patches.shape[:2]
        if len(self.labels) != n or len(self.provenance) != n:
            raise ValidationError("labels/provenance length does not match patch count")
        if len(self.channel_names) != p:
            raise ValidationError(f"{len(self.channel_names)} channel names for {p} channels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")
        if self.stats is None:
            self.stats = np.tile([0.0, 1.0], (p, 1))
        self.stats = np.asarray(self.stats, dtype=DTYPE).reshape(p, 2)
        if not np.all(np.isfinite(self.stats)):
            raise ValidationError("normalisation stats must be finite")

    def __len__(self):
        return self.patches.shape[0]

    def __getitem__(self, i) -> PatchRecord:
        return PatchRecord(int(self.labels[i]), self.patches[i], Provenance.decode(self.provenance[i]))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.patches.shape[1:])

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    def subset(self, idx) -> "PatchDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchDataset(self.kind, self.channel_names, self.patches[idx], self.labels[idx],
                            [self.provenance[i] for i in idx], self.stats.copy())


def channel_stats(dataset: PatchDataset) -> np.ndarray:
    """Per-channel ``(mean, std)`` over every record and pixel."""
    if len(dataset) == 0:
        raise ValidationError("cannot fit stats on an empty dataset")
    x = dataset.patches
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    # float noise on a constant channel is not a real spread
    std[std <= 1e-12 * np.maximum(np.abs(mean), 1.0)] = 0.0
    return np.stack([mean, std], axis=1)


def apply_stats(dataset: PatchDataset, stats) -> PatchDataset:
    """Z-score each channel with frozen ``stats``; constant channels become 0."""
    stats = np.asarray(stats, dtype=DTYPE).reshape(-1, 2)
    if stats.shape[0] != dataset.dims[0]:
        raise ValidationError(f"stats for {stats.shape[0]} channels, dataset has {dataset.dims[0]}")
    mean = stats[:, 0][None, :, None, None]
    std = stats[:, 1]
    safe = np.where(std > 0, std, 1.0)[None, :, None, None]
    out = (dataset.patches - mean) / safe
    out[:, std == 0] = 0.0
    return PatchDataset(dataset.kind, dataset.channel_names, out, dataset.labels.copy(),
                        list(dataset.provenance), stats.copy())


def normalize(dataset: PatchDataset) -> PatchDataset:
    """Fit per-channel stats on ``dataset`` and z-score it with them."""
    return apply_stats(dataset, channel_stats(dataset))


def split(dataset: PatchDataset, fractions=(0.8, 0.1, 0.1), rng: Rng | None = None):
    """Stratified train/val/test split.

    Each label's records are shuffled with ``rng`` and cut by rounding the
    fraction boundaries; records keep their order within each part.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = rng or Rng(0)
    parts = ([], [], [])
    for label in (1, 0):
        idx = np.flatnonzero(dataset.labels == label)
        idx = idx[rng.permutation(idx.size)]
        cut1 = int(round(fractions[0] * idx.size))
        cut2 = int(round((fractions[0] + fractions[1]) * idx.size))
        for part, chunk in zip(parts, (idx[:cut1], idx[cut1:cut2], idx[cut2:])):
            part.extend(chunk.tolist())
    return tuple(dataset.subset(sorted(p)) for p in parts)


def _make_record(args):
    kind, positive, seed, index = args
    rng = Rng(seed)
    stack, centroid = synth_event_field(kind, positive, rng)
    h, w = kind.patch_size
    box = BoundingBox(h // 2, w // 2, h, w)
    rec = extract_patch(stack, box, centroid, label=int(positive),
                        source=f"synth-{kind.code}-{seed}-{index}", channel_order=kind.channels)
    return rec


def build_synthetic_dataset(kind, n_pos: int, n_neg: int, rng: Rng, workers: int = 1) -> PatchDataset:
    """Generate ``n_pos`` positive then ``n_neg`` negative centred patches.

    Record ``i`` is generated from its own stream seeded ``rng.seed + i``, so
    parallel and serial generation give identical datasets.
    """
    kind = EventKind.parse(kind)
    if n_pos < 1 or n_neg < 1:
        raise ValidationError("need at least one positive and one negative record")
    n = n_pos + n_neg
    jobs = [(kind, i < n_pos, rng.child(i).seed, i) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_make_record, jobs, chunksize=16))
    else:
        records = [_make_record(j) for j in jobs]
    patches = np.stack([r.patch for r in records])
    labels = np.array([r.label for r in records], dtype=np.uint8)
    return PatchDataset(kind, kind.channels, patches, labels, [r.provenance.encode() for r in records])


def threshold_baseline(dataset: PatchDataset, chunk: int = 4096) -> tuple[float, tuple]:
    """Best training accuracy of a one-pixel, one-channel threshold rule.

    Sweeps every (channel, row, col) feature, every cut between sorted values
    and both polarities. Returns the accuracy and the winning
    ``(channel, row, col)``.
    """
    x = dataset.patches.reshape(len(dataset), -1)
    y = dataset.labels.astype(np.int64)
    n = y.size
    n_pos = int(y.sum())
    best, best_feature = 0.0, 0
    for start in range(0, x.shape[1], chunk):
        block = x[:, start:start + chunk]
        order = np.argsort(block, axis=0, kind="stable")
        ys = y[order]
        vals = np.take_along_axis(block, order, axis=0)
        # positives at or below each cut; the rule "<= cut -> positive"
        pos_below = np.cumsum(ys, axis=0)
        neg_above = (n - n_pos) - (np.arange(1, n + 1)[:, None] - pos_below)
        acc_le = (pos_below + neg_above) / n
        # only cut between distinct values
        valid = np.ones_like(acc_le, dtype=bool)
        valid[:-1] = vals[1:] != vals[:-1]
        acc = np.where(valid, np.maximum(acc_le, 1.0 - acc_le), 0.0)
        acc = np.maximum(acc.max(axis=0), max(n_pos, n - n_pos) / n)
        j = int(np.argmax(acc))
        if acc[j] > best:
            best, best_feature = float(acc[j]), start + j
    return best, tuple(int(v) for v in np.unravel_index(best_feature, dataset.dims))
