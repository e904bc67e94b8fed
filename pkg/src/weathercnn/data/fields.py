"""Synthetic multi-channel event fields.

Each generator returns a :class:`FieldStack` larger than the event's patch
together with the grid point the patch should be centred on. Positive fields
contain the event signature; negative fields contain look-alike structure
without it, so that no single pixel separates the classes while the spatial
pattern does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..events import EventKind
from ..numerics import DTYPE, Rng


@dataclass
class FieldStack:
    """Co-registered 2-D grids, ``data`` shaped ``(channels, H, W)``."""

    names: tuple[str, ...]
    units: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.units = tuple(self.units)
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"field data must be (channels, H, W), got {self.data.shape}")
        if len(self.names) != self.data.shape[0] or len(self.units) != self.data.shape[0]:
            raise ValueError("one name and unit per channel required")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field contains non-finite values")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.names.index(name)]


# Field grids leave a margin around the patch so events can sit anywhere.
GRID_SHAPE = {
    EventKind.TC: (64, 64),
    EventKind.AR: (196, 272),
    EventKind.WF: (45, 88),
}

UNITS = {
    EventKind.TC: ("hPa", "m/s", "m/s", "K", "K", "mm", "m/s", "m/s"),
    EventKind.AR: ("mm", "1"),
    EventKind.WF: ("K", "mm/day", "hPa"),
}


def smooth_noise(rng: Rng, shape, scale: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to unit standard deviation."""
    field = gaussian_filter(rng.normal(size=shape), scale, mode="wrap")
    return field / field.std()


def _centroid(rng: Rng, grid, patch, slack=2):
    # keep the event where the patch fits, give or take ``slack`` pixels
    (gh, gw), (ph, pw) = grid, patch
    r = rng.integers(ph // 2 - slack, gh - (ph - ph // 2) + slack + 1)
    c = rng.integers(pw // 2 - slack, gw - (pw - pw // 2) + slack + 1)
    return int(np.clip(r, 0, gh - 1)), int(np.clip(c, 0, gw - 1))


def _rel_coords(grid, center):
    rows, cols = np.mgrid[0:grid[0], 0:grid[1]].astype(DTYPE)
    return rows - center[0], cols - center[1]


# -- tropical cyclone ----------------------------------------------------------

def _cyclone(rng: Rng, positive: bool):
    grid = GRID_SHAPE[EventKind.TC]
    center = _centroid(rng, grid, EventKind.TC.patch_size)
    dy, dx = _rel_coords(grid, center)
    r2 = dy * dy + dx * dx

    base_p = 1008.0 + 4.0 * rng.normal()
    psl = base_p + 1.5 * smooth_noise(rng, grid, 8.0)
    ubot = 2.0 * smooth_noise(rng, grid, 6.0) + rng.normal(0, 2.0)
    vbot = 2.0 * smooth_noise(rng, grid, 6.0) + rng.normal(0, 2.0)
    t200 = 218.0 + 2.0 * rng.normal() + 0.8 * smooth_noise(rng, grid, 8.0)
    t500 = 262.0 + 2.0 * rng.normal() + 0.8 * smooth_noise(rng, grid, 8.0)
    tmq = 45.0 + 6.0 * rng.normal() + 3.0 * smooth_noise(rng, grid, 6.0)
    u850 = 2.0 * smooth_noise(rng, grid, 6.0) + rng.normal(0, 2.0)
    v850 = 2.0 * smooth_noise(rng, grid, 6.0) + rng.normal(0, 2.0)

    if positive:
        width = rng.uniform(2.5, 5.0)
        depth = rng.uniform(4.0, 30.0)
        # the well must beat every background low so its minimum is global
        bg_excess = psl[center] - psl.min()
        depth = max(depth, bg_excess + 2.0)
        psl = psl - depth * np.exp(-r2 / (2 * width ** 2))
        # Rankine-like tangential wind peaking near the well radius;
        # sign picks the rotation sense (hemisphere)
        sense = 1.0 if rng.random() < 0.5 else -1.0
        vmax = rng.uniform(6.0, 20.0)
        r = np.sqrt(r2)
        speed = vmax * (r / width) * np.exp(0.5 * (1.0 - r2 / width ** 2))
        with np.errstate(invalid="ignore", divide="ignore"):
            tang_u = np.where(r > 0, -dy / r, 0.0)
            tang_v = np.where(r > 0, dx / r, 0.0)
        ubot = ubot + sense * speed * tang_u
        vbot = vbot + sense * speed * tang_v
        u850 = u850 + 0.7 * sense * speed * tang_u
        v850 = v850 + 0.7 * sense * speed * tang_v
        core = np.exp(-r2 / (2 * (1.5 * width) ** 2))
        t200 = t200 + rng.uniform(1.0, 4.0) * core
        t500 = t500 + rng.uniform(0.5, 3.0) * core
        tmq = tmq + rng.uniform(3.0, 12.0) * np.exp(-r2 / (2 * (2.0 * width) ** 2))
    elif rng.random() < 0.5:
        # near miss: a weak, broad, off-centre depression without a vortex
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(6.0, 14.0)
        ry, rx = dy - dist * np.sin(ang), dx - dist * np.cos(ang)
        width = rng.uniform(5.0, 9.0)
        psl = psl - rng.uniform(1.0, 5.0) * np.exp(-(ry * ry + rx * rx) / (2 * width ** 2))

    data = np.stack([psl, vbot, ubot, t200, t500, tmq, v850, u850])
    return FieldStack(EventKind.TC.channels, UNITS[EventKind.TC], data), center


# -- atmospheric river ---------------------------------------------------------

def _river(rng: Rng, positive: bool):
    grid = GRID_SHAPE[EventKind.AR]
    center = _centroid(rng, grid, EventKind.AR.patch_size)
    dy, dx = _rel_coords(grid, center)

    tmq = 18.0 + 4.0 * rng.normal() + 3.0 * smooth_noise(rng, grid, 14.0)
    land = gaussian_filter(rng.normal(size=grid), 18.0, mode="wrap")
    land = (land > np.quantile(land, rng.uniform(0.4, 0.8))).astype(DTYPE)

    if positive:
        # narrow corridor through the centroid, tilted within 40 degrees of
        # north-south, bent by a quadratic offset along its length
        tilt = np.deg2rad(rng.uniform(-40.0, 40.0))
        along = dy * np.cos(tilt) + dx * np.sin(tilt)
        across = -dy * np.sin(tilt) + dx * np.cos(tilt)
        bend = rng.uniform(-1.0, 1.0) / 150.0
        offset = across - bend * along ** 2
        width = rng.uniform(3.0, 7.0)
        amp = rng.uniform(8.0, 25.0)
        taper = 1.0 / (1.0 + np.exp((np.abs(along) - rng.uniform(90.0, 130.0)) / 8.0))
        tmq = tmq + amp * np.exp(-offset ** 2 / (2 * width ** 2)) * taper
    elif rng.random() < 0.6:
        # compact moisture blob of comparable strength near the centre
        sy, sx = rng.uniform(8.0, 22.0), rng.uniform(8.0, 22.0)
        oy, ox = rng.normal(0.0, 5.0, size=2)
        amp = rng.uniform(8.0, 25.0)
        tmq = tmq + amp * np.exp(-((dy - oy) ** 2 / (2 * sy ** 2) + (dx - ox) ** 2 / (2 * sx ** 2)))

    tmq = np.maximum(tmq, 0.0)
    data = np.stack([tmq, land])
    return FieldStack(EventKind.AR.channels, UNITS[EventKind.AR], data), center


# -- weather front -------------------------------------------------------------

def _front(rng: Rng, positive: bool):
    grid = GRID_SHAPE[EventKind.WF]
    center = _centroid(rng, grid, EventKind.WF.patch_size)
    dy, dx = _rel_coords(grid, center)

    t2m = 283.0 + 5.0 * rng.normal() + 1.0 * smooth_noise(rng, grid, 6.0)
    slp = 1012.0 + 4.0 * rng.normal() + 1.0 * smooth_noise(rng, grid, 8.0)
    precip = np.zeros(grid)

    angle = rng.uniform(0, np.pi)
    normal_y, normal_x = np.sin(angle), np.cos(angle)
    dist = dy * normal_y + dx * normal_x
    if positive:
        # temperature jump across the front line with rain along the line
        jump = rng.uniform(4.0, 12.0)
        t2m = t2m + 0.5 * jump * np.tanh(dist / rng.uniform(2.0, 4.0))
        width = rng.uniform(1.2, 2.5)
        strip = np.exp(-dist ** 2 / (2 * width ** 2))
        modulation = 0.6 + 0.4 * np.abs(smooth_noise(rng, grid, 4.0))
        precip = rng.uniform(6.0, 20.0) * strip * modulation
        slp = slp - rng.uniform(1.0, 4.0) * np.exp(-dist ** 2 / (2 * (3 * width) ** 2))
    else:
        # broad gradient with rain cells that ignore it
        jump = rng.uniform(0.0, 8.0)
        t2m = t2m + jump * dist / 30.0
        n_cells = int(rng.integers(4, 14))
        rows = rng.uniform(0, grid[0], size=n_cells)
        cols = rng.uniform(0, grid[1], size=n_cells)
        if rng.random() < 0.6:
            # a shower sitting on the crop centre, as a front's rain would
            rows[0] = center[0] + rng.normal(0.0, 1.0)
            cols[0] = center[1] + rng.normal(0.0, 1.0)
        yy, xx = np.mgrid[0:grid[0], 0:grid[1]]
        for r0, c0 in zip(rows, cols):
            w = rng.uniform(1.0, 2.5)
            precip += rng.uniform(6.0, 20.0) * np.exp(-((yy - r0) ** 2 + (xx - c0) ** 2) / (2 * w * w))
    precip = np.maximum(precip + 0.5 * smooth_noise(rng, grid, 2.0), 0.0)

    data = np.stack([t2m, precip, slp])
    return FieldStack(EventKind.WF.channels, UNITS[EventKind.WF], data), center


_GENERATORS = {EventKind.TC: _cyclone, EventKind.AR: _river, EventKind.WF: _front}


def synth_event_field(kind, positive: bool, rng: Rng):
    """Generate one field stack and the grid point the patch centres on.

    For positives the point is the event centre (pressure minimum, corridor
    axis, front line); for negatives it is a random crop location.
    """
    kind = EventKind.parse(kind)
    return _GENERATORS[kind](rng, bool(positive))
