"""Peripapillary NFL thickness / reflectance polar maps.

Processing chain for one scan::

    ring profiles --interpolate--> dense polar map --normalize (dB)-->
    --inpaint vessel shadows--> --recenter on disc--> --annulus mask-->
    --azimuthal first-harmonic filter--> --superpixel reduction-->

Angles follow the map convention theta_j = 2*pi*j / n_angles. Radii are in
mm from the scan (or, after recentering, disc) center.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    EmptyGridError,
    InsufficientDataError,
    OutOfRangeError,
    UnrecoverableMaskError,
)

REFLECTANCE_DB = "reflectance_db"
THICKNESS_UM = "thickness_um"
RAW = "raw"
MAP_KINDS = (REFLECTANCE_DB, THICKNESS_UM, RAW)

TWO_PI = 2.0 * np.pi
_RADIUS_TOL = 1e-9


def default_ring_diameters(n_rings=13, inner=1.3, outer=4.9):
    return np.linspace(inner, outer, n_rings)


def default_dense_radii(n_radii=141, inner=0.65, outer=2.45):
    return np.linspace(inner, outer, n_radii)


def angles(n_angles):
    return TWO_PI * np.arange(n_angles) / n_angles


@dataclass
class RingProfileSet:
    """Per-ring, per-angle layer-band measurements of one scan."""

    ring_diameters: np.ndarray
    nfl_band_sum: np.ndarray
    ppec_band_mean: np.ndarray
    nfl_thickness: np.ndarray

    def __post_init__(self):
        self.ring_diameters = np.asarray(self.ring_diameters, dtype=float)
        self.nfl_band_sum = np.asarray(self.nfl_band_sum, dtype=float)
        self.ppec_band_mean = np.asarray(self.ppec_band_mean, dtype=float)
        self.nfl_thickness = np.asarray(self.nfl_thickness, dtype=float)
        d = self.ring_diameters
        if d.ndim != 1 or len(d) < 2:
            raise ConfigError("need at least two rings")
        if np.any(np.diff(d) <= 0):
            raise ConfigError("ring diameters must be strictly increasing")
        shape = (len(d), self.nfl_band_sum.shape[-1])
        for name in ("nfl_band_sum", "ppec_band_mean", "nfl_thickness"):
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.ppec_band_mean <= 0):
            raise DomainError("PPEC band mean must be positive")

    @property
    def ring_radii(self):
        return self.ring_diameters / 2.0

    @property
    def n_angles(self):
        return self.nfl_band_sum.shape[1]


@dataclass
class PolarMap:
    values: np.ndarray
    radii: np.ndarray
    kind: str
    valid: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.radii):
            raise ConfigError(f"values {self.values.shape} do not match {len(self.radii)} radii")
        if np.any(np.diff(self.radii) <= 0):
            raise ConfigError("radii must be strictly increasing")
        if self.kind not in MAP_KINDS:
            raise ConfigError(f"unknown map kind {self.kind!r}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ConfigError("valid mask shape mismatch")

    @property
    def n_angles(self):
        return self.values.shape[1]

    @property
    def angles(self):
        return angles(self.n_angles)

    def replace(self, **kw):
        out = PolarMap(
            kw.get("values", self.values.copy()),
            kw.get("radii", self.radii.copy()),
            kw.get("kind", self.kind),
            kw.get("valid", self.valid.copy()),
        )
        return out

    def masked_mean(self):
        return float(self.values[self.valid].mean())


@dataclass
class VesselMask:
    shadowed: np.ndarray

    def __post_init__(self):
        self.shadowed = np.asarray(self.shadowed, dtype=bool)


@dataclass(frozen=True)
class AnnulusSpec:
    inner_diameter: float = 2.1
    outer_diameter: float = 4.2

    def __post_init__(self):
        if not 0 < self.inner_diameter < self.outer_diameter:
            raise ConfigError("annulus needs 0 < inner_diameter < outer_diameter")

    @property
    def inner_radius(self):
        return self.inner_diameter / 2.0

    @property
    def outer_radius(self):
        return self.outer_diameter / 2.0


@dataclass(frozen=True)
class TrajectoryModel:
    """Arcuate track model.

    A track seeded at angle ``theta0`` on the inner annulus radius sits at
    ``theta0 + beta * sin(theta0) * t``, ``t`` being the fractional radial
    position across the annulus. The drift is largest at the superior
    (theta = pi/2) and inferior (3*pi/2) poles, opposite in sign between
    them, and vanishes on the horizontal meridian. For ``beta * |t| < 1``
    the map theta0 -> theta is a bijection, so tracks never cross or leave
    gaps.
    """

    kind: str = "arcuate"
    curvature: float = 0.35

    def __post_init__(self):
        if self.kind not in ("radial", "arcuate"):
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if not 0 <= self.curvature < 1:
            raise ConfigError("curvature must lie in [0, 1)")

    @property
    def beta(self):
        return 0.0 if self.kind == "radial" else float(self.curvature)

    def track_angle(self, theta0, t):
        """Angle of the track seeded at ``theta0`` at fractional radius ``t``."""
        return np.asarray(theta0) + self.beta * np.sin(theta0) * np.asarray(t)

    def seed_angle(self, r, theta, annulus: AnnulusSpec):
        """Seed angle in [0, 2*pi) of the track through (r, theta)."""
        theta = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        t = (np.asarray(r, dtype=float) - annulus.inner_radius) / (
            annulus.outer_radius - annulus.inner_radius
        )
        c = self.beta * t
        if self.beta == 0.0:
            return theta + 0.0 * c
        if np.any(np.abs(c) >= 1):
            raise OutOfRangeError("radius too far outside the annulus for the track model")
        # Newton on theta0 + c*sin(theta0) = theta (Kepler-type, monotone for |c| < 1)
        seed = theta - c * np.sin(theta)
        for _ in range(50):
            step = (seed + c * np.sin(seed) - theta) / (1.0 + c * np.cos(seed))
            seed = seed - step
            if np.all(np.abs(step) < 1e-14):
                break
        return np.mod(seed, TWO_PI)


_INDEX_GUARD = 1e-9


def track_index(r, theta, trajectory: TrajectoryModel, annulus: AnnulusSpec, n_tracks: int):
    seed = trajectory.seed_angle(r, theta, annulus)
    idx = np.floor(seed / TWO_PI * n_tracks + _INDEX_GUARD).astype(int)
    return np.mod(idx, n_tracks)


def segment_index(r, annulus: AnnulusSpec, n_segments: int):
    t = (np.asarray(r, dtype=float) - annulus.inner_radius) / (
        annulus.outer_radius - annulus.inner_radius
    )
    return np.clip(np.floor(t * n_segments + _INDEX_GUARD).astype(int), 0, n_segments - 1)


@dataclass
class SuperpixelGrid:
    """Trajectory-aligned reduction of a polar map, ``[n_tracks x n_segments]``.

    Empty cells (``counts == 0``) hold ``fill_value``.
    """

    values: np.ndarray
    counts: np.ndarray
    kind: str = THICKNESS_UM
    fill_value: float = np.nan

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.values.shape != self.counts.shape or self.values.ndim != 2:
            raise ConfigError("values and counts must be matching 2-D arrays")
        if np.any(self.counts < 0):
            raise ConfigError("counts must be non-negative")

    @property
    def empty(self):
        return self.counts == 0

    @property
    def n_tracks(self):
        return self.values.shape[0]

    @property
    def n_segments(self):
        return self.values.shape[1]


@dataclass
class NormativeGrid:
    mean: np.ndarray
    sd: np.ndarray
    cutoff: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.sd = np.asarray(self.sd, dtype=float)
        self.cutoff = np.asarray(self.cutoff, dtype=float)
        if not (self.mean.shape == self.sd.shape == self.cutoff.shape):
            raise ConfigError("normative arrays must share one shape")

    @classmethod
    def fit(cls, grids, percentile=5.0):
        """Cellwise mean, SD and lower percentile over normal-eye grids."""
        stack = np.stack([np.where(g.empty, np.nan, g.values) for g in grids])
        if stack.shape[0] < 2:
            raise InsufficientDataError("need at least two normal grids")
        mean = np.nanmean(stack, axis=0)
        sd = np.nanstd(stack, axis=0, ddof=1)
        cutoff = np.minimum(np.nanpercentile(stack, percentile, axis=0), mean)
        return cls(mean, sd, cutoff)


# ---------------------------------------------------------------------- ops


def interpolate_rings(ring_radii, ring_values, target_radii):
    """Column-wise linear interpolation in radius between ring profiles."""
    ring_radii = np.asarray(ring_radii, dtype=float)
    ring_values = np.asarray(ring_values, dtype=float)
    target = np.asarray(target_radii, dtype=float)
    lo, hi = ring_radii[0], ring_radii[-1]
    if np.any(target < lo - _RADIUS_TOL) or np.any(target > hi + _RADIUS_TOL):
        raise OutOfRangeError(f"target radii must lie within [{lo}, {hi}] mm")
    target = np.clip(target, lo, hi)
    k = np.clip(np.searchsorted(ring_radii, target, side="right") - 1, 0, len(ring_radii) - 2)
    w = (target - ring_radii[k]) / (ring_radii[k + 1] - ring_radii[k])
    return (1.0 - w)[:, None] * ring_values[k] + w[:, None] * ring_values[k + 1]


def interpolate_polar_map(profiles: RingProfileSet, target_radii, field="nfl_thickness") -> PolarMap:
    """Dense polar map of one ring-profile field.

    ``field`` is ``"nfl_thickness"`` (map kind ``thickness_um``) or one of
    the raw band fields ``"nfl_band_sum"`` / ``"ppec_band_mean"`` (kind ``raw``).
    """
    if field not in ("nfl_thickness", "nfl_band_sum", "ppec_band_mean"):
        raise ConfigError(f"unknown profile field {field!r}")
    values = interpolate_rings(profiles.ring_radii, getattr(profiles, field), target_radii)
    kind = THICKNESS_UM if field == "nfl_thickness" else RAW
    return PolarMap(values, np.asarray(target_radii, dtype=float), kind)


def _values(x):
    return x.values if isinstance(x, PolarMap) else np.asarray(x, dtype=float)


def normalize_reflectance(nfl_sum, ppec_mean, radii=None, valid=None) -> PolarMap:
    """NFL band sum over PPEC band mean, in dB (10*log10 of the ratio)."""
    num = _values(nfl_sum)
    den = _values(ppec_mean)
    if num.shape != den.shape:
        raise ConfigError(f"band shapes differ: {num.shape} vs {den.shape}")
    if radii is None:
        if not isinstance(nfl_sum, PolarMap):
            raise ConfigError("radii are required for raw array input")
        radii = nfl_sum.radii
    if valid is None:
        valid = nfl_sum.valid if isinstance(nfl_sum, PolarMap) else np.ones(num.shape, bool)
    bad = valid & ((den <= 0) | (num <= 0))
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise DomainError(
            f"non-positive band value at pixel (radius {i}, angle {j}): "
            f"nfl_sum={num[i, j]!r}, ppec_mean={den[i, j]!r}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10.0 * np.log10(num / den)
    db = np.where(valid, db, np.nan)
    return PolarMap(db, radii, REFLECTANCE_DB, valid.copy())


def expand_ring_mask(ring_radii, ring_mask, target_radii):
    """Dense shadow mask from per-ring shadow flags.

    A dense pixel is shadowed when either bracketing ring sample that
    contributes to its interpolated value is shadowed.
    """
    ring_radii = np.asarray(ring_radii, dtype=float)
    ring_mask = np.asarray(ring_mask, dtype=bool)
    target = np.clip(np.asarray(target_radii, dtype=float), ring_radii[0], ring_radii[-1])
    k = np.clip(np.searchsorted(ring_radii, target, side="right") - 1, 0, len(ring_radii) - 2)
    w = (target - ring_radii[k]) / (ring_radii[k + 1] - ring_radii[k])
    lower = ring_mask[k] & (w < 1.0)[:, None]
    upper = ring_mask[k + 1] & (w > 0.0)[:, None]
    return lower | upper


def _fill_angular(values, holes):
    """Periodic linear interpolation of ``holes`` along each row.

    Rows with no usable sample are left untouched and reported.
    """
    out = values.copy()
    n = values.shape[1]
    j = np.arange(n, dtype=float)
    empty_rows = []
    for i in np.flatnonzero(holes.any(axis=1)):
        keep = ~holes[i]
        if not keep.any():
            empty_rows.append(i)
            continue
        xp = j[keep]
        out[i, holes[i]] = np.interp(j[holes[i]], xp, values[i, keep], period=n)
    return out, empty_rows


def inpaint_vessels(pmap: PolarMap, mask) -> PolarMap:
    """Replace vessel-shadowed pixels by angular linear interpolation.

    Rows that are shadowed at every angle are filled radially from the
    nearest rows that have data. The valid mask is left unchanged.
    """
    shadow = np.asarray(getattr(mask, "shadowed", mask), dtype=bool)
    if shadow.shape != pmap.values.shape:
        raise ConfigError(f"mask shape {shadow.shape} != map shape {pmap.values.shape}")
    if not shadow.any():
        return pmap.replace()
    if shadow.all():
        raise UnrecoverableMaskError("every pixel is shadowed")
    out, empty_rows = _fill_angular(pmap.values, shadow)
    if empty_rows:
        good = np.setdiff1d(np.arange(len(pmap.radii)), empty_rows)
        r = pmap.radii
        for jcol in range(out.shape[1]):
            out[empty_rows, jcol] = np.interp(r[empty_rows], r[good], out[good, jcol])
    return pmap.replace(values=out)


@lru_cache(maxsize=16)
def _recenter_geometry(radii_bytes, n, dx, dy):
    r = np.frombuffer(radii_bytes, dtype=float)
    th = angles(n)
    x = r[:, None] * np.cos(th)[None, :] - dx
    y = r[:, None] * np.sin(th)[None, :] - dy
    rs = np.hypot(x, y)
    ts = np.mod(np.arctan2(y, x), TWO_PI)
    inside = (rs >= r[0]) & (rs <= r[-1])
    rc = np.clip(rs, r[0], r[-1])
    i0 = np.clip(np.searchsorted(r, rc, side="right") - 1, 0, len(r) - 2)
    a = (rc - r[i0]) / (r[i0 + 1] - r[i0])
    fj = ts * n / TWO_PI
    j0 = np.floor(fj).astype(int) % n
    b = fj - np.floor(fj)
    j1 = (j0 + 1) % n
    return inside, i0, j0, j1, a, b


def recenter_map(pmap: PolarMap, disc_offset, max_offset=AnnulusSpec().inner_radius) -> PolarMap:
    """Resample the map about the disc center.

    ``disc_offset`` (dx, dy) in mm is the scan-center position relative to
    the disc center, so output pixel (r, theta) reads the source at the
    Cartesian point ``r*u(theta) - disc_offset``. Values come from bilinear
    interpolation on the source (radius, angle) grid, wrapping in angle.
    Output pixels that need source data outside the radial span or from
    invalid source pixels are marked invalid.
    """
    dx, dy = (float(v) for v in disc_offset)
    if np.hypot(dx, dy) >= max_offset:
        raise OutOfRangeError(f"disc offset {np.hypot(dx, dy):.3f} mm >= limit {max_offset} mm")
    if dx == 0.0 and dy == 0.0:
        return pmap.replace()
    inside, i0, j0, j1, a, b = _recenter_geometry(pmap.radii.tobytes(), pmap.n_angles, dx, dy)
    v = pmap.values
    ok = pmap.valid
    vals = (
        (1 - a) * (1 - b) * v[i0, j0]
        + (1 - a) * b * v[i0, j1]
        + a * (1 - b) * v[i0 + 1, j0]
        + a * b * v[i0 + 1, j1]
    )
    valid = inside & ok[i0, j0] & ok[i0, j1] & ok[i0 + 1, j0] & ok[i0 + 1, j1]
    vals = np.where(valid, vals, np.nan)
    return pmap.replace(values=vals, valid=valid)


def apply_annulus(pmap: PolarMap, annulus: AnnulusSpec = AnnulusSpec()) -> PolarMap:
    r = pmap.radii
    lo, hi = annulus.inner_radius, annulus.outer_radius
    if lo < r[0] - _RADIUS_TOL or hi > r[-1] + _RADIUS_TOL:
        raise OutOfRangeError(
            f"annulus [{lo}, {hi}] mm radius exceeds map span [{r[0]}, {r[-1]}] mm"
        )
    rows = (r >= lo - _RADIUS_TOL) & (r <= hi + _RADIUS_TOL)
    return pmap.replace(valid=pmap.valid & rows[:, None])


def azimuthal_filter(pmap: PolarMap) -> PolarMap:
    """Remove the first angular harmonic (k = +-1) from every radius row.

    Invalid pixels are filled by periodic angular interpolation before the
    transform and re-masked afterwards; only valid pixels receive filtered
    values. Rows with no valid pixel are skipped.
    """
    n = pmap.n_angles
    if n < 4:
        raise InsufficientDataError("azimuthal filter needs at least 4 angle samples")
    nvalid = pmap.valid.sum(axis=1)
    short = (nvalid > 0) & (nvalid < 4)
    if np.any(short):
        raise InsufficientDataError(
            f"radius row {int(np.flatnonzero(short)[0])} has fewer than 4 valid samples"
        )
    rows = np.flatnonzero(nvalid > 0)
    out = pmap.values.copy()
    if len(rows) == 0:
        return pmap.replace()
    filled, _ = _fill_angular(pmap.values[rows], ~pmap.valid[rows])
    spec = np.fft.rfft(filled, axis=1)
    spec[:, 1] = 0.0
    filtered = np.fft.irfft(spec, n=n, axis=1)
    sub = out[rows]
    sub[pmap.valid[rows]] = filtered[pmap.valid[rows]]
    out[rows] = sub
    return pmap.replace(values=out)


@lru_cache(maxsize=16)
def _cell_map(radii_bytes, n_angles, trajectory, annulus, n_tracks, n_segments):
    """Flat cell index per pixel (-1 outside the annulus)."""
    r = np.frombuffer(radii_bytes, dtype=float)
    in_ring = (r >= annulus.inner_radius - _RADIUS_TOL) & (r <= annulus.outer_radius + _RADIUS_TOL)
    cells = np.full((len(r), n_angles), -1, dtype=np.int64)
    rr = np.repeat(r[in_ring], n_angles)
    tt = np.tile(angles(n_angles), int(in_ring.sum()))
    track = track_index(rr, tt, trajectory, annulus, n_tracks)
    seg = segment_index(rr, annulus, n_segments)
    cells[in_ring] = (track * n_segments + seg).reshape(-1, n_angles)
    cells.setflags(write=False)
    return cells


def to_superpixels(
    pmap: PolarMap,
    trajectory: TrajectoryModel = TrajectoryModel(),
    n_tracks: int = 32,
    n_segments: int = 32,
    annulus: AnnulusSpec = AnnulusSpec(),
) -> SuperpixelGrid:
    """Average valid annulus pixels into trajectory-aligned cells."""
    if n_tracks < 1 or n_segments < 1:
        raise ConfigError("n_tracks and n_segments must be >= 1")
    cells = _cell_map(pmap.radii.tobytes(), pmap.n_angles, trajectory, annulus, n_tracks, n_segments)
    use = pmap.valid & (cells >= 0)
    cell = cells[use]
    size = n_tracks * n_segments
    counts = np.bincount(cell, minlength=size)
    sums = np.bincount(cell, weights=pmap.values[use], minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return SuperpixelGrid(
        vals.reshape(n_tracks, n_segments), counts.reshape(n_tracks, n_segments), pmap.kind
    )


def grid_average(grid: SuperpixelGrid) -> float:
    """Count-weighted mean over non-empty cells."""
    nz = grid.counts > 0
    if not nz.any():
        raise EmptyGridError("all superpixel cells are empty")
    w = grid.counts[nz].astype(float)
    return float(np.sum(w * grid.values[nz]) / np.sum(w))


def focal_loss_volume(grid: SuperpixelGrid, norm: NormativeGrid, kind=None) -> float:
    """Focal loss volume against a normative grid.

    Thickness: percent, ``100 * sum(-fractional deviation) / n_cells`` over
    cells below the normative cutoff (>= 0). Reflectance: mean dB deficit
    over all cells, summed only where below cutoff (<= 0). Cells without
    data are excluded from both sum and cell count.
    """
    kind = kind or grid.kind
    if grid.values.shape != norm.mean.shape:
        raise ConfigError(f"grid {grid.values.shape} and norm {norm.mean.shape} differ")
    have = ~grid.empty & np.isfinite(norm.mean) & np.isfinite(norm.cutoff)
    if not have.any():
        raise EmptyGridError("no cell with both data and normative values")
    v = grid.values[have]
    mu = norm.mean[have]
    below = v < norm.cutoff[have]
    if kind in ("thickness", THICKNESS_UM):
        if np.any(mu <= 0):
            raise DomainError("normative thickness mean must be positive")
        fd = (v - mu) / mu
        return float(100.0 * np.sum(-fd[below]) / have.sum())
    if kind in ("reflectance_db", REFLECTANCE_DB, "reflectance"):
        return float(np.sum((v - mu)[below]) / have.sum())
    raise ConfigError(f"unknown FLV kind {kind!r}")


# ---------------------------------------------------------------- pipeline


@dataclass
class MapPipelineConfig:
    dense_radii: np.ndarray = field(default_factory=default_dense_radii)
    annulus: AnnulusSpec = field(default_factory=AnnulusSpec)
    trajectory: TrajectoryModel = field(default_factory=TrajectoryModel)
    n_tracks: int = 32
    n_segments: int = 32
    filter_thickness: bool = False


@dataclass
class ProcessedScan:
    thickness: SuperpixelGrid
    reflectance: SuperpixelGrid
    thickness_map: PolarMap
    reflectance_map: PolarMap


def process_scan(profiles: RingProfileSet, ring_shadow, disc_offset, cfg=None) -> ProcessedScan:
    """Run the full map chain for one scan and reduce both maps to grids.

    ``ring_shadow`` is the per-ring vessel-shadow flag array
    ``[n_rings x n_angles]`` (or ``None``).
    """
    cfg = cfg or MapPipelineConfig()
    radii = np.asarray(cfg.dense_radii, dtype=float)
    nfl = interpolate_polar_map(profiles, radii, "nfl_band_sum")
    ppec = interpolate_polar_map(profiles, radii, "ppec_band_mean")
    refl = normalize_reflectance(nfl, ppec)
    if ring_shadow is not None:
        shadow = VesselMask(expand_ring_mask(profiles.ring_radii, ring_shadow, radii))
        refl = inpaint_vessels(refl, shadow)
    thick = interpolate_polar_map(profiles, radii, "nfl_thickness")

    limit = cfg.annulus.inner_radius
    refl = apply_annulus(recenter_map(refl, disc_offset, limit), cfg.annulus)
    thick = apply_annulus(recenter_map(thick, disc_offset, limit), cfg.annulus)
    refl = azimuthal_filter(refl)
    if cfg.filter_thickness:
        thick = azimuthal_filter(thick)
    grids = [
        to_superpixels(m, cfg.trajectory, cfg.n_tracks, cfg.n_segments, cfg.annulus)
        for m in (thick, refl)
    ]
    return ProcessedScan(grids[0], grids[1], thick, refl)
