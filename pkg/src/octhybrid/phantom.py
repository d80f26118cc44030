"""Synthetic cohort generator.

Eyes get clinical records drawn from per-group truncated Gaussians and
peripapillary ring profiles rendered from a smooth anatomical forward
model. Glaucomatous eyes carry focal, trajectory-aligned wedge defects.

Clinical fields share one latent severity factor per eye. Each field is
``mean + sd * (loading * z + sqrt(1 - loading**2) * e)`` with ``z`` and
``e`` standard normal, so every marginal is still the group Gaussian; the
loading only controls how redundant the fields are with one another.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .maps import (
    REFLECTANCE_DB,
    THICKNESS_UM,
    TWO_PI,
    AnnulusSpec,
    RingProfileSet,
    TrajectoryModel,
    angles,
    apply_annulus,
    default_ring_diameters,
    expand_ring_mask,
    inpaint_vessels,
    interpolate_polar_map,
    normalize_reflectance,
    recenter_map,
    default_dense_radii,
)

GENERATOR_VERSION = "1.0"
GROUPS = ("normal", "pg")

CLINICAL_FIELDS = (
    "age", "gender", "axial_length", "vf_md", "disc_area", "rim_area", "cd_area_ratio",
    "vcdr", "gcc_sup", "gcc_inf", "gcc_flv", "rnfl_avg", "rnfl_flv",
)


# ---------------------------------------------------------------- records


@dataclass
class EyeRecord:
    subject_id: str
    eye: str
    scan_index: int
    group: str
    age: float
    gender: int
    axial_length: float
    vf_md: float
    disc_area: float
    rim_area: float
    cd_area_ratio: float
    vcdr: float
    gcc_sup: float
    gcc_inf: float
    gcc_flv: float
    rnfl_avg: float
    rnfl_flv: float

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError(f"unknown group {self.group!r}")
        if self.eye not in ("OD", "OS"):
            raise ConfigError(f"eye must be OD or OS, got {self.eye!r}")

    @property
    def label(self):
        return int(self.group == "pg")

    def to_dict(self):
        return asdict(self)


# Group mean and SD per field. gender is the female fraction.
TABLE1 = {
    "normal": {
        "age": (59.8, 9.72), "gender": (0.660, 0.0), "axial_length": (23.7, 1.03),
        "vf_md": (-0.10, 1.02), "disc_area": (2.11, 0.348), "rim_area": (1.42, 0.269),
        "cd_area_ratio": (0.315, 0.143), "vcdr": (0.510, 0.156), "gcc_sup": (94.9, 6.78),
        "gcc_inf": (96.1, 7.09), "gcc_flv": (0.735, 0.955), "rnfl_avg": (99.2, 8.53),
        "rnfl_flv": (1.72, 1.90), "nflr_avg": (-8.11, 1.29), "nflr_flv": (-0.219, 0.375),
    },
    "pg": {
        "age": (63.8, 9.49), "gender": (0.591, 0.0), "axial_length": (24.4, 1.32),
        "vf_md": (-4.57, 3.96), "disc_area": (2.17, 0.450), "rim_area": (0.904, 0.357),
        "cd_area_ratio": (0.569, 0.184), "vcdr": (0.751, 0.162), "gcc_sup": (84.2, 10.6),
        "gcc_inf": (80.4, 11.6), "gcc_flv": (5.34, 3.91), "rnfl_avg": (80.1, 11.8),
        "rnfl_flv": (7.71, 4.54), "nflr_avg": (-11.6, 2.26), "nflr_flv": (-2.86, 2.11),
    },
}

BOUNDS = {
    "age": (18.0, 95.0), "axial_length": (20.0, 30.0), "vf_md": (-30.0, 3.0),
    "disc_area": (0.8, 5.0), "rim_area": (0.05, 3.5), "cd_area_ratio": (0.0, 1.0),
    "vcdr": (0.0, 1.0), "gcc_sup": (40.0, 130.0), "gcc_inf": (40.0, 130.0),
    "gcc_flv": (0.0, 40.0), "rnfl_avg": (35.0, 150.0), "rnfl_flv": (0.0, 40.0),
    "nflr_avg": (-22.0, -2.0), "nflr_flv": (-15.0, 0.0),
}

# Sign and strength of each field's dependence on the latent health factor
# (positive: larger value = healthier). Fields with a larger standardized
# group difference load more strongly, which keeps the summary parameters
# largely redundant with each other, as clinical parameters are.
LOADINGS = {
    "vf_md": 0.6, "rim_area": 0.6, "cd_area_ratio": -0.6, "vcdr": -0.85, "gcc_sup": 0.65,
    "gcc_inf": 0.9, "gcc_flv": -0.9, "rnfl_avg": 0.95, "rnfl_flv": -0.95, "nflr_avg": 0.95,
    "nflr_flv": 0.9,
}


@dataclass
class PhenotypeSpec:
    """Per-group marginal Gaussians, truncation bounds and latent loadings."""

    moments: dict = field(default_factory=lambda: {g: dict(v) for g, v in TABLE1.items()})
    bounds: dict = field(default_factory=lambda: dict(BOUNDS))
    loadings: dict = field(default_factory=lambda: dict(LOADINGS))

    def __post_init__(self):
        for g in GROUPS:
            if g not in self.moments:
                raise ConfigError(f"phenotype lacks group {g!r}")
            for name, (_, sd) in self.moments[g].items():
                if sd < 0:
                    raise ConfigError(f"negative SD for {g}.{name}")
        for name, (lo, hi) in self.bounds.items():
            if lo > hi:
                raise ConfigError(f"empty truncation interval for {name}")
        for name in ("cd_area_ratio", "vcdr"):
            lo, hi = self.bounds[name]
            if lo < 0 or hi > 1:
                raise ConfigError(f"{name} bounds must lie within [0, 1]")
        for name, lam in self.loadings.items():
            if not -1.0 <= lam <= 1.0:
                raise ConfigError(f"loading for {name} must lie in [-1, 1]")

    def with_overrides(self, overrides: dict):
        """Copy with ``{"normal": {"age": [mean, sd]}, ...}`` style overrides."""
        moments = {g: dict(v) for g, v in self.moments.items()}
        for g, fields in (overrides or {}).items():
            if g not in moments:
                raise ConfigError(f"unknown group {g!r} in phenotype overrides")
            for name, pair in fields.items():
                if name not in moments[g]:
                    raise ConfigError(f"unknown phenotype field {name!r}")
                moments[g][name] = (float(pair[0]), float(pair[1]))
        return replace(self, moments=moments)


_CONTINUOUS = tuple(f for f in CLINICAL_FIELDS if f != "gender") + ("nflr_avg", "nflr_flv")


def _compose(group, phenotype: PhenotypeSpec, z, e, rng, max_redraw=100):
    """Field values from latent ``z`` and per-field residuals ``e``.

    Out-of-bounds draws redraw the residual; whatever is still outside after
    ``max_redraw`` attempts is clipped.
    """
    out = {}
    for name in _CONTINUOUS:
        mu, sd = phenotype.moments[group][name]
        lam = phenotype.loadings.get(name, 0.0)
        lo, hi = phenotype.bounds.get(name, (-np.inf, np.inf))
        resid = e[name]
        value = mu + sd * (lam * z + math.sqrt(1.0 - lam * lam) * resid)
        tries = 0
        while not lo <= value <= hi and tries < max_redraw and sd > 0:
            resid = rng.standard_normal()
            value = mu + sd * (lam * z + math.sqrt(1.0 - lam * lam) * resid)
            tries += 1
        out[name] = float(min(max(value, lo), hi))
    out["rim_area"] = min(out["rim_area"], out["disc_area"])
    return out


def sample_clinical(group, phenotype: PhenotypeSpec, rng, subject_id="S0", eye="OD", scan_index=0):
    """One eye's record plus its map-level targets (``nflr_avg``, ``nflr_flv``).

    Returns ``(record, targets)``.
    """
    if group not in GROUPS:
        raise ConfigError(f"unknown group {group!r}")
    z = rng.standard_normal()
    e = {name: rng.standard_normal() for name in _CONTINUOUS}
    vals = _compose(group, phenotype, z, e, rng)
    female = phenotype.moments[group]["gender"][0]
    gender = int(rng.random() < female)
    targets = {"nflr_avg": vals.pop("nflr_avg"), "nflr_flv": vals.pop("nflr_flv"), "latent": z}
    rec = EyeRecord(subject_id=subject_id, eye=eye, scan_index=scan_index, group=group,
                    gender=gender, **vals)
    return rec, targets


# ---------------------------------------------------------------- lesions


@dataclass(frozen=True)
class DefectSpec:
    center_track: int
    width_tracks: int
    depth_thickness: float
    depth_reflectance: float
    radial_extent: tuple = (0, 31)

    def validate(self, n_tracks=32, n_segments=32):
        if not 0 <= self.center_track < n_tracks:
            raise ConfigError(f"defect center track {self.center_track} outside 0..{n_tracks - 1}")
        if not 1 <= self.width_tracks <= n_tracks:
            raise ConfigError(f"defect width {self.width_tracks} outside 1..{n_tracks}")
        lo, hi = self.radial_extent
        if not 0 <= lo <= hi < n_segments:
            raise ConfigError(f"defect radial extent {self.radial_extent} outside 0..{n_segments - 1}")
        if not 0.0 <= self.depth_thickness <= 1.0:
            raise ConfigError("depth_thickness must lie in [0, 1]")
        if self.depth_reflectance < 0:
            raise ConfigError("depth_reflectance must be >= 0")

    def tracks(self, n_tracks=32):
        start = self.center_track - self.width_tracks // 2
        return [(start + k) % n_tracks for k in range(self.width_tracks)]

    def to_dict(self):
        d = asdict(self)
        d["radial_extent"] = list(self.radial_extent)
        return d


@dataclass(frozen=True)
class LesionSpec:
    """How glaucomatous defects scale with severity ``s = |vf_md| / 4.57``."""

    width_base: float = 2.0
    width_slope: float = 0.5
    width_max: int = 4
    thickness_base: float = 0.25
    thickness_slope: float = 0.25
    thickness_max: float = 0.7
    reflectance_base: float = 2.5
    reflectance_slope: float = 0.8
    reflectance_max: float = 5.0
    reflectance_extra_width: int = 0
    second_defect_prob: float = 0.35
    reflectance_only_prob: float = 0.7
    partial_extent_prob: float = 0.3
    # early damage: reflectance drops before the layer thins
    thickness_sparing_prob: float = 0.0


def sample_defects(record: EyeRecord, lesion: LesionSpec, rng, n_tracks=32, n_segments=32):
    """Defect list for one eye; empty for normal eyes."""
    if record.group != "pg":
        return []
    sev = abs(min(record.vf_md, 0.0)) / 4.57
    # arcuate defects cluster near the superior and inferior poles
    poles = [n_tracks // 4, 3 * n_tracks // 4]
    first = int(rng.integers(2))
    order = [first, 1 - first]
    n = 1 + int(rng.random() < lesion.second_defect_prob)
    spared = rng.random() < lesion.thickness_sparing_prob

    def center(pole):
        return int(round(pole + rng.normal(0, n_tracks / 16))) % n_tracks

    out = []
    for k in range(n):
        c = center(poles[order[k]])
        width = int(np.clip(round(lesion.width_base + lesion.width_slope * sev + rng.normal(0, 1)),
                            2, lesion.width_max))
        depth_t = float(np.clip(lesion.thickness_base + lesion.thickness_slope * sev
                                + rng.normal(0, 0.03), 0.02, lesion.thickness_max))
        depth_r = float(np.clip(lesion.reflectance_base + lesion.reflectance_slope * sev
                                + rng.normal(0, 0.3), 0.3, lesion.reflectance_max))
        if rng.random() < lesion.partial_extent_prob:
            cut = int(rng.integers(n_segments // 4, 3 * n_segments // 4))
            extent = (0, cut) if rng.random() < 0.5 else (cut, n_segments - 1)
        else:
            extent = (0, n_segments - 1)
        out.append(DefectSpec(c, width, 0.0 if spared else depth_t, depth_r, extent))
    if rng.random() < lesion.reflectance_only_prob:
        c = center(poles[int(rng.integers(2))])
        width = int(np.clip(round(lesion.width_base + lesion.reflectance_extra_width
                                  + lesion.width_slope * sev), 2, lesion.width_max))
        depth_r = float(np.clip(lesion.reflectance_base + lesion.reflectance_slope * sev,
                                0.3, lesion.reflectance_max))
        out.append(DefectSpec(c, width, 0.0, depth_r, (0, n_segments - 1)))
    return out


# ---------------------------------------------------------------- anatomy


@dataclass(frozen=True)
class RenderSpec:
    """Forward-model settings shared by all eyes."""

    ring_diameters: tuple = tuple(default_ring_diameters())
    n_angles: int = 256
    annulus: AnnulusSpec = AnnulusSpec()
    trajectory: TrajectoryModel = TrajectoryModel()
    n_tracks: int = 32
    n_segments: int = 32
    thickness_noise: float = 2.0
    reflectance_noise: float = 0.5
    max_disc_offset: float = 0.3
    bias_amplitude: tuple = (0.5, 2.5)
    vessel_count: tuple = (4, 8)
    vessel_width_samples: float = 3.0
    vessel_nfl_factor: tuple = (0.8, 0.9)
    vessel_ppec_factor: tuple = (0.25, 0.3)
    harmonic_sd_thickness: float = 0.02
    bundle_jitter: float = 0.12
    bundle_width_sd: float = 0.05
    harmonic_sd_reflectance: float = 0.3
    ppec_level: float = 40.0

    def __post_init__(self):
        if self.n_angles < 8:
            raise ConfigError("need at least 8 angle samples per ring")
        if self.thickness_noise < 0 or self.reflectance_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0 <= self.max_disc_offset < self.annulus.inner_radius:
            raise ConfigError("max disc offset must be below the inner annulus radius")


@dataclass
class EyeAnatomy:
    """Per-eye random shape parameters, shared by repeat scans."""

    eye: str
    bundle_sup: float
    bundle_inf: float
    bundle_width: float
    harm_t: np.ndarray  # (6, 2): amplitude, phase for k = 3..8
    harm_r: np.ndarray
    vessels: np.ndarray  # seed angles
    vessel_nfl: np.ndarray
    vessel_ppec: np.ndarray
    ppec_phase: float
    bias_amplitude: float


def sample_anatomy(eye, render: RenderSpec, rng) -> EyeAnatomy:
    n_v = int(rng.integers(render.vessel_count[0], render.vessel_count[1] + 1))
    harm = lambda sd: np.column_stack([np.abs(rng.normal(0, sd, 6)), rng.uniform(0, TWO_PI, 6)])
    return EyeAnatomy(
        eye=eye,
        bundle_sup=math.pi / 2 + 0.45 + rng.normal(0, render.bundle_jitter),
        bundle_inf=3 * math.pi / 2 - 0.45 + rng.normal(0, render.bundle_jitter),
        bundle_width=max(0.2, 0.55 + rng.normal(0, render.bundle_width_sd)),
        harm_t=harm(render.harmonic_sd_thickness),
        harm_r=harm(render.harmonic_sd_reflectance),
        vessels=np.sort(rng.uniform(0, TWO_PI, n_v)),
        vessel_nfl=rng.uniform(*render.vessel_nfl_factor, n_v),
        vessel_ppec=rng.uniform(*render.vessel_ppec_factor, n_v),
        ppec_phase=rng.uniform(0, TWO_PI),
        bias_amplitude=rng.uniform(*render.bias_amplitude),
    )


def _circ(a):
    return np.mod(a + math.pi, TWO_PI) - math.pi


def _disc_polar(render: RenderSpec, offset):
    """Disc-frame polar coordinates of every ring sample."""
    r = np.asarray(render.ring_diameters) / 2.0
    th = angles(render.n_angles)
    x = r[:, None] * np.cos(th)[None, :] + offset[0]
    y = r[:, None] * np.sin(th)[None, :] + offset[1]
    return np.hypot(x, y), np.mod(np.arctan2(y, x), TWO_PI)


def _seed(render: RenderSpec, rho, phi):
    ann = render.annulus
    return render.trajectory.seed_angle(np.clip(rho, ann.inner_radius, ann.outer_radius), phi, ann)


def defect_footprint(render: RenderSpec, defect: DefectSpec, rho, seed):
    """Boolean footprint of one defect at disc-frame points."""
    n_t, n_s = render.n_tracks, render.n_segments
    u = seed / TWO_PI * n_t
    start = defect.center_track - defect.width_tracks // 2
    in_track = np.mod(u - start, n_t) < defect.width_tracks
    ann = render.annulus
    seg = (rho - ann.inner_radius) / (ann.outer_radius - ann.inner_radius) * n_s
    lo, hi = defect.radial_extent
    in_seg = np.ones_like(in_track)
    if lo > 0:
        in_seg &= seg >= lo
    if hi < n_s - 1:
        in_seg &= seg < hi + 1
    return in_track & in_seg


def _bump(phi, center, width):
    return np.exp(-0.5 * (_circ(phi - center) / width) ** 2)


def _harmonics(phi, coef):
    k = np.arange(3, 9)[:, None, None]
    return np.sum(coef[:, 0][:, None, None] * np.cos(k * phi[None] + coef[:, 1][:, None, None]), axis=0)


def _fields(render, anatomy, defects, offset):
    """Unit-level thickness, zero-level reflectance pattern (dB), PPEC, shadows."""
    rho, phi = _disc_polar(render, offset)
    seed = _seed(render, rho, phi)
    # mirror the anatomy for left eyes; the map grid itself is not mirrored
    s_anat = seed if anatomy.eye == "OD" else np.mod(math.pi - seed, TWO_PI)
    bundles = _bump(s_anat, anatomy.bundle_sup, anatomy.bundle_width) + 0.9 * _bump(
        s_anat, anatomy.bundle_inf, anatomy.bundle_width
    )
    radial = np.exp(-(rho - 1.55) / 2.0)
    thick = (0.6 + 0.5 * bundles) * radial * (1.0 + _harmonics(s_anat, anatomy.harm_t))
    refl = 1.2 * bundles - 0.8 * (rho - 1.55) + _harmonics(s_anat, anatomy.harm_r)
    for d in defects:
        fp = defect_footprint(render, d, rho, seed)
        thick = thick * np.where(fp, 1.0 - d.depth_thickness, 1.0)
        refl = refl - np.where(fp, d.depth_reflectance, 0.0)
    ppec = render.ppec_level * (1.0 + 0.1 * np.cos(phi + anatomy.ppec_phase)) * np.exp(-0.1 * rho)
    half = 0.5 * render.vessel_width_samples * TWO_PI / render.n_angles
    nfl_f = np.ones_like(rho)
    ppec_f = np.ones_like(rho)
    shadow = np.zeros(rho.shape, dtype=bool)
    for v, fn, fp in zip(anatomy.vessels, anatomy.vessel_nfl, anatomy.vessel_ppec):
        hit = np.abs(_circ(seed - v)) < half
        shadow |= hit
        nfl_f = np.where(hit, nfl_f * fn, nfl_f)
        ppec_f = np.where(hit, ppec_f * fp, ppec_f)
    return thick, refl, ppec, nfl_f, ppec_f, shadow, phi


@dataclass
class SyntheticEye:
    record: EyeRecord
    profiles: RingProfileSet
    vessel_mask: np.ndarray  # ring-level shadow flags, [n_rings x n_angles]
    disc_offset: tuple
    defects: list
    bias: tuple  # (amplitude dB, phase rad)
    targets: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)


def _calibration_means(render, profiles, shadow, offset):
    """Noise-free processed annulus means of (thickness, reflectance)."""
    radii = default_dense_radii()
    radii = radii[(radii >= profiles.ring_radii[0]) & (radii <= profiles.ring_radii[-1])]
    thick = interpolate_polar_map(profiles, radii, "nfl_thickness")
    nfl = interpolate_polar_map(profiles, radii, "nfl_band_sum")
    ppec = interpolate_polar_map(profiles, radii, "ppec_band_mean")
    refl = normalize_reflectance(nfl, ppec)
    if shadow.any():
        refl = inpaint_vessels(refl, expand_ring_mask(profiles.ring_radii, shadow, radii))
    limit = render.annulus.inner_radius
    t = apply_annulus(recenter_map(thick, offset, limit), render.annulus)
    r = apply_annulus(recenter_map(refl, offset, limit), render.annulus)
    return t.masked_mean(), r.masked_mean()


def synth_maps(record: EyeRecord, defects, bias, rng, *, render: RenderSpec = None, anatomy=None,
               offset=None, nflr_target=None, calibration="baseline", noise=True) -> SyntheticEye:
    """Render one scan's ring profiles.

    The noise-free thickness field is scaled so that the processed grid
    average equals ``record.rnfl_avg`` and the reflectance field is shifted
    so that its processed average equals ``nflr_target`` (default: the
    group's mean). With ``calibration="baseline"`` the defect-free field is
    calibrated and defects are carved afterwards; with ``"observed"`` the
    calibration includes the defects.
    """
    render = render or RenderSpec()
    if calibration not in ("baseline", "observed"):
        raise ConfigError(f"unknown calibration mode {calibration!r}")
    for d in defects:
        d.validate(render.n_tracks, render.n_segments)
    if anatomy is None:
        anatomy = sample_anatomy(record.eye, render, rng)
    if offset is None:
        rad = render.max_disc_offset * math.sqrt(rng.random())
        ang = rng.uniform(0, TWO_PI)
        offset = (rad * math.cos(ang), rad * math.sin(ang))
    offset = (float(offset[0]), float(offset[1]))
    if nflr_target is None:
        nflr_target = TABLE1[record.group]["nflr_avg"][0]
    amp, phase = (float(bias[0]), float(bias[1])) if bias is not None else (0.0, 0.0)
    diam = np.asarray(render.ring_diameters, dtype=float)

    thick, refl, ppec, nfl_f, ppec_f, shadow, phi = _fields(render, anatomy, defects, offset)
    if calibration == "baseline" and defects:
        c_thick, c_refl, *_ = _fields(render, anatomy, [], offset)
    else:
        c_thick, c_refl = thick, refl
    cal = RingProfileSet(diam, ppec * nfl_f * 10 ** (c_refl / 10), ppec * ppec_f, c_thick)
    m_t, m_r = _calibration_means(render, cal, shadow, offset)
    level_t = record.rnfl_avg / m_t
    level_r = nflr_target - m_r

    thick = level_t * thick
    refl = refl + level_r + amp * np.cos(phi - phase)
    if noise:
        thick = thick + rng.normal(0, render.thickness_noise, thick.shape)
        refl = refl + rng.normal(0, render.reflectance_noise, refl.shape)
    thick = np.maximum(thick, 0.0)
    profiles = RingProfileSet(diam, ppec * nfl_f * 10 ** (refl / 10), ppec * ppec_f, thick)
    return SyntheticEye(
        record=record, profiles=profiles, vessel_mask=shadow, disc_offset=offset,
        defects=list(defects), bias=(amp, phase), targets={"nflr_avg": float(nflr_target)},
        levels={"thickness_scale": float(level_t), "reflectance_level_db": float(level_r)},
    )


# ---------------------------------------------------------------- cohort


@dataclass(frozen=True)
class CohortSpec:
    n_normal_subjects: int = 106
    n_pg_subjects: int = 164
    single_eye_fraction_normal: float = 2 / 106
    single_eye_fraction_pg: float = 90 / 164
    scans_per_eye: tuple = (2, 3)
    seed: int = 0

    def __post_init__(self):
        if self.n_normal_subjects < 1 or self.n_pg_subjects < 1:
            raise ConfigError("each group needs at least one subject")
        lo, hi = self.scans_per_eye
        if not 1 <= lo <= hi:
            raise ConfigError("scans_per_eye must satisfy 1 <= min <= max")
        for f in (self.single_eye_fraction_normal, self.single_eye_fraction_pg):
            if not 0.0 <= f <= 1.0:
                raise ConfigError("single-eye fractions must lie in [0, 1]")


@dataclass
class EyePlan:
    subject_id: str
    subject_index: int
    group: str
    eye: str
    eye_index: int
    n_scans: int
    record: EyeRecord
    targets: dict
    defects: list


@dataclass
class Cohort:
    spec: CohortSpec
    phenotype: PhenotypeSpec
    lesion: LesionSpec
    render: RenderSpec
    eyes: list
    version: str = GENERATOR_VERSION

    @property
    def n_scans(self):
        return sum(e.n_scans for e in self.eyes)

    def scans(self):
        """Yield ``(scan_id, SyntheticEye)`` in manifest order."""
        for plan in self.eyes:
            for k in range(plan.n_scans):
                yield scan_id(plan, k), render_scan(self, plan, k)


def scan_id(plan: EyePlan, k: int) -> str:
    return f"{plan.subject_id}-{plan.eye}-{k}"


def _rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def _standardize(x):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return x
    sd = x.std(ddof=1)
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def plan_cohort(spec: CohortSpec, phenotype: PhenotypeSpec = None, lesion: LesionSpec = None,
                render: RenderSpec = None) -> Cohort:
    """Sample every subject's records and defects (no rendering yet).

    Latent factors and residuals are drawn per group and then centred and
    scaled to unit sample SD, so group means and SDs of untruncated fields
    match the phenotype exactly.
    """
    phenotype = phenotype or PhenotypeSpec()
    lesion = lesion or LesionSpec()
    render = render or RenderSpec()
    rng = _rng(spec.seed, 0)
    eyes = []
    subj_index = 0
    for group, n_subj, single in (
        ("normal", spec.n_normal_subjects, spec.single_eye_fraction_normal),
        ("pg", spec.n_pg_subjects, spec.single_eye_fraction_pg),
    ):
        n_single = int(round(single * n_subj))
        n_eyes_of = np.full(n_subj, 2)
        n_eyes_of[rng.permutation(n_subj)[:n_single]] = 1
        n_eyes = int(n_eyes_of.sum())
        z = _standardize(rng.standard_normal(n_eyes))
        resid = {name: _standardize(rng.standard_normal(n_eyes)) for name in _CONTINUOUS}
        age = _standardize(rng.standard_normal(n_subj))
        n_female = int(round(phenotype.moments[group]["gender"][0] * n_subj))
        female = np.zeros(n_subj, dtype=int)
        female[rng.permutation(n_subj)[:n_female]] = 1
        k = 0
        prefix = "N" if group == "normal" else "G"
        for s in range(n_subj):
            sid = f"{prefix}{s + 1:03d}"
            which = ["OD", "OS"] if n_eyes_of[s] == 2 else [("OD", "OS")[int(rng.integers(2))]]
            for eye in which:
                e = {name: resid[name][k] for name in _CONTINUOUS}
                e["age"] = age[s]
                vals = _compose(group, phenotype, z[k], e, rng)
                targets = {"nflr_avg": vals.pop("nflr_avg"), "nflr_flv": vals.pop("nflr_flv"),
                           "latent": float(z[k])}
                rec = EyeRecord(subject_id=sid, eye=eye, scan_index=0, group=group,
                                gender=int(female[s]), **vals)
                eye_rng = _rng(spec.seed, 1, subj_index, 0 if eye == "OD" else 1)
                defects = sample_defects(rec, lesion, eye_rng, render.n_tracks, render.n_segments)
                n_scans = int(eye_rng.integers(spec.scans_per_eye[0], spec.scans_per_eye[1] + 1))
                eyes.append(EyePlan(sid, subj_index, group, eye, 0 if eye == "OD" else 1,
                                    n_scans, rec, targets, defects))
                k += 1
            subj_index += 1
    return Cohort(spec, phenotype, lesion, render, eyes)


def render_scan(cohort: Cohort, plan: EyePlan, k: int) -> SyntheticEye:
    """Render repeat scan ``k`` of an eye from its own RNG substream."""
    seed = cohort.spec.seed
    anatomy = sample_anatomy(plan.eye, cohort.render, _rng(seed, 2, plan.subject_index, plan.eye_index))
    rng = _rng(seed, 3, plan.subject_index, plan.eye_index, k)
    bias = (anatomy.bias_amplitude, rng.uniform(0, TWO_PI))
    record = replace(plan.record, scan_index=k)
    return synth_maps(record, plan.defects, bias, rng, render=cohort.render, anatomy=anatomy,
                      nflr_target=plan.targets["nflr_avg"], calibration="observed")


def generate_cohort(spec: CohortSpec = None, phenotype: PhenotypeSpec = None,
                    lesion: LesionSpec = None, render: RenderSpec = None):
    """Plan and render a cohort; returns ``(cohort, [(scan_id, SyntheticEye), ...])``."""
    cohort = plan_cohort(spec or CohortSpec(), phenotype, lesion, render)
    return cohort, list(cohort.scans())


__all__ = [
    "EyeRecord", "PhenotypeSpec", "DefectSpec", "LesionSpec", "RenderSpec", "SyntheticEye",
    "CohortSpec", "Cohort", "EyePlan", "sample_clinical", "sample_defects", "synth_maps",
    "plan_cohort", "render_scan", "generate_cohort", "scan_id", "THICKNESS_UM", "REFLECTANCE_DB",
]
