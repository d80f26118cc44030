"""Run configuration: one JSON document covering every stage.

Unknown keys are rejected at every level. ``RunConfig.to_json()`` returns
the fully defaulted document, which is echoed into each output directory;
feeding it back reproduces the run.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .hybrid import FCN_FEATURES, ModelConfig, TrainConfig
from .maps import AnnulusSpec, MapPipelineConfig, TrajectoryModel, default_dense_radii
from .phantom import CohortSpec, LesionSpec, PhenotypeSpec, RenderSpec

DEFAULTS = {
    "seed": 0,
    "cohort": {
        "n_normal_subjects": 106,
        "n_pg_subjects": 164,
        "single_eye_fraction_normal": 2 / 106,
        "single_eye_fraction_pg": 90 / 164,
        "scans_per_eye": [2, 3],
    },
    "phenotype": {"normal": {}, "pg": {}, "loadings": {}},
    "lesion": {f.name: f.default for f in fields(LesionSpec)},
    "render": {
        "thickness_noise": 2.0,
        "reflectance_noise": 0.5,
        "max_disc_offset": 0.3,
        "bias_amplitude": [0.5, 2.5],
        "vessel_count": [4, 8],
        "vessel_width_samples": 3.0,
        "vessel_nfl_factor": [0.8, 0.9],
        "vessel_ppec_factor": [0.25, 0.3],
        "harmonic_sd_thickness": 0.02,
        "harmonic_sd_reflectance": 0.3,
        "bundle_jitter": 0.12,
        "bundle_width_sd": 0.05,
        "ppec_level": 40.0,
        "n_angles": 256,
        "ring_diameters": {"n": 13, "inner": 1.3, "outer": 4.9},
    },
    "maps": {
        "dense_radii": {"n": 141, "inner": 0.65, "outer": 2.45},
        "annulus": {"inner_diameter": 2.1, "outer_diameter": 4.2},
        "trajectory": {"kind": "arcuate", "curvature": 0.35},
        "n_tracks": 32,
        "n_segments": 32,
        "filter_thickness": False,
        "flv_percentile": 5.0,
    },
    "split": {"fraction": 0.8, "seed": None},
    "model": {
        "channels": None,
        "conv_channels": [8, 16],
        "kernel_size": 2,
        "cnn_embed_dim": 64,
        "fcn_hidden": [16],
        "fusion_hidden": 32,
        "activation": "relu",
    },
    "train": {
        "batch_size": 64,
        "epochs": 300,
        "learning_rate": 8e-5,
        "validation_split": 0.2,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
    },
    "logistic": {"lambda": 1e-3, "tol": 1e-8, "max_iter": 100},
    "evaluation": {"threshold": 0.5, "unit": "scan"},
}

_RENDER_SCALARS = (
    "thickness_noise", "reflectance_noise", "max_disc_offset", "vessel_width_samples",
    "harmonic_sd_thickness", "harmonic_sd_reflectance", "bundle_jitter", "bundle_width_sd",
    "ppec_level",
)
_RENDER_PAIRS = ("bias_amplitude", "vessel_nfl_factor", "vessel_ppec_factor")

# sections whose keys are free-form (validated by the consumer)
_OPEN = {("phenotype", "normal"), ("phenotype", "pg"), ("phenotype", "loadings")}


def _merge(base, override, path=()):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and path + (key,) not in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    doc: dict

    @classmethod
    def from_dict(cls, doc=None, seed=None):
        merged = _merge(DEFAULTS, doc or {})
        if seed is not None:
            merged["seed"] = int(seed)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, seed=None):
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc, seed)

    def to_json(self):
        return copy.deepcopy(self.doc)

    def write(self, path):
        Path(path).write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def validate(self):
        # building every component runs its own checks
        self.cohort_spec()
        self.phenotype_spec()
        self.lesion_spec()
        self.render_spec()
        self.pipeline_config()
        ch = self.doc["model"]["channels"]
        if ch is not None and ch not in (1, 2):
            raise ConfigError("model.channels must be 1, 2 or null")
        self.model_config(ch or 2)
        self.train_config()
        ev = self.doc["evaluation"]
        if ev["unit"] not in ("scan", "eye"):
            raise ConfigError("evaluation.unit must be 'scan' or 'eye'")
        if not 0 < self.doc["split"]["fraction"] <= 1:
            raise ConfigError("split.fraction must lie in (0, 1]")
        if self.doc["logistic"]["lambda"] < 0:
            raise ConfigError("logistic.lambda must be >= 0")

    # -------------------------------------------------------------- views

    @property
    def seed(self):
        return int(self.doc["seed"])

    @property
    def split_seed(self):
        s = self.doc["split"]["seed"]
        return self.seed if s is None else int(s)

    @property
    def split_fraction(self):
        return float(self.doc["split"]["fraction"])

    def cohort_spec(self):
        c = self.doc["cohort"]
        return CohortSpec(
            n_normal_subjects=int(c["n_normal_subjects"]),
            n_pg_subjects=int(c["n_pg_subjects"]),
            single_eye_fraction_normal=float(c["single_eye_fraction_normal"]),
            single_eye_fraction_pg=float(c["single_eye_fraction_pg"]),
            scans_per_eye=tuple(int(v) for v in c["scans_per_eye"]),
            seed=self.seed,
        )

    def phenotype_spec(self):
        p = self.doc["phenotype"]
        spec = PhenotypeSpec().with_overrides({"normal": p["normal"], "pg": p["pg"]})
        for name, lam in p["loadings"].items():
            if name not in spec.loadings:
                raise ConfigError(f"unknown loading field {name!r}")
            spec.loadings[name] = float(lam)
        spec.__post_init__()
        return spec

    def lesion_spec(self):
        return LesionSpec(**self.doc["lesion"])

    def _ring_diameters(self):
        r = self.doc["render"]["ring_diameters"]
        return tuple(np.linspace(r["inner"], r["outer"], int(r["n"])).tolist())

    def render_spec(self):
        r = self.doc["render"]
        m = self.pipeline_config()
        scalars = {k: float(v) for k, v in r.items() if k in _RENDER_SCALARS}
        pairs = {k: tuple(float(x) for x in r[k]) for k in _RENDER_PAIRS}
        pairs["vessel_count"] = tuple(int(x) for x in r["vessel_count"])
        return RenderSpec(
            ring_diameters=self._ring_diameters(),
            n_angles=int(r["n_angles"]),
            annulus=m.annulus,
            trajectory=m.trajectory,
            n_tracks=m.n_tracks,
            n_segments=m.n_segments,
            **scalars,
            **pairs,
        )

    def pipeline_config(self):
        m = self.doc["maps"]
        d = m["dense_radii"]
        if int(m["n_tracks"]) < 1 or int(m["n_segments"]) < 1:
            raise ConfigError("n_tracks and n_segments must be >= 1")
        return MapPipelineConfig(
            dense_radii=default_dense_radii(int(d["n"]), float(d["inner"]), float(d["outer"])),
            annulus=AnnulusSpec(**m["annulus"]),
            trajectory=TrajectoryModel(**m["trajectory"]),
            n_tracks=int(m["n_tracks"]),
            n_segments=int(m["n_segments"]),
            filter_thickness=bool(m["filter_thickness"]),
        )

    @property
    def flv_percentile(self):
        return float(self.doc["maps"]["flv_percentile"])

    def model_config(self, channels):
        m = self.doc["model"]
        maps = self.doc["maps"]
        if m["channels"] is not None and int(m["channels"]) != channels:
            raise ConfigError(
                f"model.channels={m['channels']} conflicts with a {channels}-channel model arm"
            )
        return ModelConfig(
            cnn_channels_in=channels,
            conv_channels=tuple(int(v) for v in m["conv_channels"]),
            kernel_size=int(m["kernel_size"]),
            grid_shape=(int(maps["n_segments"]), int(maps["n_tracks"])),
            cnn_embed_dim=int(m["cnn_embed_dim"]),
            fcn_inputs=FCN_FEATURES,
            fcn_hidden=tuple(int(v) for v in m["fcn_hidden"]),
            fusion_hidden=int(m["fusion_hidden"]),
            activation=m["activation"],
        )

    def train_config(self):
        return TrainConfig(seed=self.seed, **self.doc["train"])

    def logistic_options(self):
        lg = self.doc["logistic"]
        return {"lam": float(lg["lambda"]), "tol": float(lg["tol"]), "max_iter": int(lg["max_iter"])}


def describe_phantom(cfg: RunConfig):
    """Generator settings as recorded in a bundle manifest."""
    return {
        "cohort": asdict(cfg.cohort_spec()),
        "phenotype": {
            "moments": {g: {k: list(v) for k, v in m.items()} for g, m in cfg.phenotype_spec().moments.items()},
            "bounds": {k: list(v) for k, v in cfg.phenotype_spec().bounds.items()},
            "loadings": dict(cfg.phenotype_spec().loadings),
        },
        "lesion": asdict(cfg.lesion_spec()),
        "render": cfg.doc["render"],
    }
