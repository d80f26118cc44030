"""In-memory glue between the phantom, the map chain and the models.

The command layer adds file I/O around these functions; demos and tests
call them directly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import baselines
from .errors import ConfigError
from .evaluation import SplitAssignment, subject_split
from .hybrid import FCN_FEATURES, HybridDataset, HybridModel, ModelConfig, TrainConfig, train
from .maps import (
    REFLECTANCE_DB,
    THICKNESS_UM,
    MapPipelineConfig,
    NormativeGrid,
    SuperpixelGrid,
    focal_loss_volume,
    grid_average,
    process_scan,
)

MODEL_ARMS = ("logit-a", "logit-b", "hybrid-1ch", "hybrid-2ch")


@dataclass
class GridStack:
    """Processed grids of many scans, ``[n_scans x n_tracks x n_segments]``."""

    thickness: np.ndarray
    thickness_counts: np.ndarray
    reflectance: np.ndarray
    reflectance_counts: np.ndarray

    def __len__(self):
        return len(self.thickness)

    def grid(self, i, kind):
        if kind == THICKNESS_UM:
            return SuperpixelGrid(self.thickness[i], self.thickness_counts[i], THICKNESS_UM)
        return SuperpixelGrid(self.reflectance[i], self.reflectance_counts[i], REFLECTANCE_DB)

    def subset(self, idx):
        return GridStack(self.thickness[idx], self.thickness_counts[idx],
                         self.reflectance[idx], self.reflectance_counts[idx])


def process_scans(inputs, cfg: MapPipelineConfig = None, threads=1) -> GridStack:
    """Run :func:`process_scan` over ``(profiles, ring_shadow, disc_offset)`` triples.

    Results are collected in input order, so the thread count never changes
    the output.
    """
    cfg = cfg or MapPipelineConfig()
    run = lambda item: process_scan(*item, cfg)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(run, inputs))
    else:
        done = [run(item) for item in inputs]
    if not done:
        raise ConfigError("no scans to process")
    return GridStack(
        np.stack([d.thickness.values for d in done]),
        np.stack([d.thickness.counts for d in done]),
        np.stack([d.reflectance.values for d in done]),
        np.stack([d.reflectance.counts for d in done]),
    )


def fit_norms(grids: GridStack, reference_idx, percentile=5.0):
    """Normative grids for thickness and reflectance from the reference scans."""
    idx = np.asarray(reference_idx)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if len(idx) < 2:
        raise ConfigError("need at least two reference scans for normative grids")
    return {
        kind: NormativeGrid.fit([grids.grid(i, kind) for i in idx], percentile)
        for kind in (THICKNESS_UM, REFLECTANCE_DB)
    }


def derived_scalars(grids: GridStack, norms) -> dict:
    """Map-derived per-scan scalars: rnfl_flv, nflr_avg, nflr_flv."""
    n = len(grids)
    out = {"rnfl_flv": np.empty(n), "nflr_avg": np.empty(n), "nflr_flv": np.empty(n)}
    for i in range(n):
        t = grids.grid(i, THICKNESS_UM)
        r = grids.grid(i, REFLECTANCE_DB)
        out["rnfl_flv"][i] = focal_loss_volume(t, norms[THICKNESS_UM])
        out["nflr_avg"][i] = grid_average(r)
        out["nflr_flv"][i] = focal_loss_volume(r, norms[REFLECTANCE_DB])
    return out


def split_for(records, fraction, seed) -> SplitAssignment:
    return subject_split([r["subject_id"] for r in records], [r["group"] for r in records],
                         fraction, seed)


def labels_of(records):
    return np.array([1 if r["group"] == "pg" else 0 for r in records], dtype=int)


def hybrid_dataset(records, grids: GridStack, channels=2, features=FCN_FEATURES) -> HybridDataset:
    """Stack grids as ``(N, C, segments, tracks)``; thickness first."""
    if channels not in (1, 2):
        raise ConfigError("channels must be 1 or 2")
    maps = [grids.thickness]
    counts = [grids.thickness_counts]
    if channels == 2:
        maps.append(grids.reflectance)
        counts.append(grids.reflectance_counts)
    m = np.stack(maps, axis=1).transpose(0, 1, 3, 2)
    empty = np.stack(counts, axis=1).transpose(0, 1, 3, 2) == 0
    m = np.where(empty, 0.0, m)
    scalars = np.array([[float(r[f]) for f in features] for r in records])
    return HybridDataset(m, scalars, labels_of(records).astype(float),
                         np.array([r["subject_id"] for r in records]), empty)


def logistic_matrix(records, variant):
    return np.vstack([baselines.build_features(r, variant) for r in records])


def fit_arm(arm, records, grids, train_idx, model_cfg=None, train_cfg=None, lam=1e-3, log=None):
    """Train one model arm on the scans in ``train_idx``."""
    recs = [records[i] for i in train_idx]
    if arm in ("logit-a", "logit-b"):
        x = logistic_matrix(recs, arm)
        return baselines.fit_logistic(x, labels_of(recs), lam=lam,
                                      names=baselines.feature_names(arm), variant=arm), None
    if arm not in ("hybrid-1ch", "hybrid-2ch"):
        raise ConfigError(f"unknown model arm {arm!r}")
    channels = 2 if arm == "hybrid-2ch" else 1
    cfg = model_cfg or ModelConfig(cnn_channels_in=channels)
    if cfg.cnn_channels_in != channels:
        raise ConfigError(f"{arm} needs cnn_channels_in={channels}, config has {cfg.cnn_channels_in}")
    data = hybrid_dataset(recs, grids.subset(train_idx), channels, cfg.fcn_inputs)
    return train(cfg, train_cfg or TrainConfig(), data, log=log)


def score_arm(model, records, grids, idx):
    recs = [records[i] for i in idx]
    if isinstance(model, baselines.LogisticModel):
        return model.predict_proba(logistic_matrix(recs, model.variant))
    if isinstance(model, HybridModel):
        data = hybrid_dataset(recs, grids.subset(idx), model.config.cnn_channels_in,
                              model.config.fcn_inputs)
        return model.predict(data.maps, data.scalars, data.empty)
    raise ConfigError(f"cannot score model of type {type(model).__name__}")
