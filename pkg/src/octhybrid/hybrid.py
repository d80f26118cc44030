"""Hybrid CNN + FCN glaucoma classifier.

The CNN branch reads the superpixel grids (thickness, optionally
reflectance) as a ``(C, segments, tracks)`` stack with azimuthal wrap
padding; the FCN branch reads ten clinical / ONH / GCC scalars. The two
embeddings are concatenated and mapped to a single sigmoid output.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, InputValidationError

FCN_FEATURES = (
    "age",
    "gender",
    "axial_length",
    "gcc_sup",
    "gcc_inf",
    "gcc_flv",
    "disc_area",
    "rim_area",
    "cd_area_ratio",
    "vcdr",
)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    cnn_channels_in: int = 2
    conv_channels: tuple = (8, 16)
    kernel_size: int = 2
    grid_shape: tuple = (32, 32)  # (segments, tracks)
    cnn_embed_dim: int = 64
    fcn_inputs: tuple = FCN_FEATURES
    fcn_hidden: tuple = (16,)
    fusion_hidden: int = 32
    activation: str = "relu"  # "identity" only for gradient-check experiments

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        self.fcn_inputs = tuple(self.fcn_inputs)
        self.fcn_hidden = tuple(int(h) for h in self.fcn_hidden)
        if self.cnn_channels_in not in (1, 2):
            raise ConfigError("cnn_channels_in must be 1 (thickness) or 2 (thickness + reflectance)")
        if self.activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        h, w = self.grid_shape
        scale = 2 ** len(self.conv_channels)
        if h % scale or w % scale:
            raise ConfigError(f"grid {h}x{w} not divisible by pooling factor {scale}")

    @property
    def flat_dim(self):
        h, w = self.grid_shape
        scale = 2 ** len(self.conv_channels)
        return self.conv_channels[-1] * (h // scale) * (w // scale)

    def param_shapes(self):
        """Parameter names and shapes in checkpoint order."""
        shapes = {}
        c_in = self.cnn_channels_in
        k = self.kernel_size
        for i, c_out in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (c_out, c_in, k, k)
            shapes[f"conv{i}.b"] = (c_out,)
            c_in = c_out
        shapes["embed.w"] = (self.flat_dim, self.cnn_embed_dim)
        shapes["embed.b"] = (self.cnn_embed_dim,)
        d_in = len(self.fcn_inputs)
        for i, d_out in enumerate(self.fcn_hidden):
            shapes[f"fcn{i}.w"] = (d_in, d_out)
            shapes[f"fcn{i}.b"] = (d_out,)
            d_in = d_out
        fused = self.cnn_embed_dim + d_in
        shapes["fuse.w"] = (fused, self.fusion_hidden)
        shapes["fuse.b"] = (self.fusion_hidden,)
        shapes["out.w"] = (self.fusion_hidden, 1)
        shapes["out.b"] = (1,)
        return shapes

    def n_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 300
    learning_rate: float = 8e-5
    validation_split: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_split < 1.0:
            raise ConfigError("validation_split must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif len(shape) == 4:
            o, c, kh, kw = shape
            params[name] = nn.glorot_uniform(rng, shape, c * kh * kw, o * kh * kw)
        else:
            params[name] = nn.glorot_uniform(rng, shape, shape[0], shape[1])
    return params


def _act_forward(cfg, x):
    if cfg.activation == "identity":
        return x, None
    return nn.relu_forward(x)


def _act_backward(cfg, g, mask):
    return g if mask is None else nn.relu_backward(g, mask)


def forward_logits(params, cfg: ModelConfig, maps, scalars, keep_cache=False):
    """Logits for already-standardized inputs. Returns ``(z, cache)``."""
    cache = {}
    h = np.moveaxis(maps, 1, -1)
    for i in range(len(cfg.conv_channels)):
        h, cache[f"conv{i}"] = nn.conv2d_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        h, cache[f"act_conv{i}"] = _act_forward(cfg, h)
        h, cache[f"pool{i}"] = nn.meanpool2_forward(h)
    cache["flat_shape"] = h.shape
    h = h.reshape(h.shape[0], -1)
    h, cache["embed"] = nn.dense_forward(h, params["embed.w"], params["embed.b"])
    e, cache["act_embed"] = _act_forward(cfg, h)
    f = scalars
    for i in range(len(cfg.fcn_hidden)):
        f, cache[f"fcn{i}"] = nn.dense_forward(f, params[f"fcn{i}.w"], params[f"fcn{i}.b"])
        f, cache[f"act_fcn{i}"] = _act_forward(cfg, f)
    u = np.concatenate([e, f], axis=1)
    u, cache["fuse"] = nn.dense_forward(u, params["fuse.w"], params["fuse.b"])
    u, cache["act_fuse"] = _act_forward(cfg, u)
    z, cache["out"] = nn.dense_forward(u, params["out.w"], params["out.b"])
    return z[:, 0], (cache if keep_cache else None)


def backward(params, cfg: ModelConfig, cache, dz):
    """Gradients of a scalar loss given ``dz = dL/dlogit`` per sample."""
    grads = {}
    g = dz[:, None]
    g, grads["out.w"], grads["out.b"] = nn.dense_backward(g, cache["out"], params["out.w"])
    g = _act_backward(cfg, g, cache["act_fuse"])
    g, grads["fuse.w"], grads["fuse.b"] = nn.dense_backward(g, cache["fuse"], params["fuse.w"])
    ge, gf = g[:, :cfg.cnn_embed_dim], g[:, cfg.cnn_embed_dim:]
    for i in reversed(range(len(cfg.fcn_hidden))):
        gf = _act_backward(cfg, gf, cache[f"act_fcn{i}"])
        gf, grads[f"fcn{i}.w"], grads[f"fcn{i}.b"] = nn.dense_backward(
            gf, cache[f"fcn{i}"], params[f"fcn{i}.w"]
        )
    ge = _act_backward(cfg, ge, cache["act_embed"])
    ge, grads["embed.w"], grads["embed.b"] = nn.dense_backward(ge, cache["embed"], params["embed.w"])
    ge = ge.reshape(cache["flat_shape"])
    for i in reversed(range(len(cfg.conv_channels))):
        ge = nn.meanpool2_backward(ge, cache[f"pool{i}"])
        ge = _act_backward(cfg, ge, cache[f"act_conv{i}"])
        ge, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = nn.conv2d_backward(
            ge, cache[f"conv{i}"], need_dx=i > 0
        )
    return grads


def loss_and_grads(params, cfg, maps, scalars, labels):
    z, cache = forward_logits(params, cfg, maps, scalars, keep_cache=True)
    p = nn.sigmoid(z)
    loss = nn.bce_loss(p, labels)
    dz = nn.bce_grad(p, labels) * p * (1.0 - p)
    return loss, p, backward(params, cfg, cache, dz)


@dataclass
class Standardizer:
    map_mean: np.ndarray
    map_sd: np.ndarray
    scalar_mean: np.ndarray
    scalar_sd: np.ndarray

    @classmethod
    def fit(cls, maps, empty, scalars):
        c = maps.shape[1]
        map_mean = np.empty(c)
        map_sd = np.empty(c)
        for ch in range(c):
            vals = maps[:, ch][~empty[:, ch]]
            map_mean[ch] = vals.mean()
            sd = vals.std()
            map_sd[ch] = sd if sd > 0 else 1.0
        scalar_mean = scalars.mean(axis=0)
        scalar_sd = scalars.std(axis=0)
        scalar_sd = np.where(scalar_sd > 0, scalar_sd, 1.0)
        return cls(map_mean, map_sd, scalar_mean, scalar_sd)

    def apply(self, maps, empty, scalars):
        maps = np.asarray(maps, dtype=float)
        scalars = np.asarray(scalars, dtype=float)
        if empty is None:
            empty = np.zeros(maps.shape, dtype=bool)
        if not np.all(np.isfinite(maps[~empty])) or not np.all(np.isfinite(scalars)):
            raise InputValidationError("non-finite value in model input")
        zm = (maps - self.map_mean[None, :, None, None]) / self.map_sd[None, :, None, None]
        zm = np.where(empty, 0.0, zm)
        zs = (scalars - self.scalar_mean) / self.scalar_sd
        return zm, zs

    def to_json(self):
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, doc):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in doc.items()})


@dataclass
class HybridModel:
    config: ModelConfig
    params: dict
    standardizer: Standardizer | None = None
    seed: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0):
        return cls(config, init_params(config, seed), seed=seed)

    def _check_maps(self, maps):
        if maps.ndim != 4 or maps.shape[1] != self.config.cnn_channels_in:
            raise ConfigError(
                f"model expects {self.config.cnn_channels_in}-channel stack, got shape {maps.shape}"
            )
        if tuple(maps.shape[2:]) != self.config.grid_shape:
            raise ConfigError(f"grid shape {maps.shape[2:]} != {self.config.grid_shape}")

    def predict(self, maps, scalars, empty=None):
        """Probabilities for raw (unstandardized) inputs.

        ``maps`` is ``(N, C, segments, tracks)`` (a single ``(C, H, W)`` stack
        is accepted); ``empty`` flags superpixels with no source pixels.
        """
        maps = np.asarray(maps, dtype=float)
        scalars = np.asarray(scalars, dtype=float)
        single = maps.ndim == 3
        if single:
            maps, scalars = maps[None], scalars[None]
            empty = None if empty is None else np.asarray(empty)[None]
        self._check_maps(maps)
        if scalars.shape[1:] != (len(self.config.fcn_inputs),):
            raise ConfigError(f"expected {len(self.config.fcn_inputs)} scalar features")
        if self.standardizer is None:
            if not (np.all(np.isfinite(maps)) and np.all(np.isfinite(scalars))):
                raise InputValidationError("non-finite value in model input")
            zm, zs = maps, scalars
        else:
            zm, zs = self.standardizer.apply(maps, empty, scalars)
        z, _ = forward_logits(self.params, self.config, zm, zs)
        p = nn.sigmoid(z)
        return float(p[0]) if single else p

    # -------------------------------------------------------------- checkpoints

    def save(self, directory, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensors = []
        offset = 0
        blobs = []
        for name, shape in self.config.param_shapes().items():
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            tensors.append({"name": name, "shape": list(shape), "offset": offset})
            offset += arr.nbytes
            blobs.append(arr.tobytes())
        (directory / "params.bin").write_bytes(b"".join(blobs))
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "model_type": "hybrid",
            "config": asdict(self.config),
            "standardizer": None if self.standardizer is None else self.standardizer.to_json(),
            "seed": self.seed,
            "epoch": self.epoch,
            "tensors": tensors,
            "meta": {**self.meta, **(extra or {})},
        }
        (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "checkpoint.json").read_text())
        if manifest.get("model_type") != "hybrid":
            raise ConfigError(f"{directory} is not a hybrid checkpoint")
        cfg = ModelConfig(**manifest["config"])
        raw = (directory / "params.bin").read_bytes()
        params = {}
        for t in manifest["tensors"]:
            count = int(np.prod(t["shape"]))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=t["offset"])
            params[t["name"]] = arr.reshape(t["shape"]).astype(float)
        std = manifest["standardizer"]
        return cls(
            cfg,
            params,
            None if std is None else Standardizer.from_json(std),
            seed=manifest["seed"],
            epoch=manifest["epoch"],
            meta=manifest.get("meta", {}),
        )


@dataclass
class HybridDataset:
    """Model inputs for a set of scans. ``maps`` is ``(N, C, segments, tracks)``."""

    maps: np.ndarray
    scalars: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    empty: np.ndarray | None = None

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=float)
        self.scalars = np.asarray(self.scalars, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        self.subjects = np.asarray(self.subjects)
        if self.empty is None:
            self.empty = np.zeros(self.maps.shape, dtype=bool)
        n = len(self.labels)
        if not (len(self.maps) == len(self.scalars) == len(self.subjects) == n):
            raise ConfigError("dataset arrays disagree on sample count")

    def subset(self, idx):
        return HybridDataset(
            self.maps[idx], self.scalars[idx], self.labels[idx], self.subjects[idx], self.empty[idx]
        )


@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])
            for row in zip(self.epoch, self.train_loss, self.val_loss, self.train_acc, self.val_acc):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def validation_subjects(subjects, labels, fraction, rng):
    """Subject-wise validation carve-out, stratified by label."""
    subjects = np.asarray(subjects)
    labels = np.asarray(labels)
    val = []
    for cls_label in (0, 1):
        ids = np.unique(subjects[labels == cls_label])
        ids = ids[rng.permutation(len(ids))]
        n_val = int(round(fraction * len(ids)))
        n_val = min(max(n_val, 1 if len(ids) > 1 else 0), len(ids) - 1)
        val.extend(ids[:n_val].tolist())
    return np.isin(subjects, val)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: HybridDataset, log=None):
    """Fit a hybrid model. Returns ``(model, history)``.

    The validation subjects are carved out of ``data`` before the
    standardizer is fit, so neither validation nor any held-out test data
    influences input scaling.
    """
    labels = data.labels
    if len(labels) == 0 or len(np.unique(labels)) < 2:
        raise ConfigError("training data must contain both classes")
    if data.maps.shape[1] != model_cfg.cnn_channels_in:
        raise ConfigError(
            f"config expects {model_cfg.cnn_channels_in} channel(s), data has {data.maps.shape[1]}"
        )
    rng = np.random.default_rng(train_cfg.seed)
    is_val = validation_subjects(data.subjects, labels, train_cfg.validation_split, rng)
    fit, val = data.subset(~is_val), data.subset(is_val)
    std = Standardizer.fit(fit.maps, fit.empty, fit.scalars)
    xm, xs = std.apply(fit.maps, fit.empty, fit.scalars)
    vm, vs = std.apply(val.maps, val.empty, val.scalars)

    model = HybridModel.initialize(model_cfg, seed=train_cfg.seed)
    model.standardizer = std
    state = nn.AdamState()
    history = History()
    n = len(fit.labels)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            loss, p, grads = loss_and_grads(model.params, model_cfg, xm[idx], xs[idx], fit.labels[idx])
            nn.adam_step(
                model.params, grads, state, train_cfg.learning_rate,
                train_cfg.beta1, train_cfg.beta2, train_cfg.epsilon,
            )
            loss_sum += loss * len(idx)
            correct += int(np.sum((p >= 0.5) == (fit.labels[idx] >= 0.5)))
        history.epoch.append(epoch)
        history.train_loss.append(loss_sum / n)
        history.train_acc.append(correct / n)
        if len(val.labels):
            z, _ = forward_logits(model.params, model_cfg, vm, vs)
            pv = nn.sigmoid(z)
            history.val_loss.append(nn.bce_loss(pv, val.labels))
            history.val_acc.append(float(np.mean((pv >= 0.5) == (val.labels >= 0.5))))
        else:
            history.val_loss.append(math.nan)
            history.val_acc.append(math.nan)
        if log is not None and (epoch % 50 == 0 or epoch == train_cfg.epochs):
            log(f"epoch {epoch}: loss {history.train_loss[-1]:.4f} val {history.val_loss[-1]:.4f}")
    model.epoch = train_cfg.epochs
    return model, history


def _staged_loss(params, cfg, maps, scalars, y):
    """Loss evaluator for finite differences in extended precision.

    ``evaluate(name, col)`` recomputes the network downstream of parameter
    tensor ``name``; for dense layers only output column ``col`` of that
    layer changes, so only that column is recomputed. Everything else is
    reused bit-for-bit from the unperturbed pass.
    """
    ext = np.longdouble

    def act(x):
        return x if cfg.activation == "identity" else np.maximum(x, 0)

    def cnn():
        h = np.moveaxis(maps, 1, -1)
        for i in range(len(cfg.conv_channels)):
            h, _ = nn.conv2d_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
            h, _ = nn.meanpool2_forward(act(h))
        return h.reshape(h.shape[0], -1)

    def loss(z):
        p = 1 / (1 + np.exp(-z))
        p = min(max(p, ext(nn.BCE_CLAMP)), 1 - ext(nn.BCE_CLAMP))
        return -(y * np.log(p) + (1 - y) * np.log(1 - p))

    def head(e, f, fuse=None):
        if fuse is None:
            fuse = act(np.concatenate([e, f], axis=1) @ params["fuse.w"] + params["fuse.b"])
        return loss((fuse @ params["out.w"] + params["out.b"])[0, 0])

    flat = cnn()
    e = act(flat @ params["embed.w"] + params["embed.b"])
    f_in = [scalars]
    for i in range(len(cfg.fcn_hidden)):
        f_in.append(act(f_in[-1] @ params[f"fcn{i}.w"] + params[f"fcn{i}.b"]))
    f = f_in[-1]
    u = np.concatenate([e, f], axis=1)
    fuse = act(u @ params["fuse.w"] + params["fuse.b"])

    def evaluate(name, col):
        layer = name.split(".")[0]
        if layer.startswith("conv"):
            flat_p = cnn()
            return head(act(flat_p @ params["embed.w"] + params["embed.b"]), f)
        if layer == "embed":
            e_p = e.copy()
            e_p[0, col] = act(flat[0] @ params["embed.w"][:, col] + params["embed.b"][col])
            return head(e_p, f)
        if layer.startswith("fcn"):
            i = int(layer[3:])
            g = f_in[i + 1].copy()
            g[0, col] = act(f_in[i][0] @ params[layer + ".w"][:, col] + params[layer + ".b"][col])
            for k in range(i + 1, len(cfg.fcn_hidden)):
                g = act(g @ params[f"fcn{k}.w"] + params[f"fcn{k}.b"])
            return head(e, g)
        if layer == "fuse":
            fuse_p = fuse.copy()
            fuse_p[0, col] = act(u[0] @ params["fuse.w"][:, col] + params["fuse.b"][col])
            return head(e, f, fuse_p)
        return head(e, f, fuse)

    return evaluate


def gradient_check(model: HybridModel, maps, scalars, label, eps=1e-6):
    """Compare backprop gradients to central differences on one sample.

    Inputs are taken as already standardized. Returns the maximum relative
    error ``|a - n| / max(|a|, |n|, 1e-12)`` and the per-tensor maxima.
    The perturbed losses are evaluated in ``np.longdouble`` so that the
    difference quotient is not swamped by float64 round-off for parameters
    whose gradient is small.
    """
    cfg = model.config
    ext = np.longdouble
    params = {k: v.astype(ext) for k, v in model.params.items()}
    maps = np.asarray(maps, dtype=float).reshape((1,) + tuple(np.shape(maps))[-3:])
    scalars = np.asarray(scalars, dtype=float).reshape(1, -1)
    y = float(label)

    _, _, analytic = loss_and_grads(model.params, cfg, maps, scalars, np.array([y]))
    loss_at = _staged_loss(params, cfg, maps.astype(ext), scalars.astype(ext), ext(y))
    step = ext(eps)
    per_tensor = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        ncols = p.shape[-1] if p.ndim == 2 else 1
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            col = i % ncols if p.ndim == 2 else i
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at(name, col)
            flat[i] = orig - step
            down = loss_at(name, col)
            flat[i] = orig
            num = float((up - down) / (2 * step))
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor
