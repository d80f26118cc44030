"""Ridge logistic-regression reference models fitted by IRLS.

Objective maximised over intercept ``b`` and weights ``w`` on standardized
features ``z``::

    mean_i [ y_i * eta_i - log(1 + exp(eta_i)) ] - lam / 2 * |w|^2,   eta = b + z @ w

The intercept is not penalised. Newton (IRLS) steps are halved until the
objective does not decrease.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InputValidationError, UndefinedStatisticError
from .maps import focal_loss_volume, grid_average


class FeatureVariant(str, enum.Enum):
    WITHOUT_REFLECTANCE = "logit-a"
    WITH_REFLECTANCE = "logit-b"


BASE_FEATURES = (
    "rnfl_avg", "rnfl_flv", "gcc_sup", "gcc_inf", "gcc_flv", "vcdr", "age", "axial_length", "gender",
)
REFLECTANCE_FEATURES = ("nflr_avg", "nflr_flv")


def feature_names(variant) -> tuple:
    variant = FeatureVariant(variant)
    if variant is FeatureVariant.WITH_REFLECTANCE:
        return BASE_FEATURES + REFLECTANCE_FEATURES
    return BASE_FEATURES


def build_features(record, variant, reflectance_grid=None, reflectance_norm=None) -> np.ndarray:
    """Feature vector for one scan.

    ``record`` is any mapping with the clinical fields. When a processed
    reflectance grid (and its normative grid) is passed, ``nflr_avg`` and
    ``nflr_flv`` are computed from it; otherwise they are read from the
    record.
    """
    names = feature_names(variant)
    derived = {}
    if reflectance_grid is not None and FeatureVariant(variant) is FeatureVariant.WITH_REFLECTANCE:
        derived["nflr_avg"] = grid_average(reflectance_grid)
        if reflectance_norm is not None:
            derived["nflr_flv"] = focal_loss_volume(reflectance_grid, reflectance_norm)
    out = np.empty(len(names))
    for i, name in enumerate(names):
        if name in derived:
            out[i] = derived[name]
            continue
        try:
            value = record[name]
        except (KeyError, IndexError, TypeError):
            raise InputValidationError(f"record is missing feature {name!r}") from None
        if value is None or value == "":
            raise InputValidationError(f"record is missing feature {name!r}")
        out[i] = float(value)
        if not np.isfinite(out[i]):
            raise InputValidationError(f"feature {name!r} is not finite")
    return out


def _log1pexp(eta):
    return np.logaddexp(0.0, eta)


def _sigmoid(eta):
    return np.exp(-_log1pexp(-eta))


def penalized_objective(beta, x1, y, lam):
    eta = x1 @ beta
    return float(np.mean(y * eta - _log1pexp(eta)) - 0.5 * lam * np.dot(beta[1:], beta[1:]))


@dataclass
class LogisticModel:
    variant: str
    names: tuple
    intercept: float
    coef: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lam: float
    iterations: int = 0
    converged: bool = True
    trace: list = field(default_factory=list)

    def decision(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != len(self.names):
            raise InputValidationError(
                f"expected {len(self.names)} features for {self.variant}, got {x.shape[1]}"
            )
        if not np.all(np.isfinite(x)):
            raise InputValidationError("features must be finite")
        return self.intercept + ((x - self.mean) / self.sd) @ self.coef

    def predict_proba(self, x):
        return _sigmoid(self.decision(x))

    def to_json(self):
        return {
            "kind": "ridge_logistic",
            "variant": self.variant,
            "intercept": float(self.intercept),
            "coefficients": {n: float(c) for n, c in zip(self.names, self.coef)},
            "feature_order": list(self.names),
            "standardizer": {"mean": [float(v) for v in self.mean], "sd": [float(v) for v in self.sd]},
            "lambda": float(self.lam),
            "convergence": {"iterations": self.iterations, "converged": self.converged, "trace": self.trace},
        }

    @classmethod
    def from_json(cls, doc):
        names = tuple(doc["feature_order"])
        return cls(
            variant=doc["variant"],
            names=names,
            intercept=float(doc["intercept"]),
            coef=np.array([doc["coefficients"][n] for n in names], dtype=float),
            mean=np.array(doc["standardizer"]["mean"], dtype=float),
            sd=np.array(doc["standardizer"]["sd"], dtype=float),
            lam=float(doc["lambda"]),
            iterations=int(doc["convergence"]["iterations"]),
            converged=bool(doc["convergence"]["converged"]),
            trace=list(doc["convergence"]["trace"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def fit_logistic(x, y, lam=1e-3, tol=1e-8, max_iter=100, names=None, variant="custom") -> LogisticModel:
    """Ridge-penalised IRLS with step halving.

    Raises ``ConvergenceError`` (with the per-iteration trace) if the
    largest coefficient change is still >= ``tol`` after ``max_iter``
    iterations.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise InputValidationError("x must be (n, p) with one label per row")
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(x.shape[1]))
    if len(names) != x.shape[1]:
        raise InputValidationError("one name per feature column required")
    if not np.all(np.isfinite(x)):
        raise InputValidationError("features must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise InputValidationError("labels must be 0 or 1")
    if y.min() == y.max():
        raise UndefinedStatisticError("both classes are needed to fit a logistic model")
    if lam < 0:
        raise InputValidationError("lambda must be >= 0")
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    for name, s in zip(names, sd):
        if not s > 0:
            raise InputValidationError(f"feature {name!r} has zero variance")
    z = (x - mean) / sd
    n, p = z.shape
    x1 = np.hstack([np.ones((n, 1)), z])
    pen = np.full(p + 1, lam)
    pen[0] = 0.0
    beta = np.zeros(p + 1)
    obj = penalized_objective(beta, x1, y, lam)
    trace = []
    for it in range(1, max_iter + 1):
        mu = _sigmoid(x1 @ beta)
        w = mu * (1.0 - mu)
        grad = x1.T @ (y - mu) / n - pen * beta
        hess = (x1.T * w) @ x1 / n + np.diag(pen)
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        for _ in range(60):
            cand = beta + scale * step
            cand_obj = penalized_objective(cand, x1, y, lam)
            if cand_obj >= obj - 1e-15 * abs(obj):
                break
            scale *= 0.5
        change = float(np.max(np.abs(cand - beta)))
        beta, obj = cand, cand_obj
        trace.append({"iteration": it, "objective": obj, "max_change": change, "step_scale": scale})
        if change < tol:
            label = variant.value if isinstance(variant, FeatureVariant) else str(variant)
            return LogisticModel(label, names, float(beta[0]), beta[1:].copy(), mean, sd, float(lam), it, True, trace)
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)


def fit_variant(records, labels, variant, lam=1e-3) -> LogisticModel:
    """Fit a named variant from a list of record mappings."""
    x = np.vstack([build_features(r, variant) for r in records])
    return fit_logistic(x, labels, lam=lam, names=feature_names(variant), variant=variant)


def predict_logistic(model: LogisticModel, features) -> np.ndarray:
    return model.predict_proba(features)
