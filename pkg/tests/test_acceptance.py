"""Acceptance criteria. Each test records one PASS/FAIL line (see conftest)."""
import csv
import time

import numpy as np
import pytest
from scipy.stats import binom

from octhybrid.bundle import Bundle
from octhybrid.cli import main
from octhybrid.commands import load_grids
from octhybrid.evaluation import auc, bootstrap_auc_diff_p, delong_test, roc_curve
from octhybrid.hybrid import HybridModel, ModelConfig, gradient_check
from octhybrid.maps import (
    REFLECTANCE_DB,
    THICKNESS_UM,
    PolarMap,
    TrajectoryModel,
    apply_annulus,
    azimuthal_filter,
    default_dense_radii,
    grid_average,
    to_superpixels,
)
from octhybrid.workflow import MODEL_ARMS

from test_evaluation import pair_auc

SEED = 0
PIPELINE_BUDGET_S = 600  # criterion 5 runtime limit


def _random_map(rng, n_angles=None, masked=True):
    radii = default_dense_radii()
    n_angles = n_angles or int(rng.choice([64, 128, 256]))
    th = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    k = rng.integers(1, 6)
    vals = rng.normal(-8, 2, (len(radii), n_angles))
    vals += rng.uniform(0, 3) * np.cos(th + rng.uniform(0, 6.3))[None, :]
    vals += rng.uniform(0, 2) * np.cos(k * th)[None, :]
    if not masked:
        return PolarMap(vals, radii, REFLECTANCE_DB)
    valid = rng.random(vals.shape) > rng.uniform(0, 0.1)
    return PolarMap(np.where(valid, vals, np.nan), radii, REFLECTANCE_DB, valid)


# ---------------------------------------------------------------- 1


def test_criterion_1_filter_spectral_contract(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_k1 = worst_keep = 0.0
    for _ in range(100):
        m = _random_map(rng, masked=False)
        out = azimuthal_filter(m)
        a = np.fft.fft(m.values, axis=1)
        b = np.fft.fft(out.values, axis=1)
        rms = np.sqrt(np.mean(out.values ** 2, axis=1))
        worst_k1 = max(worst_k1, float(np.max(np.maximum(abs(b[:, 1]), abs(b[:, -1])) / rms)))
        keep = np.ones(m.n_angles, bool)
        keep[[1, -1]] = False
        # relative to the coefficient, floored at the row RMS for near-zero bins
        scale = np.maximum(np.abs(a[:, keep]), rms[:, None])
        worst_keep = max(worst_keep, float(np.max(np.abs(b[:, keep] - a[:, keep]) / scale)))
    dt = time.perf_counter() - t0
    ok = worst_k1 <= 1e-10 and worst_keep <= 1e-10 and dt < 5
    line = verdict(1, ok, f"max |k=1|/rms {worst_k1:.2e}, max rel change elsewhere {worst_keep:.2e}, {dt:.2f}s")
    assert ok, line


# ---------------------------------------------------------------- 2


def test_criterion_2_gradient_check(verdict):
    t0 = time.perf_counter()
    errs = []
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        model = HybridModel.initialize(ModelConfig(cnn_channels_in=2), seed=seed)
        err, _ = gradient_check(model, rng.normal(size=(2, 32, 32)), rng.normal(size=10), seed % 2)
        errs.append(err)
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-5 and dt < 60
    line = verdict(2, ok, f"max rel error {max(errs):.2e} over seeds 0-2 ({ModelConfig().n_params()} params), {dt:.1f}s")
    assert ok, line


# ---------------------------------------------------------------- 3


def test_criterion_3_auc_oracle(verdict):
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    auc_gap = trap_gap = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        scores = np.round(rng.normal(size=n) + labels, int(rng.integers(0, 3)))
        a = auc(scores, labels)
        auc_gap = max(auc_gap, abs(a - pair_auc(scores, labels)))
        trap_gap = max(trap_gap, abs(roc_curve(scores, labels).trapezoid_area() - a))
    dt = time.perf_counter() - t0
    ok = auc_gap <= 1e-12 and trap_gap <= 1e-12 and dt < 5
    line = verdict(3, ok, f"max |auc - oracle| {auc_gap:.1e}, max |trapezoid - auc| {trap_gap:.1e}, {dt:.2f}s")
    assert ok, line


# ---------------------------------------------------------------- 4


def _correlated_case(rng, n=50, shift_a=1.0, shift_b=1.0, rho=0.6):
    labels = np.r_[np.zeros(n), np.ones(n)]
    common = rng.normal(size=2 * n)
    a = shift_a * labels + np.sqrt(rho) * common + np.sqrt(1 - rho) * rng.normal(size=2 * n)
    b = shift_b * labels + np.sqrt(rho) * common + np.sqrt(1 - rho) * rng.normal(size=2 * n)
    return a, b, labels


def test_criterion_4_delong_validity(verdict):
    t0 = time.perf_counter()
    a, b, labels = _correlated_case(np.random.default_rng(104), shift_a=1.2, shift_b=0.8)
    p_delong = delong_test(a, b, labels).p_value
    p_boot = bootstrap_auc_diff_p(a, b, labels, n_boot=10_000, seed=104)
    rng = np.random.default_rng(204)
    rejections = sum(delong_test(*_correlated_case(rng)).p_value < 0.05 for _ in range(1000))
    lo, hi = binom.ppf(0.005, 1000, 0.05), binom.ppf(0.995, 1000, 0.05)
    dt = time.perf_counter() - t0
    ok = abs(p_delong - p_boot) <= 0.02 and lo <= rejections <= hi and dt < 120
    line = verdict(4, ok, f"p DeLong {p_delong:.4f} vs bootstrap {p_boot:.4f}; "
                          f"null rejections {rejections}/1000 (band {lo:.0f}-{hi:.0f}), {dt:.1f}s")
    assert ok, line


# ---------------------------------------------------------------- 7


def test_criterion_7_superpixel_conservation(verdict):
    rng = np.random.default_rng(107)
    t0 = time.perf_counter()
    mean_gap = 0.0
    partition_ok = True
    for _ in range(100):
        m = apply_annulus(_random_map(rng, 256))
        if rng.random() < 0.5:
            m = PolarMap(m.values + 100.0, m.radii, THICKNESS_UM, m.valid)
        traj = TrajectoryModel("arcuate", float(rng.uniform(0, 0.5)))
        g = to_superpixels(m, traj, 32, 32)
        mean_gap = max(mean_gap, abs(grid_average(g) - m.masked_mean()))
        partition_ok &= int(g.counts.sum()) == int(m.valid.sum())
    dt = time.perf_counter() - t0
    ok = mean_gap <= 1e-12 and partition_ok and dt < 5
    line = verdict(7, ok, f"max |grid mean - map mean| {mean_gap:.1e}, partition {'exact' if partition_ok else 'BROKEN'}, {dt:.2f}s")
    assert ok, line


# ---------------------------------------------------------------- 5, 6, 8: the full pipeline


def _pipeline(root):
    """gen, maps, train every arm, eval; default config, single thread."""
    t0 = time.perf_counter()
    common = ["--seed", str(SEED), "--threads", "1"]
    bundle, run = root / "bundle", root / "run"
    assert main(["gen", "--out", str(bundle), *common]) == 0
    assert main(["maps", str(bundle), *common]) == 0
    for arm in MODEL_ARMS:
        assert main(["train", str(bundle), arm, "--out", str(run), *common]) == 0
    assert main(["eval", str(bundle), "--out", str(run), *common]) == 0
    return bundle, run, time.perf_counter() - t0


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    first = _pipeline(tmp_path_factory.mktemp("first"))
    second = _pipeline(tmp_path_factory.mktemp("second"))
    return first, second


def _metrics(run):
    with open(run / "metrics.csv", newline="") as fh:
        return {r["model"]: float(r["auc"]) for r in csv.DictReader(fh)}


@pytest.mark.slow
def test_criterion_5_phantom_ordering(pipeline_runs, verdict):
    (_, run, dt), _ = pipeline_runs
    m = _metrics(run)
    la, lb, h1, h2 = (m[k] for k in MODEL_ARMS)
    ok = h2 >= h1 >= max(la, lb) and h2 >= 0.95 and h2 - la >= 0.02 and dt <= PIPELINE_BUDGET_S
    line = verdict(5, ok, f"test AROC logit-a {la:.4f}, logit-b {lb:.4f}, hybrid-1ch {h1:.4f}, "
                          f"hybrid-2ch {h2:.4f}; 2ch - logit-a {h2 - la:+.4f}; {dt:.0f}s")
    assert ok, line


def _eye_means(values, keys):
    """Mean and standard error over eyes (repeat scans averaged first)."""
    per_eye = {}
    for v, k in zip(values, keys):
        per_eye.setdefault(k, []).append(v)
    eye = np.array([np.mean(v) for v in per_eye.values()])
    return eye.mean(), eye.std(ddof=1) / np.sqrt(len(eye))


@pytest.mark.slow
def test_criterion_6_table1_calibration(pipeline_runs, verdict):
    (bundle_path, _, _), _ = pipeline_runs
    t0 = time.perf_counter()
    bundle = Bundle(bundle_path)
    scans = bundle.scans()
    records = {r["scan_id"]: r for r in bundle.read_records()}
    recs = [records[s["scan_id"]] for s in scans]
    grids = load_grids(bundle, scans)
    rnfl = np.array([grid_average(grids.grid(i, THICKNESS_UM)) for i in range(len(scans))])
    nflr = np.array([grid_average(grids.grid(i, REFLECTANCE_DB)) for i in range(len(scans))])
    keys = np.array([f"{r['subject_id']}-{r['eye']}" for r in recs])
    group = np.array([r["group"] for r in recs])

    def stat(values, g):
        sel = group == g
        return _eye_means(np.asarray(values)[sel], keys[sel])

    rn, rn_se = stat(rnfl, "normal")
    nn_, nn_se = stat(nflr, "normal")
    col = lambda name: [r[name] for r in recs]
    lower = {"rnfl_avg": rnfl, "gcc_sup": col("gcc_sup"), "gcc_inf": col("gcc_inf"),
             "rim_area": col("rim_area"), "nflr_avg": nflr}
    higher = {"vcdr": col("vcdr"), "cd_area_ratio": col("cd_area_ratio"), "gcc_flv": col("gcc_flv"),
              "rnfl_flv": col("rnfl_flv"), "|nflr_flv|": np.abs(col("nflr_flv"))}
    broken = [k for k, v in lower.items() if not stat(v, "pg")[0] < stat(v, "normal")[0]]
    broken += [k for k, v in higher.items() if not stat(v, "pg")[0] > stat(v, "normal")[0]]
    dt = time.perf_counter() - t0
    ok = abs(rn - 99.2) <= rn_se and abs(nn_ + 8.11) <= nn_se and not broken and dt < 120
    line = verdict(6, ok, f"normal RNFLT {rn:.2f} um (SE {rn_se:.2f}), NFLR {nn_:.3f} dB (SE {nn_se:.3f}); "
                          f"PG orderings {'all hold' if not broken else 'violated: ' + ', '.join(broken)}; {dt:.1f}s")
    assert ok, line


@pytest.mark.slow
def test_criterion_8_end_to_end_determinism(pipeline_runs, verdict):
    (_, run1, dt1), (_, run2, dt2) = pipeline_runs
    files = ["metrics.csv"] + [
        str(p.relative_to(run1)) for p in sorted((run1 / "models").rglob("*")) if p.is_file()
    ]
    differ = [f for f in files if (run1 / f).read_bytes() != (run2 / f).read_bytes()]
    ok = not differ and dt1 + dt2 <= 2 * PIPELINE_BUDGET_S
    line = verdict(8, ok, f"{len(files)} files compared, {len(differ)} differ; runs {dt1:.0f}s + {dt2:.0f}s")
    assert ok, line
