"""Acceptance criteria, each at its stated tolerance.

Criteria 5-8 share two runs of ``hubvse compare`` over the standard synthetic
benchmark (clean and with 10% label noise), five seeds each.
"""
import csv
import json
import math
import struct
import time

import numpy as np
import pytest
from click.testing import CliRunner

from hubvse.cli import main
from hubvse.data_io import (BadMagicError, TruncatedPayloadError, VersionMismatchError,
                            read_features, write_features)
from hubvse.evaluation import rank_ground_truth, retrieval_report
from hubvse.experiments import EVAL_SEEDS, STANDARD_SPEC, STANDARD_VARIANTS
from hubvse.gradcheck import GRADCHECK_KINDS, check_loss
from hubvse.losses import (HalLossConfig, TripletLossConfig, hal_loss, max_margin, nca_loss,
                           smooth_max, sum_margin)
from hubvse.memory_bank import GlobalWeightConfig, knn, weights_from_similarities

from . import oracles

NEED = 4  # seeds out of five for the directional criteria


def _compare(out, spec_overrides):
    cfg = out.parent / f"{out.name}.json"
    cfg.write_text(json.dumps({"spec": spec_overrides}))
    t0 = time.perf_counter()
    r = CliRunner().invoke(main, ["compare", "--config", str(cfg), "--out", str(out)],
                           catch_exceptions=False)
    elapsed = time.perf_counter() - t0
    assert r.exit_code == 0, r.output
    with open(out / "compare.csv") as f:
        rows = list(csv.DictReader(f))
    table = {(row["variant"], int(row["seed"])): row for row in rows}
    return table, elapsed, len(rows)


@pytest.fixture(scope="session")
def clean_runs(tmp_path_factory):
    return _compare(tmp_path_factory.mktemp("accept") / "clean", {})


@pytest.fixture(scope="session")
def noisy_runs(tmp_path_factory):
    return _compare(tmp_path_factory.mktemp("accept") / "noisy", {"label_noise_fraction": 0.1})


def _val(table, variant, seed, key):
    return float(table[variant, seed][key])


# 1 -------------------------------------------------------------------------

def test_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    results = [check_loss(kind, seed, n=8, dim=8, h=1e-5, tolerance=1e-5)
               for kind in GRADCHECK_KINDS for seed in range(3)]
    elapsed = time.perf_counter() - t0
    worst = max(r.max_error for r in results)
    ok = all(r.passed for r in results) and elapsed < 60
    criterion(1, "gradient fidelity", ok,
              f"{len(results)} checks, worst rel. err {worst:.2e} <= 1e-5, {elapsed:.1f}s < 60s")
    assert ok


# 2 -------------------------------------------------------------------------

def test_oracle_equivalence(criterion):
    rng = np.random.default_rng(2)
    trials = 100
    worst = {"sum": 0.0, "max": 0.0, "nca": 0.0, "hal": 0.0}
    exact = {"knn": True, "rank": True, "report": True}
    for _ in range(trials):
        n = int(rng.integers(1, 7))
        S = rng.uniform(-1, 1, size=(n, n))
        margin = float(rng.uniform(0, 1))
        W = rng.uniform(0, 1, size=(n, n))
        gamma, eps = float(rng.uniform(1, 100)), float(rng.uniform(0, 1))
        L = S.tolist()
        worst["sum"] = max(worst["sum"], abs(sum_margin(S, TripletLossConfig(margin)).value
                                             - oracles.sum_margin(L, margin)))
        worst["max"] = max(worst["max"], abs(max_margin(S, TripletLossConfig(margin)).value
                                             - oracles.max_margin(L, margin)))
        worst["nca"] = max(worst["nca"], abs(nca_loss(S).value - oracles.nca(L)))
        worst["hal"] = max(worst["hal"], abs(hal_loss(S, W, HalLossConfig(gamma, eps)).value
                                             - oracles.hal(L, W.tolist(), gamma, eps)))

        pts = rng.integers(-2, 3, size=(int(rng.integers(2, 40)), int(rng.integers(1, 6)))) * 1.0
        q = rng.integers(-2, 3, size=pts.shape[1]) * 1.0
        excl = set(rng.choice(len(pts), size=int(rng.integers(0, len(pts) // 2 + 1)),
                              replace=False).tolist())
        k = int(rng.integers(1, len(pts) - len(excl) + 1))
        exact["knn"] &= knn(q, pts, k, excl) == oracles.knn(q.tolist(), pts.tolist(), k, excl)

        n_img, m = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        R = rng.integers(-3, 4, size=(n_img, n_img * m)) / 3.0
        for d in ("i2t", "t2i"):
            ranks = rank_ground_truth(R, d, m).tolist()
            exact["rank"] &= ranks == oracles.ground_truth_ranks(R.tolist(), d, m)
            rep = retrieval_report(ranks, d)
            exact["report"] &= all(getattr(rep, key) == v
                                   for key, v in oracles.report(ranks).items())
    ok = max(worst.values()) <= 1e-12 and all(exact.values())
    criterion(2, "oracle equivalence", ok,
              f"{trials} instances each; max loss |d| {max(worst.values()):.1e} <= 1e-12; "
              f"knn/ranks/reports exact: {all(exact.values())}")
    assert ok


# 3 -------------------------------------------------------------------------

def test_closed_form_spot_checks(criterion):
    errs = []
    for k in (1, 3, 10):
        cfg = GlobalWeightConfig(k=k)
        W = weights_from_similarities(np.full(3, cfg.eps1), np.full((3, k), cfg.eps2),
                                      np.full((3, k), cfg.eps2), cfg)
        off = ~np.eye(3, dtype=bool)
        errs.append(np.abs(np.diag(W) - 2 * k / (2 * k + 1)).max())
        errs.append(np.abs(W[off] - k / (k + 1)).max())
    errs.append(abs(hal_loss(np.array([[1.0]])).value + math.log(2)))
    ok = max(errs) <= 1e-12
    criterion(3, "closed-form spot checks", ok, f"max |d| {max(errs):.1e} <= 1e-12")
    assert ok


# 4 -------------------------------------------------------------------------

def test_smooth_max_sandwich(criterion):
    rng = np.random.default_rng(4)
    violations, checked = 0, 0
    for gamma in (1.0, 30.0, 100.0):
        for _ in range(1000):
            n = int(rng.integers(2, 12))
            S = rng.uniform(-1, 1, size=(n, n))
            W = rng.uniform(0, 1, size=(n, n))
            a = W * (S - 0.3)
            a[np.diag_indices(n)] = -np.inf
            for axis in (0, 1):
                terms = smooth_max(a, gamma, axis=axis)
                lo = np.maximum(0.0, a.max(axis=axis))
                hi = lo + math.log(n) / gamma
                violations += int(((terms < lo) | (terms > hi)).sum())
                checked += n
    ok = violations == 0
    criterion(4, "smooth-max sandwich", ok, f"{checked} terms, {violations} outside the bounds")
    assert ok


# 5 -------------------------------------------------------------------------

def test_directional_ordering(criterion, clean_runs):
    table, elapsed, n_rows = clean_runs
    hits = []
    for s in EVAL_SEEDS:
        r = {v: _val(table, v, s, "rsum") for v in STANDARD_VARIANTS}
        hits.append(r["HAL+MB"] >= r["HAL"] >= max(r["SUM"], r["MAX"]))
    ok = sum(hits) >= NEED and elapsed < 600 and n_rows == 20
    criterion(5, "rsum ordering HAL+MB >= HAL >= max(SUM, MAX)", ok,
              f"{sum(hits)}/5 seeds (need {NEED}), {n_rows} cells in {elapsed:.0f}s < 600s")
    assert ok


# 6 -------------------------------------------------------------------------

def _r1(table, v, s):
    return 0.5 * (_val(table, v, s, "i2t_r_at_1") + _val(table, v, s, "t2i_r_at_1"))


def test_noise_robustness(criterion, clean_runs, noisy_runs):
    clean, noisy = clean_runs[0], noisy_runs[0]
    hits = []
    for s in EVAL_SEEDS:
        drop = {v: _r1(clean, v, s) - _r1(noisy, v, s) for v in ("SUM", "MAX", "HAL")}
        hits.append(drop["MAX"] > drop["HAL"] and drop["MAX"] > drop["SUM"])
    ok = sum(hits) >= NEED
    criterion(6, "R@1 drop under 10% label noise: MAX > HAL and MAX > SUM", ok,
              f"{sum(hits)}/5 seeds (need {NEED})")
    assert ok


# 7 -------------------------------------------------------------------------

def test_convergence_speed(criterion, clean_runs):
    table = clean_runs[0]
    hits = [_val(table, "HAL", s, "epochs_to_95") <= _val(table, "SUM", s, "epochs_to_95")
            for s in EVAL_SEEDS]
    ok = sum(hits) >= NEED
    criterion(7, "epochs to 95% of final val rsum: HAL <= SUM", ok,
              f"{sum(hits)}/5 seeds (need {NEED})")
    assert ok


# 8 -------------------------------------------------------------------------

def test_hubness_mitigation(criterion, clean_runs):
    table = clean_runs[0]
    key = "t2i_skewness_k10"
    hits = [_val(table, "HAL", s, key) < _val(table, "SUM", s, key) for s in EVAL_SEEDS]
    ok = sum(hits) >= NEED
    criterion(8, "t2i k-occurrence skewness (k=10): HAL < SUM", ok,
              f"{sum(hits)}/5 seeds (need {NEED})")
    assert ok


# 9 -------------------------------------------------------------------------

def test_determinism_and_formats(criterion, tmp_path):
    runner = CliRunner()
    spec = {"n_images": 200, "captions_per_image": 5, "d_text": 16, "d_image": 16,
            "latent_dim": 4, "val_images": 100, "test_images": 100}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    (tmp_path / "cfg.json").write_text(json.dumps(
        {**STANDARD_VARIANTS["HAL+MB"].to_dict(), "epochs": 3, "joint_dim": 8}))
    runner.invoke(main, ["generate", "--config", str(tmp_path / "spec.json"),
                         "--out", str(tmp_path / "data")], catch_exceptions=False)
    for name in ("a", "b"):
        r = runner.invoke(main, ["train", "--config", str(tmp_path / "cfg.json"), "--data",
                                 str(tmp_path / "data"), "--out", str(tmp_path / name)],
                          catch_exceptions=False)
        assert r.exit_code == 0, r.output
    same_csv = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                   for f in ("metrics.csv", "curve.csv"))

    m = np.random.default_rng(9).normal(size=(7, 5)).astype(np.float32)
    write_features(tmp_path / "m.embf", m)
    round_trip = read_features(tmp_path / "m.embf").tobytes() == m.tobytes()

    raw = (tmp_path / "m.embf").read_bytes()
    corrupt = {
        BadMagicError: b"XXXX" + raw[4:],
        VersionMismatchError: raw[:4] + struct.pack("<I", 9) + raw[8:],
        TruncatedPayloadError: raw[:-3],
    }
    raised = set()
    for err, blob in corrupt.items():
        (tmp_path / "bad.embf").write_bytes(blob)
        try:
            read_features(tmp_path / "bad.embf")
        except (BadMagicError, VersionMismatchError, TruncatedPayloadError) as e:
            if type(e) is err:
                raised.add(err)
    ok = same_csv and round_trip and len(raised) == 3
    criterion(9, "determinism and formats", ok,
              f"identical CSVs: {same_csv}, bit-exact round trip: {round_trip}, "
              f"distinct errors: {len(raised)}/3")
    assert ok
