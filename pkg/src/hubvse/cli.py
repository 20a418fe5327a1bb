"""``hubvse`` command line.

Every option can also be set through an environment variable named
``HUBVSE_<COMMAND>_<OPTION>``, e.g. ``HUBVSE_TRAIN_SEED=3``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical abort (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import functools
import json
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data_io import (FeatureFileError, SyntheticSpec, generate_synthetic, load_dataset,
                      load_encoder, save_dataset, save_encoder, write_csv, write_json)
from .evaluation import (DIRECTIONS, T2I, dataset_similarity, evaluate_similarity,
                         fold_average, hubness_report)
from .embed import cosine_similarity_matrix
from .experiments import (EVAL_SEEDS, STANDARD_SPEC, STANDARD_VARIANTS, TEST_IMAGES,
                          VAL_IMAGES, BenchmarkData, benchmark_data, run_cell)
from .gradcheck import GRADCHECK_KINDS, check_loss
from .losses import HalDomainError
from .trainer import ConfigError, NumericalAbortError, TrainConfig, train

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

REPORT_HEADER = ["split", "direction", "r_at_1", "r_at_5", "r_at_10", "med_r", "mean_r", "rsum"]
CURVE_HEADER = ["epoch", "train_loss", "rsum", "learning_rate",
                "i2t_r_at_1", "i2t_r_at_5", "i2t_r_at_10", "i2t_med_r", "i2t_mean_r",
                "t2i_r_at_1", "t2i_r_at_5", "t2i_r_at_10", "t2i_med_r", "t2i_mean_r"]
HUBNESS_HEADER = ["source", "k", "direction", "skewness", "max_hub_share", "n_queries", "n_gallery"]
COMPARE_HEADER = ["variant", "seed", "status", "rsum", "best_epoch", "final_val_rsum",
                  "epochs_to_95", "t2i_skewness_k10",
                  "i2t_r_at_1", "i2t_r_at_5", "i2t_r_at_10", "i2t_med_r", "i2t_mean_r",
                  "t2i_r_at_1", "t2i_r_at_5", "t2i_r_at_10", "t2i_med_r", "t2i_mean_r",
                  "error"]
SUMMARY_HEADER = ["variant", "n_ok", "rsum_mean", "rsum_std", "t2i_skewness_k10_mean",
                  "epochs_to_95_mean"]
COMPARE_CURVE_HEADER = ["variant", "seed", "epoch", "train_loss", "rsum"]


def _fail(code, msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def handle_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (NumericalAbortError, HalDomainError) as e:
            _fail(EXIT_NUMERIC, str(e))
        except (FeatureFileError, OSError) as e:
            _fail(EXIT_IO, str(e))
        except (ConfigError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
            _fail(EXIT_CONFIG, str(e))
    return wrapper


def _read_json(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object at top level")
    return obj


def _prepare_out(out, overwrite):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {out} exists and is not empty (use --overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_rows(split, result):
    rows = []
    for rep in (result.i2t, result.t2i):
        rows.append({"split": split, "direction": rep.direction, "r_at_1": rep.r_at_1,
                     "r_at_5": rep.r_at_5, "r_at_10": rep.r_at_10, "med_r": rep.med_r,
                     "mean_r": rep.mean_r, "rsum": result.rsum})
    return rows


def _curve_rows(history):
    return [{k: r[k] for k in CURVE_HEADER} for r in history.as_rows()]


def _load_train_config(path, seed=None, loss=None):
    d = _read_json(path) if path else {}
    if seed is not None:
        d["seed"] = seed
    if loss is not None:
        d["loss_kind"] = loss
    try:
        return TrainConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _splits(data_dir):
    data_dir = Path(data_dir)
    train_ds = load_dataset(data_dir)
    val = load_dataset(data_dir / "val") if (data_dir / "val").is_dir() else None
    test = load_dataset(data_dir / "test") if (data_dir / "test").is_dir() else None
    return train_ds, val, test


@click.group(context_settings={"auto_envvar_prefix": "HUBVSE",
                               "help_option_names": ["-h", "--help"]})
@click.version_option(__version__)
def main():
    """Train and compare cross-modal alignment objectives on feature datasets."""


@main.command()
@click.option("--config", "config", type=click.Path(dir_okay=False),
              help="JSON synthetic spec; defaults to the standard benchmark.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the generator seed.")
@click.option("--overwrite", is_flag=True)
@handle_errors
def generate(config, out, seed, overwrite):
    """Write a synthetic dataset (train split at the root, val/ and test/ below)."""
    d = _read_json(config) if config else asdict(STANDARD_SPEC)
    val_images = int(d.pop("val_images", VAL_IMAGES))
    test_images = int(d.pop("test_images", TEST_IMAGES))
    if seed is not None:
        d["seed"] = seed
    try:
        spec = SyntheticSpec.from_dict(d)
        spec.validate()
    except (KeyError, TypeError) as e:
        raise ConfigError(str(e)) from None
    out = _prepare_out(out, overwrite)
    prov = {"generator": "hubvse.generate_synthetic", "spec": asdict(spec),
            "code_version": __version__}
    written = save_dataset(generate_synthetic(spec, "train"), out, dict(prov, split="train"))
    for split, n in (("val", val_images), ("test", test_images)):
        if n > 0:
            written += save_dataset(generate_synthetic(spec, split, n), out / split,
                                    dict(prov, split=split, n_images=n))
    for p in written:
        click.echo(str(p))


@main.command("train")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--loss", type=click.Choice(["SUM", "MAX", "NCA", "HAL"]), default=None)
@click.option("--overwrite", is_flag=True)
@handle_errors
def train_cmd(config, data, out, seed, loss, overwrite):
    """Train an encoder pair and write model, run manifest and metric CSVs."""
    cfg = _load_train_config(config, seed, loss)
    train_ds, val, test = _splits(data)
    if val is None:
        click.echo("warning: no val/ split found; validating on the training split", err=True)
        val = train_ds
    out = _prepare_out(out, overwrite)
    t0 = time.perf_counter()
    encoder, history = train(train_ds, val, cfg)
    wall = time.perf_counter() - t0

    reports = {"val": evaluate_similarity(dataset_similarity(encoder, val), val.captions_per_image)}
    if test is not None:
        reports["test"] = evaluate_similarity(dataset_similarity(encoder, test),
                                              test.captions_per_image)
    save_encoder(out / "model.npz", encoder, {"config": cfg.to_dict()})
    write_csv(out / "curve.csv", CURVE_HEADER, _curve_rows(history))
    write_csv(out / "metrics.csv", REPORT_HEADER,
              [r for split, res in reports.items() for r in _report_rows(split, res)])
    write_json(out / "manifest.json", {
        "format": "hubvse-run", "version": 1,
        "code_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "data": str(Path(data).resolve()),
        "lr_schedule": "base_lr * 0.1 ** (epoch // lr_update_epoch), epoch 0-based",
        "model_selection": "max validation rsum, ties -> earliest epoch",
        "best_epoch": history.best_epoch,
        "history": history.as_rows(),
        "reports": {split: asdict(res) | {"rsum": res.rsum} for split, res in reports.items()},
        "wall_clock_seconds": wall,
    })
    click.echo(f"best epoch {history.best_epoch}, val rsum {reports['val'].rsum:.2f}"
               + (f", test rsum {reports['test'].rsum:.2f}" if "test" in reports else ""))


@main.command("eval")
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fold-size", type=int, default=None,
              help="Average over consecutive folds of this many images.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@handle_errors
def eval_cmd(model, data, fold_size, out):
    """Retrieval report of a saved model on a dataset directory."""
    encoder = load_encoder(model)
    ds = load_dataset(data)
    S = dataset_similarity(encoder, ds)
    res = (fold_average(S, ds.captions_per_image, fold_size) if fold_size
           else evaluate_similarity(S, ds.captions_per_image))
    rows = _report_rows(Path(data).name or "data", res)
    _emit(out, REPORT_HEADER, rows)


def _emit(out, header, rows):
    if out:
        write_csv(out, header, rows)
    else:
        import csv

        w = csv.DictWriter(sys.stdout, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})


@main.command()
@click.option("--loss", type=click.Choice(GRADCHECK_KINDS + ("all",)), default="all")
@click.option("--seed", type=int, default=7)
@handle_errors
def gradcheck(loss, seed):
    """Finite-difference check of encoder gradients; exit 4 on failure."""
    kinds = GRADCHECK_KINDS if loss == "all" else (loss,)
    click.echo(f"{'loss':8s} {'seed':>4s} {'text_W':>10s} {'image_W':>10s} {'tol':>8s}  status")
    ok = True
    for kind in kinds:
        r = check_loss(kind, seed)
        ok &= r.passed
        click.echo(f"{kind:8s} {seed:4d} {r.text_error:10.2e} {r.image_error:10.2e} "
                   f"{r.tolerance:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    if not ok:
        sys.exit(EXIT_NUMERIC)


@main.command()
@click.option("--model", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Encode with this model; without it raw features are compared.")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--k", "k", type=int, default=10)
@click.option("--direction", type=click.Choice(DIRECTIONS), default=T2I)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@handle_errors
def hubness(model, data, k, direction, out):
    """k-occurrence skewness of a dataset, raw or encoded."""
    ds = load_dataset(data)
    if model:
        S = dataset_similarity(load_encoder(model), ds)
    else:
        if ds.text_features.shape[1] != ds.image_features.shape[1]:
            raise ConfigError("raw hubness needs equal text and image feature widths")
        S = cosine_similarity_matrix(ds.text_features, ds.image_features)
    rep = hubness_report(S, k, direction)
    n_q, n_g = (S.shape[1], S.shape[0]) if direction == T2I else S.shape
    _emit(out, HUBNESS_HEADER, [{
        "source": "model" if model else "raw", "k": k, "direction": direction,
        "skewness": rep.skewness, "max_hub_share": rep.max_hub_share,
        "n_queries": n_q, "n_gallery": n_g}])


def _compare_plan(config):
    """``(variants, spec)`` from a compare config, defaulting to the standard benchmark."""
    if not config:
        return dict(STANDARD_VARIANTS), STANDARD_SPEC
    d = _read_json(config)
    unknown = set(d) - {"base", "variants", "spec"}
    if unknown:
        raise ConfigError(f"unknown compare config keys: {sorted(unknown)}")
    try:
        spec = SyntheticSpec.from_dict({**asdict(STANDARD_SPEC), **d.get("spec", {})})
        spec.validate()
    except (KeyError, TypeError) as e:
        raise ConfigError(f"spec: {e}") from None
    if "variants" not in d:
        return dict(STANDARD_VARIANTS), spec
    if not d["variants"]:
        raise ConfigError("compare config 'variants' must not be empty")
    base = d.get("base", {})
    return {name: TrainConfig.from_dict({**base, **over})
            for name, over in d["variants"].items()}, spec


def _compare_cell(variant, cfg_dict, seed, data_dir, spec_dict):
    cfg = TrainConfig.from_dict(cfg_dict)
    if data_dir is None:
        data = benchmark_data(SyntheticSpec(**spec_dict), seed=seed)
    else:
        train_ds, val, test = _splits(data_dir)
        data = BenchmarkData(train_ds, val or train_ds, test or val or train_ds)
    try:
        cell = run_cell(variant, cfg, data, seed)
    except (NumericalAbortError, HalDomainError) as e:
        return {"variant": variant, "seed": seed, "status": "aborted", "error": str(e)}, []
    curve = [{"variant": variant, "seed": seed, "epoch": r.epoch,
              "train_loss": r.train_loss, "rsum": r.rsum} for r in cell.history.records]
    row = {k: v for k, v in cell.row().items() if k in COMPARE_HEADER}
    return row, curve


@main.command()
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON {'base': {...}, 'variants': {name: {...}}, 'spec': {...}}; "
                   "missing parts default to the standard variants and benchmark.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Dataset directory; omitted -> the standard benchmark regenerated per seed.")
@click.option("--seed", "seeds", type=int, multiple=True, help="Repeatable; default 0..4.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--jobs", type=int, default=1)
@click.option("--overwrite", is_flag=True)
@handle_errors
def compare(config, data, seeds, out, jobs, overwrite):
    """Train every (variant, seed) cell and tabulate test metrics side by side."""
    variants, spec = _compare_plan(config)
    seeds = seeds or EVAL_SEEDS
    out = _prepare_out(out, overwrite)
    cells = [(name, cfg.to_dict(), int(s), data, asdict(spec))
             for name, cfg in variants.items() for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_compare_cell, *zip(*cells)))
    else:
        results = [_compare_cell(*c) for c in cells]

    rows = [r for r, _ in results]
    curves = [c for _, cs in results for c in cs]
    summary = []
    for name in variants:
        ok = [r for r in rows if r["variant"] == name and r["status"] == "ok"]
        rs = np.array([r["rsum"] for r in ok])
        summary.append({
            "variant": name, "n_ok": len(ok),
            "rsum_mean": float(rs.mean()) if len(ok) else "",
            "rsum_std": float(rs.std()) if len(ok) else "",
            "t2i_skewness_k10_mean":
                float(np.mean([r["t2i_skewness_k10"] for r in ok])) if ok else "",
            "epochs_to_95_mean": float(np.mean([r["epochs_to_95"] for r in ok])) if ok else "",
        })
    write_csv(out / "compare.csv", COMPARE_HEADER, rows)
    write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
    write_csv(out / "curves.csv", COMPARE_CURVE_HEADER, curves)
    for s in summary:
        click.echo(f"{s['variant']:8s} n={s['n_ok']} rsum={s['rsum_mean']}")
    if any(r["status"] != "ok" for r in rows):
        sys.exit(EXIT_NUMERIC)


if __name__ == "__main__":  # pragma: no cover
    main()
