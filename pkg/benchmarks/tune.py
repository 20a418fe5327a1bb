"""Per-loss hyperparameter selection on the tuning seed.

Every grid point is trained on the standard synthetic benchmark drawn with
``TUNING_SEED`` (disjoint from the evaluation seeds) and scored by the best
validation rsum. Prints the grid and the winner of each variant; the winners
are frozen into ``hubvse.experiments.STANDARD_VARIANTS``.

    python benchmarks/tune.py [--out tune.csv]
"""
import argparse
import itertools
import json
from dataclasses import replace

from hubvse.data_io import write_csv
from hubvse.experiments import STANDARD_VARIANTS, TUNING_SEED, benchmark_data
from hubvse.losses import HalLossConfig, TripletLossConfig
from hubvse.memory_bank import GlobalWeightConfig
from hubvse.trainer import train

LRS = (0.001, 0.003, 0.01, 0.03)
MARGINS = (0.05, 0.1, 0.2, 0.4)
GAMMAS = (10.0, 30.0, 60.0, 100.0)
EPSILONS = (0.3, 0.5, 0.7, 1.0)
BANK_K = (5, 10, 20)


def grid():
    for lr, m in itertools.product(LRS, MARGINS):
        for kind in ("SUM", "MAX"):
            yield kind, replace(STANDARD_VARIANTS[kind], learning_rate=lr,
                                triplet_cfg=TripletLossConfig(m))
    for lr, g, e in itertools.product(LRS, GAMMAS, EPSILONS):
        yield "HAL", replace(STANDARD_VARIANTS["HAL"], learning_rate=lr,
                             hal_cfg=HalLossConfig(g, e))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    data = benchmark_data(seed=TUNING_SEED)
    rows, best = [], {}

    def score(kind, cfg):
        _, hist = train(data.train, data.val, replace(cfg, seed=TUNING_SEED))
        val = max(hist.rsums)
        rows.append({"variant": kind, "config": json.dumps(cfg.to_dict(), sort_keys=True),
                     "val_rsum": val})
        print(f"{kind:7s} {val:7.2f} lr={cfg.learning_rate} "
              f"{cfg.triplet_cfg or ''}{cfg.hal_cfg or ''}{cfg.global_cfg or ''}", flush=True)
        if kind not in best or val > best[kind][0]:
            best[kind] = (val, cfg)

    for kind, cfg in grid():
        score(kind, cfg)
    # the bank variant inherits the selected HAL setting and tunes only k
    hal = best["HAL"][1]
    for k in BANK_K:
        score("HAL+MB", replace(hal, use_memory_bank=True, global_cfg=GlobalWeightConfig(k=k)))

    if args.out:
        write_csv(args.out, ["variant", "config", "val_rsum"], rows)
    print("\nselected:")
    for kind, (val, cfg) in best.items():
        print(f"  {kind:7s} {val:7.2f} {json.dumps(cfg.to_dict(), sort_keys=True)}")


if __name__ == "__main__":
    main()
