"""Mini-batch training of an :class:`EncoderPair` under any of the objectives."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import losses
from .embed import EncoderPair, backward_cached, forward
from .evaluation import EvalResult, evaluate_encoder
from .losses import HalLossConfig, TripletLossConfig
from .memory_bank import GlobalWeightConfig, global_weights, sample_bank
from .optim import make_optimizer

log = logging.getLogger(__name__)

LOSS_KINDS = ("SUM", "MAX", "NCA", "HAL")


class ConfigError(ValueError):
    pass


class NumericalAbortError(RuntimeError):
    def __init__(self, msg, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        where = f" (epoch {epoch}, step {step})" if epoch is not None else ""
        super().__init__(msg + where)


_NESTED = {
    "triplet_cfg": TripletLossConfig,
    "hal_cfg": HalLossConfig,
    "global_cfg": GlobalWeightConfig,
}


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "HAL"
    use_memory_bank: bool = False
    batch_size: int = 128
    epochs: int = 15
    learning_rate: float = 0.001
    lr_update_epoch: int = 10
    seed: int = 0
    joint_dim: int = 32
    optimizer: str = "adam"
    triplet_cfg: TripletLossConfig = None
    hal_cfg: HalLossConfig = None
    global_cfg: GlobalWeightConfig = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.lr_update_epoch < 1:
            raise ConfigError("lr_update_epoch must be >= 1")
        if self.joint_dim < 1:
            raise ConfigError("joint_dim must be >= 1")
        if self.loss_kind in ("SUM", "MAX") and self.triplet_cfg is None:
            raise ConfigError(f"{self.loss_kind} requires triplet_cfg")
        if self.loss_kind == "HAL" and self.hal_cfg is None:
            raise ConfigError("HAL requires hal_cfg")
        if self.use_memory_bank:
            if self.loss_kind != "HAL":
                raise ConfigError("the memory bank only applies to HAL")
            if self.global_cfg is None:
                raise ConfigError("use_memory_bank requires global_cfg")

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key, typ in _NESTED.items():
            if isinstance(kw.get(key), dict):
                sub = kw[key]
                sub_known = {f.name for f in fields(typ)}
                bad = set(sub) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                try:
                    kw[key] = typ(**sub)
                except ValueError as e:
                    raise ConfigError(f"{key}: {e}") from None
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Batch:
    text: np.ndarray
    image: np.ndarray
    pair_ids: np.ndarray

    def __len__(self):
        return len(self.pair_ids)


def make_batch(dataset, pair_ids) -> Batch:
    ids = np.asarray(pair_ids, dtype=np.int64)
    return Batch(dataset.text_features[ids], dataset.image_features[dataset.pair_index[ids]], ids)


@dataclass
class EpochRecord:
    epoch: int  # 1-based count of completed epochs
    train_loss: float
    rsum: float
    val: EvalResult
    learning_rate: float
    wall_clock: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def rsums(self):
        return [r.rsum for r in self.records]

    def as_rows(self):
        rows = []
        for r in self.records:
            row = {"epoch": r.epoch, "train_loss": r.train_loss, "rsum": r.rsum,
                   "learning_rate": r.learning_rate, "wall_clock": r.wall_clock}
            for rep in (r.val.i2t, r.val.t2i):
                for name in ("r_at_1", "r_at_5", "r_at_10", "med_r", "mean_r"):
                    row[f"{rep.direction}_{name}"] = getattr(rep, name)
            rows.append(row)
        return rows


def lr_schedule(base_lr, epoch, lr_update_epoch):
    """Step decay: ``base_lr * 0.1 ** (epoch // lr_update_epoch)`` with 0-based ``epoch``."""
    return base_lr * 0.1 ** (epoch // lr_update_epoch)


def batch_objective(encoder: EncoderPair, batch: Batch, cfg: TrainConfig, bank=None):
    """Forward pass and loss for one batch; returns ``(LossResult, cache)``."""
    S, cache = forward(encoder, batch.text, batch.image)
    kind = cfg.loss_kind
    if kind == "SUM":
        res = losses.sum_margin(S, cfg.triplet_cfg)
    elif kind == "MAX":
        res = losses.max_margin(S, cfg.triplet_cfg)
    elif kind == "NCA":
        res = losses.nca_loss(S)
    else:
        W = None
        if bank is not None:
            W = global_weights(cache["t_hat"], cache["i_hat"], batch.pair_ids, bank, cfg.global_cfg)
        res = losses.hal_loss(S, W, cfg.hal_cfg)
    if cache["t_deg"].any() or cache["i_deg"].any():
        log.warning("degenerate encodings in batch: %d text, %d image rows",
                    cache["t_deg"].sum(), cache["i_deg"].sum())
    return res, cache


def step(encoder: EncoderPair, batch: Batch, cfg: TrainConfig, optimizer, lr, bank=None):
    """One optimiser step. Returns the updated encoder and the pre-update loss."""
    if len(batch) < 2:
        raise ValueError("a batch needs at least two pairs")
    try:
        res, cache = batch_objective(encoder, batch, cfg, bank)
    except losses.HalDomainError as e:
        raise NumericalAbortError(str(e)) from None
    tape = backward_cached(cache, res.grad, res.value)
    if not (np.isfinite(res.value) and np.isfinite(tape.text_weights).all()
            and np.isfinite(tape.image_weights).all()):
        raise NumericalAbortError(f"non-finite loss or gradient (loss={res.value})")
    new = optimizer.update(
        {"text": encoder.text_weights, "image": encoder.image_weights},
        {"text": tape.text_weights, "image": tape.image_weights},
        lr,
    )
    return EncoderPair(new["text"], new["image"]), res.value


def train(dataset, val_dataset, cfg: TrainConfig, initial: EncoderPair = None,
          on_epoch=None):
    """Train for ``cfg.epochs`` epochs; keep the snapshot with the best validation rsum.

    Ties in validation rsum keep the earliest epoch. ``on_epoch`` is called
    with each :class:`EpochRecord` as it completes.
    """
    init_ss, shuffle_ss, bank_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if initial is None:
        initial = EncoderPair.xavier(cfg.joint_dim, dataset.text_features.shape[1],
                                     dataset.image_features.shape[1],
                                     np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    bank_seeds = bank_ss.generate_state(cfg.epochs)
    optimizer = make_optimizer(cfg.optimizer)
    n_steps = dataset.n_pairs // cfg.batch_size
    if n_steps < 1:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds the {dataset.n_pairs} training pairs")

    encoder = initial
    best, best_rsum = initial, -np.inf
    history = TrainHistory()
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.learning_rate, epoch, cfg.lr_update_epoch)
        bank = None
        if cfg.use_memory_bank:
            bank = sample_bank(dataset, encoder, cfg.global_cfg, int(bank_seeds[epoch]))
        order = shuffle_rng.permutation(dataset.n_pairs)
        total = 0.0
        for s in range(n_steps):
            batch = make_batch(dataset, order[s * cfg.batch_size:(s + 1) * cfg.batch_size])
            try:
                encoder, loss = step(encoder, batch, cfg, optimizer, lr, bank)
            except NumericalAbortError as e:
                raise NumericalAbortError(str(e), epoch + 1, s + 1) from None
            total += loss
        val = evaluate_encoder(encoder, val_dataset)
        rec = EpochRecord(epoch + 1, total / n_steps, val.rsum, val, lr,
                          time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.5f rsum %.2f", rec.epoch, rec.train_loss, rec.rsum)
        if rec.rsum > best_rsum:
            best, best_rsum = encoder, rec.rsum
            history.best_epoch = rec.epoch
        if on_epoch is not None:
            on_epoch(rec)
    return best, history
