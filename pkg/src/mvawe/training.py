"""Joint training of both encoders and the shared decoder."""

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from mvawe import losses
from mvawe.errors import ConfigurationError, MvaweError, NumericalError, UsageError
from mvawe.evaluation import acoustic_discrimination_from_embeddings, cross_view_from_embeddings
from mvawe.features import one_hot_encode
from mvawe.model import (ModelConfig, decode_batch, embed_segments, embed_words,
                         encode_acoustic_batch, encode_text_batch, init_params, save_model,
                         target_matrix)
from mvawe.numerics import tensor as T
from mvawe.numerics.adam import AdamState, adam_update
from mvawe.sampling import NegativeSampler, epoch_schedule, sample_batch

log = logging.getLogger(__name__)

MAX_DEV_PAIRS = 2_000_000


@dataclass
class TrainConfig:
    layers: int = 3
    hidden: int = 512
    margin: float = 0.5
    alpha: float = 0.1
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.4
    epochs: int = 150
    seed: int = 0
    eos_enabled: bool = True
    teacher_forcing: bool = False
    proj_dim: int = 128
    max_dev_pairs: int = MAX_DEV_PAIRS

    @classmethod
    def desk(cls, **overrides):
        """Small preset that trains in minutes on one CPU core."""
        base = dict(layers=2, hidden=64, batch_size=32, lr=1e-3, epochs=30)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self):
        if self.layers < 1 or self.hidden < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("layers, hidden, batch_size and epochs must be >= 1")
        self.loss_config().validate()
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("invalid Adam hyperparameters")
        self.model_config().validate()
        return self

    def model_config(self):
        return ModelConfig(layers=self.layers, hidden=self.hidden, proj_dim=self.proj_dim,
                           dropout=self.dropout, eos_enabled=self.eos_enabled,
                           teacher_forcing=self.teacher_forcing)

    def loss_config(self):
        return losses.LossConfig(self.margin, self.alpha, self.batch_size)

    def seeds(self):
        """Independent streams: (init, dropout, sampling)."""
        return np.random.SeedSequence(self.seed).spawn(3)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_triplet: float
    train_decoding: float
    dev_acoustic_ap: float
    dev_cross_ap: float


@dataclass
class TrainReport:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    wall_time: list = field(default_factory=list)  # seconds per epoch; not in to_json()

    @property
    def best(self):
        return self.epochs[self.best_epoch] if self.best_epoch >= 0 else None

    def to_json(self):
        return {"config": self.config, "best_epoch": self.best_epoch,
                "epochs": [asdict(e) for e in self.epochs]}

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")
        with open(out_dir / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f.name for f in fields(EpochRecord)])
            for e in self.epochs:
                w.writerow([getattr(e, f.name) for f in fields(EpochRecord)])
        with open(out_dir / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "wall_time_s"])
            for k, t in enumerate(self.wall_time):
                w.writerow([k, f"{t:.3f}"])


class _TrainingData:
    """Segments, one-hot labels and decoder targets of a split, prepared once."""

    def __init__(self, dataset, eos_enabled):
        self.segments = [s.frames for s in dataset.segments()]
        self.words = dataset.words
        self.label_ids = dataset.label_ids
        cache = {w: one_hot_encode(w) for w in sorted(set(self.words))}
        self.labels = [cache[w] for w in self.words]
        self.targets = {w: target_matrix(lab, eos_enabled) for w, lab in cache.items()}


def batch_targets(words, targets):
    mats = [targets[w] for w in words]
    Y = max(m.shape[0] for m in mats)
    K = mats[0].shape[1]
    out = np.zeros((len(mats), Y, K))
    mask = np.zeros((len(mats), Y))
    for b, m in enumerate(mats):
        out[b, :m.shape[0]] = m
        mask[b, :m.shape[0]] = 1.0
    return out, mask


def batch_loss(params, data, batch, cfg, dropout_rng=None):
    """Total loss on a triplet batch, plus its triplet and decoding parts.

    ``dropout_rng`` None means deterministic (eval-mode) forward passes.
    """
    mode = "train" if dropout_rng is not None else "eval"
    N = len(batch)
    seg_idx = np.concatenate([batch.positives, batch.negative_segs])
    lab_idx = np.concatenate([batch.positives, batch.negative_labels])
    f = encode_acoustic_batch([data.segments[i] for i in seg_idx], params, mode, dropout_rng)
    g = encode_text_batch([data.labels[i] for i in lab_idx], params, mode, dropout_rng)
    f_pos, f_neg = f.embedding[:N], f.embedding[N:]
    g_pos, g_neg = g.embedding[:N], g.embedding[N:]
    triplet = losses.batch_triplet_loss(f_pos, g_pos, g_neg, f_neg, cfg.margin)

    targets, mask = batch_targets([data.words[i] for i in batch.positives], data.targets)
    emb = T.concat([f_pos, g_pos], axis=0)
    states = [T.concat([fs[:N], gs[:N]], axis=0) for fs, gs in zip(f.final_states, g.final_states)]
    teacher = np.concatenate([targets, targets]) if cfg.teacher_forcing else None
    probs = decode_batch(emb, states, targets.shape[1], params, dropout_rng, teacher)
    decoding = losses.decoding_loss(probs[:N], probs[N:], targets, mask)
    return losses.total_loss(triplet, decoding, cfg.alpha), triplet, decoding


def evaluate_split(params, dataset, max_pairs=MAX_DEV_PAIRS, seed=0, workers=1):
    """Dev-style acoustic and cross-view APs (eval mode)."""
    segs = dataset.segments()
    words = dataset.words
    emb = embed_segments(segs, params, workers=workers)
    acoustic = acoustic_discrimination_from_embeddings(
        emb, words, max_pairs=max_pairs, rng=np.random.default_rng(seed))
    vocab = sorted(set(words))
    cross = cross_view_from_embeddings(emb, words, embed_words(vocab, params, workers=workers), vocab)
    return acoustic["ap"], cross["ap"]


def train(train_set, dev_set, config, out_dir=None, progress=None, workers=1):
    """Train for ``config.epochs`` epochs and keep the parameters with the best dev acoustic AP.

    Returns ``(best_params, report)``. With ``out_dir`` the best checkpoint,
    ``report.json``, ``curves.csv`` and ``timing.csv`` are written there.
    """
    config.validate()
    if len(set(train_set.words)) < 2:
        raise ConfigurationError("training set needs at least two distinct labels")
    if len(dev_set) == 0:
        raise ConfigurationError("development set is empty")
    init_ss, drop_ss, samp_ss = config.seeds()
    params = init_params(config.model_config(), np.random.default_rng(init_ss))
    dropout_rng = np.random.default_rng(drop_ss)
    samp_entropy = samp_ss.generate_state(2)
    tensors = params.tensors()
    adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    data = _TrainingData(train_set, config.eos_enabled)
    sampler = NegativeSampler(data.label_ids)
    report = TrainReport(config=asdict(config))
    best_params, best_ap = None, -math.inf

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        schedule = epoch_schedule(len(data.segments), config.batch_size,
                                  np.random.default_rng([*samp_entropy, epoch]))
        sums = np.zeros(3)
        for b, positions in enumerate(schedule):
            batch = sample_batch(data.label_ids, positions,
                                 np.random.default_rng([*samp_entropy, epoch, b + 1]), sampler)
            parts = None
            try:
                with T.Tape() as tape:
                    total, trip, dec = batch_loss(params, data, batch, config, dropout_rng)
                    parts = (float(total.data), float(trip.data), float(dec.data))
                grads = T.backward(tape, total, tensors)
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise NumericalError("non-finite gradient")
            except NumericalError as exc:
                diag = {"epoch": epoch, "batch": b,
                        "positive_ids": [data.words[i] for i in batch.positives],
                        "loss_components": parts}
                raise NumericalError(f"training diverged at epoch {epoch}, batch {b}: {exc}", diag) from exc
            adam_update(tensors, grads, adam)
            sums += parts
        n = len(data.segments)
        dev_ap, dev_cross = evaluate_split(params, dev_set, config.max_dev_pairs, seed=config.seed,
                                         workers=workers)
        rec = EpochRecord(epoch, sums[0] / n, sums[1] / n, sums[2] / n, dev_ap, dev_cross)
        report.epochs.append(rec)
        report.wall_time.append(time.perf_counter() - t0)
        if dev_ap > best_ap:
            best_ap, best_params = dev_ap, params.copy()
            report.best_epoch = epoch
        log.info("epoch %d loss %.4f (triplet %.4f, decoding %.4f) dev AP %.4f cross %.4f",
                 epoch, rec.train_loss, rec.train_triplet, rec.train_decoding, dev_ap, dev_cross)
        if progress is not None:
            progress(rec)

    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write(out_dir)
        save_model(out_dir / "best.ckpt", best_params)
    return best_params, report


# -- hyperparameter search ------------------------------------------------------

SWEEP_ORDER = ("layers", "hidden", "margin", "batch_size", "alpha")


def sweep(grid, base_config, train_set, dev_set, mode="coordinate", progress=None, workers=1):
    """Coarse search over ``grid`` (name -> list of values).

    ``coordinate`` mode varies one hyperparameter at a time in the fixed
    order layers, hidden, margin, batch_size, alpha, fixing each to its best
    value before moving on; ``cartesian`` runs the full product. Failed runs
    are recorded and skipped. Rows are returned sorted by dev AP, best first.
    """
    grid = {k: list(v) for k, v in grid.items() if k != "mode"}
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise UsageError("sweep grid is empty")
    unknown = set(grid) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ConfigurationError(f"unknown grid keys: {sorted(unknown)}")

    cache = {}

    def run(cfg):
        key = json.dumps(asdict(cfg), sort_keys=True)
        if key not in cache:
            row = {name: getattr(cfg, name) for name in grid}
            try:
                _, report = train(train_set, dev_set, cfg, workers=workers)
                row.update(dev_ap=report.best.dev_acoustic_ap, dev_cross_ap=report.best.dev_cross_ap,
                           best_epoch=report.best_epoch, error=None)
            except MvaweError as exc:
                row.update(dev_ap=None, dev_cross_ap=None, best_epoch=None, error=str(exc))
            cache[key] = row
            if progress is not None:
                progress(row)
        return cache[key]

    if mode == "cartesian":
        names = list(grid)
        for values in itertools.product(*(grid[n] for n in names)):
            run(replace(base_config, **dict(zip(names, values))))
    elif mode == "coordinate":
        current = base_config
        names = [n for n in SWEEP_ORDER if n in grid] + [n for n in grid if n not in SWEEP_ORDER]
        for name in names:
            best_val, best_ap = None, -math.inf
            for value in grid[name]:
                row = run(replace(current, **{name: value}))
                if row["dev_ap"] is not None and row["dev_ap"] > best_ap:
                    best_val, best_ap = value, row["dev_ap"]
            if best_val is not None:
                current = replace(current, **{name: best_val})
    else:
        raise UsageError(f"unknown sweep mode {mode!r}")
    rows = list(cache.values())
    rows.sort(key=lambda r: -math.inf if r["dev_ap"] is None else r["dev_ap"], reverse=True)
    return rows
