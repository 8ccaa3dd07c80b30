"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from mvawe.cli import main
from mvawe.data import SynthConfig, load_corpus, load_dataset, write_synthetic_corpus
from mvawe.evaluation import average_precision, cer, levenshtein, pair_counts
from mvawe.features import filter_edges, mel_filterbank, num_frames
from mvawe.losses import multiview_triplet_pair, single_view_triplet, total_loss
from mvawe.model import init_params
from mvawe.numerics import Tape, backward, gradient_check
from mvawe.sampling import NegativeSampler, epoch_schedule, sample_batch
from mvawe.training import TrainConfig, _TrainingData, batch_loss, train
from oracles import brute_force_ap, dft_filter_energies, edit_distance_matrix, histogram_with_labels

SR = 16000

# Desk-scale stand-in for the initial-model alpha comparison.
TREND_SYNTH = dict(vocab_size=50, samples_per_word=20, oov_fraction=0.1)
TREND_TRAIN = dict(hidden=32, lr=3e-3, epochs=30)
TREND_SEEDS = (0, 1, 2)


def cos_d(p, q):
    dot = sum(a * b for a, b in zip(p, q))
    return 1.0 - dot / (math.sqrt(sum(a * a for a in p)) * math.sqrt(sum(b * b for b in q)))


def val(t):
    return float(t.data)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_1_gradient_check(tmp_path, verdict):
    write_synthetic_corpus(SynthConfig(vocab_size=2, samples_per_word=2, oov_fraction=0.0, word_len_min=2,
                                       word_len_max=3, dur_mean=1.0, dur_std=0.5, seed=0), tmp_path)
    data = _TrainingData(load_dataset(tmp_path, "train"), True)
    batch = sample_batch(data.label_ids, epoch_schedule(len(data.words), 2, 0)[0], 0)
    errors = {}
    start = time.perf_counter()
    for alpha in (0.0, 0.1):
        cfg = TrainConfig.desk(layers=1, hidden=4, batch_size=2, alpha=alpha)
        params = init_params(cfg.model_config(), np.random.default_rng(0))
        # eval mode: no dropout, so the loss is a deterministic function of the parameters
        errors[alpha] = gradient_check(lambda: batch_loss(params, data, batch, cfg)[0],
                                       params.tensors(), step=1e-5)
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-4 and elapsed < 60.0
    detail = ", ".join(f"alpha={a}: max rel err {e:.2e}" for a, e in errors.items())
    assert verdict(1, "gradient check, L=1 H=4 batch 2", ok, f"{detail}; {elapsed:.1f} s")


def test_criterion_2_loss_identities(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        dim = int(rng.integers(2, 12))
        a, b, c, d = rng.normal(size=(4, dim))
        m = float(rng.uniform(0.0, 1.0))
        sv = max(0.0, m + cos_d(a, b) - cos_d(a, c))
        mv = max(0.0, m + cos_d(a, b) - cos_d(a, c)) + max(0.0, m + cos_d(b, a) - cos_d(b, d))
        worst = max(worst, abs(val(single_view_triplet(a, b, c, m)) - sv),
                    abs(val(multiview_triplet_pair(a, b, c, d, m)) - mv))

    exact = True
    for _ in range(200):
        a, b = rng.normal(size=(2, 5))
        m = float(rng.uniform(0.0, 1.0))
        exact &= val(single_view_triplet(a, b, b, m)) == m
        exact &= val(multiview_triplet_pair(a, b, b, a, m)) == 2 * m
        # negative opposite the anchor, positive identical: d+ = 0, d- = 2
        exact &= val(single_view_triplet(a, a, -a, m)) == 0.0
        exact &= val(multiview_triplet_pair(a, a, -a, -a, m)) == 0.0
        trip, dec = rng.uniform(0, 5), rng.uniform(0, 50)
        exact &= val(total_loss(trip, dec, 0.0)) == trip
    ok = worst < 1e-12 and exact
    assert verdict(2, "loss identities", ok, f"max |diff| {worst:.1e} over 1000 cases; margin cases exact={exact}")


def test_criterion_3_ap_oracle_and_pair_counts(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 201))
        # coarse integer scores guarantee ties; some sets use fine scores with a few duplicates
        if rng.random() < 0.5:
            scores = rng.integers(0, max(2, n // 4), size=n).astype(float)
        else:
            scores = rng.normal(size=n)
            dup = rng.integers(0, n, size=n // 5)
            scores[dup] = scores[rng.integers(0, n, size=dup.size)]
        labels = rng.random(n) < rng.uniform(0.05, 0.6)
        labels[rng.integers(n)] = True
        worst = max(worst, abs(average_precision(scores, labels) - brute_force_ap(scores, labels)))
    counts = histogram_with_labels(9194, 1728, 341_932)
    matched, unmatched = pair_counts(np.repeat(np.arange(len(counts)), counts).tolist())
    pairs_ok = (matched, unmatched, matched + unmatched) == (341_932, 41_918_289, 42_260_221)
    ok = worst <= 1e-12 and pairs_ok
    assert verdict(3, "AP oracle and pair counts", ok,
                   f"max |AP - oracle| {worst:.1e} over 10000 sets; pairs {matched} + {unmatched}")


@pytest.fixture(scope="module")
def trend_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("trend")
    write_synthetic_corpus(SynthConfig(**TREND_SYNTH), root)
    corpus = load_corpus(root)
    runs = {}
    start = time.perf_counter()
    for seed in TREND_SEEDS:
        for alpha in (0.0, 0.1):
            cfg = TrainConfig.desk(alpha=alpha, seed=seed, **TREND_TRAIN)
            _, report = train(corpus["train"], corpus["dev"], cfg)
            runs[seed, alpha] = report.best
    return runs, time.perf_counter() - start


def test_criterion_4_alpha_trend(trend_runs, verdict):
    runs, elapsed = trend_runs
    gaps = [runs[s, 0.1].dev_acoustic_ap - runs[s, 0.0].dev_acoustic_ap for s in TREND_SEEDS]
    wins = sum(g > 0 for g in gaps)
    ok = wins == len(TREND_SEEDS) and np.mean(gaps) > 0.01 and elapsed < 30 * 60
    table = "; ".join(f"seed {s}: {runs[s, 0.0].dev_acoustic_ap:.4f} -> {runs[s, 0.1].dev_acoustic_ap:.4f}"
                      for s in TREND_SEEDS)
    assert verdict(4, "alpha=0.1 beats alpha=0 on dev AP", ok,
                   f"{table}; mean gap {np.mean(gaps):+.4f}; {elapsed / 60:.1f} min")


def test_criterion_5_cross_view_at_least_acoustic(trend_runs, verdict):
    runs, _ = trend_runs
    pairs = [(runs[s, 0.1].dev_cross_ap, runs[s, 0.1].dev_acoustic_ap) for s in TREND_SEEDS]
    wins = sum(c >= a for c, a in pairs)
    ok = wins >= 2
    table = "; ".join(f"seed {s}: cross {c:.4f} vs acoustic {a:.4f}" for s, (c, a) in zip(TREND_SEEDS, pairs))
    assert verdict(5, "cross-view AP >= acoustic AP (alpha=0.1)", ok, f"{table}; {wins}/3 seeds")


def test_criterion_6_cer_oracle(verdict):
    rng = np.random.default_rng(0)
    letters = np.array(list("abcde"))
    mismatches = 0
    for _ in range(10_000):
        hyp = "".join(rng.choice(letters, size=int(rng.integers(0, 10))))
        ref = "".join(rng.choice(letters, size=int(rng.integers(1, 10))))
        dist = edit_distance_matrix(hyp, ref)
        mismatches += levenshtein(hyp, ref) != dist or cer(hyp, ref) != dist / len(ref)
    example = cer("hell", "held")
    ok = mismatches == 0 and example == 0.25
    assert verdict(6, "CER oracle", ok, f"{mismatches} mismatches in 10000 pairs; cer(hell, held) = {example}")


def test_criterion_7_determinism(tmp_path, verdict):
    synth = tmp_path / "synth.json"
    synth.write_text('{"vocab_size": 6, "samples_per_word": 4, "oov_fraction": 0.2, "seed": 4}')
    for name in ("c1", "c2"):
        assert main(["gen-data", "--config", str(synth), "--out", str(tmp_path / name)]) == 0
    corpus_same = tree_digest(tmp_path / "c1") == tree_digest(tmp_path / "c2")
    tiny = ["--set", "layers=1", "--set", "hidden=6", "--set", "epochs=2", "--set", "batch_size=8"]
    for name in ("r1", "r2"):
        assert main(["train", "--data", str(tmp_path / "c1"), "--seed", "7",
                     "--out", str(tmp_path / name)] + tiny) == 0
    files = ("best.ckpt", "report.json")
    runs_same = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes() for f in files)
    ok = corpus_same and runs_same
    assert verdict(7, "determinism of gen-data and train", ok,
                   f"corpus identical={corpus_same}; checkpoint and report identical={runs_same}")


def test_criterion_8_zero_decoder_gradient_at_alpha_zero(tmp_path, verdict):
    write_synthetic_corpus(SynthConfig(vocab_size=10, samples_per_word=4, oov_fraction=0.0, seed=2), tmp_path)
    cfg = TrainConfig.desk(layers=2, hidden=8, batch_size=8, alpha=0.0)
    data = _TrainingData(load_dataset(tmp_path, "train"), cfg.eos_enabled)
    sampler = NegativeSampler(data.label_ids)
    rng = np.random.default_rng(0)
    params = init_params(cfg.model_config(), rng)
    worst = 0.0
    for _ in range(100):
        positions = rng.choice(len(data.words), size=cfg.batch_size, replace=False)
        batch = sample_batch(data.label_ids, positions, rng, sampler)
        with Tape() as tape:
            loss = batch_loss(params, data, batch, cfg, rng)[0]
        grads = backward(tape, loss, params.tensors())
        worst = max(worst, max(float(np.abs(grads[t]).max()) for t in params.decoder_tensors()))
    ok = worst == 0.0
    assert verdict(8, "alpha=0 leaves decoder and projection gradients at zero", ok,
                   f"max |grad| {worst} over 100 batches")


def test_criterion_9_feature_pipeline(verdict):
    t = np.arange(SR // 4) / SR
    centers = filter_edges(SR)[:, 1]
    window = np.hamming(400)
    peaks_ok = True
    for k, f in enumerate(centers):
        tone = np.sin(2 * np.pi * f * t)
        peaks_ok &= bool(np.all(np.argmax(mel_filterbank(tone, SR).frames, axis=1) == k))
        peaks_ok &= int(np.argmax(dft_filter_energies(tone[:400] * window, SR, 512, 40))) == k
    lengths = (400, 401, 559, 560, 16000)
    expected = tuple(1 + (n - 400) // 160 for n in lengths)
    got = tuple(mel_filterbank(np.ones(n), SR).frames.shape[0] for n in lengths)
    counted = tuple(num_frames(n, SR) for n in lengths)
    ok = peaks_ok and got == expected == counted
    assert verdict(9, "feature pipeline", ok,
                   f"sine peaks in own filter for all 40={peaks_ok}; frames {got} vs formula {expected}")
