"""Word discrimination AP and word-level recognition CER."""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from mvawe.errors import UsageError
from mvawe.model import embed_segments, embed_words, recognize_segments


@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float


def _grouped(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if s.shape != y.shape:
        raise UsageError("scores and labels differ in length")
    if not np.isfinite(s).all():
        raise UsageError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UsageError("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    return s[ends], tp, predicted, n_pos


def average_precision(scores, labels):
    """Area under the precision-recall curve (larger score = more similar).

    Tied scores form a single threshold: precision is evaluated after the
    whole tie group is admitted.
    """
    _, tp, predicted, n_pos = _grouped(scores, labels)
    hits = np.diff(tp, prepend=0)
    return float(np.sum(hits * (tp / predicted)) / n_pos)


def pr_curve(scores, labels):
    thresholds, tp, predicted, n_pos = _grouped(scores, labels)
    return [PRPoint(float(t), float(a / p), float(a / n_pos))
            for t, a, p in zip(thresholds, tp, predicted)]


def pair_counts(labels):
    """(matched, unmatched) over all unordered pairs, from the label histogram."""
    counts = np.array(list(Counter(labels).values()), dtype=np.int64)
    n = int(counts.sum())
    matched = int(np.sum(counts * (counts - 1) // 2))
    return matched, n * (n - 1) // 2 - matched


def _unit_rows(emb):
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UsageError("zero embedding: cosine distance undefined")
    return emb / norms


def _triu_index(k, n):
    """Map linear indices over the strict upper triangle (row-major) to (i, j)."""
    k = np.asarray(k, dtype=np.int64)
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - n * (n - 1) // 2 + (n - i) * ((n - i) - 1) // 2
    return i, j


def pairwise_scores(emb, ids, block_size=1024, max_pairs=None, rng=None):
    """Similarity scores (negative cosine distance) and match flags for unordered pairs.

    Rows are processed in blocks; with ``max_pairs`` set and exceeded, a
    seeded uniform subsample of pairs is scored instead.
    """
    u = _unit_rows(np.asarray(emb, dtype=np.float64))
    ids = np.asarray(ids)
    n = u.shape[0]
    total = n * (n - 1) // 2
    if max_pairs is not None and total > max_pairs:
        rng = rng if rng is not None else np.random.default_rng(0)
        k = np.sort(rng.choice(total, size=max_pairs, replace=False))
        i, j = _triu_index(k, n)
        scores = np.empty(max_pairs)
        for start in range(0, max_pairs, block_size * 64):
            sl = slice(start, start + block_size * 64)
            scores[sl] = -(1.0 - np.einsum("ij,ij->i", u[i[sl]], u[j[sl]]))
        return scores, ids[i] == ids[j]
    scores = np.empty(total)
    match = np.empty(total, dtype=bool)
    pos = 0
    for start in range(0, n, block_size):
        stop = min(n, start + block_size)
        sims = u[start:stop] @ u.T
        for r in range(start, stop):
            m = n - r - 1
            scores[pos:pos + m] = -(1.0 - sims[r - start, r + 1:])
            match[pos:pos + m] = ids[r + 1:] == ids[r]
            pos += m
    return scores, match


def acoustic_discrimination_from_embeddings(emb, words, **kw):
    if len(words) < 2 or len(set(words)) < 2:
        raise UsageError("need at least two segments and two labels")
    scores, match = pairwise_scores(emb, np.asarray(words), **kw)
    matched = int(match.sum())
    return {"ap": average_precision(scores, match), "pairs": int(match.size),
            "matched": matched, "unmatched": int(match.size) - matched,
            "scores": scores, "labels": match}


def acoustic_word_discrimination(params, segments, words, **kw):
    """AP of same/different decisions over all segment pairs."""
    return acoustic_discrimination_from_embeddings(embed_segments(list(segments), params), words, **kw)


def cross_view_from_embeddings(seg_emb, seg_words, word_emb, vocab):
    if len(seg_words) < 1 or len(vocab) < 2:
        raise UsageError("need segments and at least two label texts")
    sims = _unit_rows(np.asarray(seg_emb)) @ _unit_rows(np.asarray(word_emb)).T
    scores = -(1.0 - sims).reshape(-1)
    match = (np.asarray(seg_words)[:, None] == np.asarray(vocab)[None, :]).reshape(-1)
    matched = int(match.sum())
    return {"ap": average_precision(scores, match), "pairs": int(match.size),
            "matched": matched, "unmatched": int(match.size) - matched,
            "scores": scores, "labels": match}


def cross_view_discrimination(params, segments, words):
    """AP of segment-vs-label decisions over every (segment, unique label text)."""
    vocab = sorted(set(words))
    return cross_view_from_embeddings(embed_segments(list(segments), params), words,
                                      embed_words(vocab, params), vocab)


def levenshtein(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hypothesis, reference):
    if not reference:
        raise UsageError("CER needs a non-empty reference")
    return levenshtein(hypothesis, reference) / len(reference)


def cer_report(hypotheses, references, train_vocabulary):
    """Length-weighted corpus CER split into in- and out-of-vocabulary words."""
    totals = {"iv": [0, 0], "oov": [0, 0]}
    table = []
    for hyp, ref in zip(hypotheses, references):
        if not ref:
            raise UsageError("empty reference word")
        dist = levenshtein(hyp, ref)
        key = "iv" if ref in train_vocabulary else "oov"
        totals[key][0] += dist
        totals[key][1] += len(ref)
        table.append({"decoded": hyp, "reference": ref, "in_vocabulary": key == "iv", "edits": dist})
    rate = lambda d, n: (d / n) if n else None
    all_d = totals["iv"][0] + totals["oov"][0]
    all_n = totals["iv"][1] + totals["oov"][1]
    return {"iv_cer": rate(*totals["iv"]), "oov_cer": rate(*totals["oov"]),
            "cer": rate(all_d, all_n),
            "iv_words": sum(r["in_vocabulary"] for r in table),
            "oov_words": sum(not r["in_vocabulary"] for r in table),
            "table": table}


def recognition_report(params, segments, words, train_vocabulary, lengths=None, max_len=20):
    hyps = recognize_segments(list(segments), params, lengths=lengths, max_len=max_len)
    return cer_report(hyps, list(words), set(train_vocabulary))
