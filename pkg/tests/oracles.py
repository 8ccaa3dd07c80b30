"""Slow, independent reference implementations used by the tests."""

import numpy as np

from mvawe.features import filter_edges


def brute_force_ap(scores, labels):
    """Sweep every distinct threshold from high to low and integrate precision over recall."""
    scores = [float(s) for s in scores]
    labels = [bool(y) for y in labels]
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(picked)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / len(picked))
        prev_recall = recall
    return area


def edit_distance_matrix(a, b):
    """Full (len(a)+1) x (len(b)+1) Wagner-Fischer table."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            sub = d[i - 1, j - 1] + (a[i - 1] != b[j - 1])
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, sub)
    return int(d[-1, -1])


def histogram_for_pairs(n, matched, max_count=None):
    """Greedy label histogram with ``n`` items and exactly ``matched`` same-label pairs."""
    counts = []
    left_items, left_pairs = n, matched
    while left_pairs > 0:
        c = int((1 + np.sqrt(1 + 8 * left_pairs)) // 2)
        if max_count is not None:
            c = min(c, max_count)
        while c * (c - 1) // 2 > left_pairs:
            c -= 1
        counts.append(c)
        left_items -= c
        left_pairs -= c * (c - 1) // 2
    if left_items < 0:
        raise ValueError("not enough items")
    counts.extend([1] * left_items)
    return counts


def _pair_range(items, labels):
    """Smallest and largest same-label pair counts for ``items`` over ``labels`` non-empty labels."""
    if labels == 0:
        return (0, 0) if items == 0 else (1, 0)
    if items < labels:
        return 1, 0
    q, r = divmod(items, labels)
    low = r * (q + 1) * q // 2 + (labels - r) * q * (q - 1) // 2
    big = items - labels + 1
    return low, big * (big - 1) // 2


def histogram_with_labels(n, n_labels, matched):
    """Label histogram with ``n`` items over exactly ``n_labels`` labels and ``matched`` pairs.

    Labels are placed largest first; each takes the biggest count that leaves
    the remaining items, labels and pairs feasible.
    """
    counts = []
    items, labels, pairs = n, n_labels, matched
    while labels:
        for c in range(items - labels + 1, 0, -1):
            p = c * (c - 1) // 2
            if p > pairs:
                continue
            low, high = _pair_range(items - c, labels - 1)
            if low <= pairs - p <= high:
                break
        else:
            raise ValueError("target unreachable")
        counts.append(c)
        items, labels, pairs = items - c, labels - 1, pairs - p
    if pairs:
        raise ValueError("target unreachable")
    return counts


def dft_filter_energies(frame, sample_rate, nfft, n_mels):
    """Per-filter energies from an explicit DFT sum and directly evaluated triangles."""
    n = np.arange(frame.size)
    k = np.arange(nfft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / nfft)
    power = np.abs(basis @ frame) ** 2
    freqs = k * sample_rate / nfft
    energies = []
    for left, center, right in filter_edges(sample_rate, n_mels):
        w = [max(0.0, min((f - left) / (center - left), (right - f) / (right - center))) for f in freqs]
        energies.append(float(np.dot(w, power)))
    return np.array(energies)
