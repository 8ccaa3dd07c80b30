"""Mini-batch construction for multi-view triplets.

Each item is a positive (segment, label) pair plus a negative segment and a
negative label, both drawn uniformly from the pairs whose label differs
from the positive's. The two negatives are drawn independently.
"""

from dataclasses import dataclass

import numpy as np

from mvawe.errors import ConfigurationError, UsageError


@dataclass
class WordPair:
    segment: object   # AcousticSegment
    label: object     # TextLabel
    label_id: int


@dataclass
class TripletBatch:
    positives: np.ndarray       # dataset indices of (x+, c+)
    negative_segs: np.ndarray   # dataset indices supplying x-
    negative_labels: np.ndarray  # dataset indices supplying c-

    def __len__(self):
        return len(self.positives)

    def check(self, label_ids):
        pos = label_ids[self.positives]
        if np.any(label_ids[self.negative_segs] == pos) or np.any(label_ids[self.negative_labels] == pos):
            raise AssertionError("negative shares the positive's label")


class NegativeSampler:
    """Uniform draws from the complement of a label's pairs in O(1) each."""

    def __init__(self, label_ids):
        label_ids = np.asarray(label_ids, dtype=np.int64)
        if np.unique(label_ids).size < 2:
            raise ConfigurationError("negative sampling needs at least two distinct labels")
        self.label_ids = label_ids
        self.order = np.argsort(label_ids, kind="stable")
        sorted_ids = label_ids[self.order]
        uniq, start, count = np.unique(sorted_ids, return_index=True, return_counts=True)
        self.start = dict(zip(uniq.tolist(), start.tolist()))
        self.count = dict(zip(uniq.tolist(), count.tolist()))
        self.n = label_ids.size

    def draw(self, label, rng, size=None):
        s, c = self.start[label], self.count[label]
        r = rng.integers(0, self.n - c, size=size)
        return self.order[np.where(r < s, r, r + c)]


def sample_batch(label_ids, batch_positions, rng_seed, sampler=None):
    """Attach independently drawn negatives to the given positive positions.

    ``rng_seed`` is an int, a sequence of ints, or a ``numpy.random.Generator``.
    """
    sampler = sampler or NegativeSampler(label_ids)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    positives = np.asarray(batch_positions, dtype=np.int64)
    if positives.size == 0:
        raise UsageError("empty batch")
    neg_seg = np.empty_like(positives)
    neg_lab = np.empty_like(positives)
    for k, i in enumerate(positives):
        label = int(sampler.label_ids[i])
        neg_seg[k] = sampler.draw(label, rng)
        neg_lab[k] = sampler.draw(label, rng)
    return TripletBatch(positives, neg_seg, neg_lab)


def epoch_schedule(dataset_size, batch_size, rng_seed):
    """Seeded permutation of ``range(dataset_size)`` cut into batches; the last may be short."""
    if batch_size < 1:
        raise UsageError("batch size must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    perm = rng.permutation(dataset_size)
    return [perm[i:i + batch_size] for i in range(0, dataset_size, batch_size)]
