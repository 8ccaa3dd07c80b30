"""Distances and training objectives.

All functions accept either numpy arrays or tensors and return tensors, so
the same code computes loss values and, under a tape, their gradients.
Batch losses are summed over items, not averaged.
"""

from dataclasses import dataclass

import numpy as np

from mvawe.errors import ConfigurationError, UsageError, ValidationError
from mvawe.numerics import tensor as T

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    margin: float = 0.5
    alpha: float = 0.1
    batch_size: int = 32

    def validate(self):
        for name in ("margin", "alpha"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        return self


def cosine_distance(p, q):
    """1 - cos(p, q) along the last axis; rows broadcast against each other."""
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape[-1] != q.shape[-1]:
        raise ValidationError(f"dimension mismatch {p.shape} vs {q.shape}")
    return 1.0 - T.cosine_similarity(p, q)


def single_view_triplet(fx, fx_pos, fx_neg, margin):
    # the difference is formed first so equal distances give exactly ``margin``
    return T.relu(margin + (cosine_distance(fx, fx_pos) - cosine_distance(fx, fx_neg)))


def multiview_triplet_pair(f_xpos, g_cpos, g_cneg, f_xneg, margin):
    """Acoustic-anchored hinge plus text-anchored hinge for one (or a batch of) item(s)."""
    d_pos = cosine_distance(f_xpos, g_cpos)
    acoustic_anchor = T.relu(margin + (d_pos - cosine_distance(f_xpos, g_cneg)))
    text_anchor = T.relu(margin + (cosine_distance(g_cpos, f_xpos) - cosine_distance(g_cpos, f_xneg)))
    return acoustic_anchor + text_anchor


def batch_triplet_loss(f_xpos, g_cpos, g_cneg, f_xneg, margin):
    """Sum over the batch of :func:`multiview_triplet_pair`; inputs are (N, D)."""
    f_xpos = T.as_tensor(f_xpos)
    if f_xpos.ndim != 2 or f_xpos.shape[0] == 0:
        raise UsageError("batch_triplet_loss needs a non-empty (N, D) batch")
    return T.tsum(multiview_triplet_pair(f_xpos, g_cpos, g_cneg, f_xneg, margin))


def decoding_loss(probs_from_acoustic, probs_from_text, targets, mask=None):
    """Summed cross-entropy of both decoder paths against one-hot targets.

    ``probs_*`` and ``targets`` are (N, Y, K); ``mask`` (N, Y) selects the
    valid steps of each target when lengths differ.
    """
    pa, pt = T.as_tensor(probs_from_acoustic), T.as_tensor(probs_from_text)
    targets = np.asarray(targets, dtype=np.float64)
    if pa.shape != targets.shape or pt.shape != targets.shape:
        raise UsageError(f"decoded shapes {pa.shape}/{pt.shape} != target shape {targets.shape}")
    weights = targets if mask is None else targets * np.asarray(mask, dtype=np.float64)[..., None]
    w = T.as_tensor(weights)
    ce_a = T.tsum(w * T.log(T.clamp_min(pa, PROB_FLOOR)))
    ce_t = T.tsum(w * T.log(T.clamp_min(pt, PROB_FLOOR)))
    return -(ce_a + ce_t)


def total_loss(triplet, decoding, alpha):
    return T.as_tensor(triplet) + alpha * T.as_tensor(decoding)


def sequence_decoding_loss(items):
    """Decoding loss over ``(decoded_from_acoustic, decoded_from_text, label)`` triples.

    Each decoded sequence carries a (Y, K) ``probs`` matrix. With K = 27 the
    target gets a trailing end-of-word row, so Y must equal the label length
    plus one; with K = 26, Y must equal the label length.
    """
    if not items:
        raise UsageError("sequence_decoding_loss needs at least one item")
    total = 0.0
    for dec_a, dec_t, label in items:
        onehot = np.asarray(label.onehot, dtype=np.float64)
        pa = np.asarray(dec_a.probs, dtype=np.float64)
        pt = np.asarray(dec_t.probs, dtype=np.float64)
        K = pa.shape[-1]
        if K == onehot.shape[1] + 1:
            target = np.zeros((onehot.shape[0] + 1, K))
            target[:-1, :-1] = onehot
            target[-1, -1] = 1.0
        else:
            target = onehot
        if pa.shape != target.shape or pt.shape != target.shape:
            raise UsageError(f"decoded length does not match label {label.text!r}: "
                             f"{pa.shape}/{pt.shape} vs {target.shape}")
        total = total + decoding_loss(pa[None], pt[None], target[None])
    return T.as_tensor(total)
