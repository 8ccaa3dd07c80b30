"""Adam with bias-corrected moment estimates."""

from dataclasses import dataclass, field

import numpy as np

from mvawe.errors import ConfigurationError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(params, grads, state):
    """Apply one Adam step in place. ``grads`` is a sequence aligned with ``params``
    or a mapping keyed by parameter tensor. Returns ``(params, state)``."""
    if isinstance(grads, dict):
        grads = [grads[p] for p in params]
    if len(grads) != len(params):
        raise ConfigurationError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ConfigurationError("Adam state does not match parameter list")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(g) != p.shape or m.shape != p.shape:
            raise ConfigurationError(f"shape mismatch for {p.name or 'param'}: "
                                     f"param {p.shape}, grad {np.shape(g)}, moment {m.shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
