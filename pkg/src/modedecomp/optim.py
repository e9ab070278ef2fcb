"""First-order optimizers and the step-decay learning-rate schedule.

Parameters and gradients are lists of numpy arrays in a fixed order (see
``MlpParams.arrays``); every step returns fresh arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError

KINDS = ("GD", "Adam", "AdaGrad")
DECAY_EVERY = 500
DECAY_FACTOR = 0.95


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "Adam"
    alpha1: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eps_bar: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if not self.alpha1 > 0:
            raise ValueError("alpha1 must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


@dataclass
class OptimizerState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    g2: list = field(default_factory=list)


def lr_at(t, alpha1):
    """``0.95**floor(t/500) * alpha1`` for epoch ``t >= 1``."""
    if t < 1:
        raise ValueError("epochs are counted from 1")
    return DECAY_FACTOR ** (t // DECAY_EVERY) * alpha1


def init_state(config: OptimizerConfig, params) -> OptimizerState:
    zeros = [np.zeros_like(p) for p in params]
    if config.kind == "Adam":
        return OptimizerState(0, m=zeros, v=[z.copy() for z in zeros])
    if config.kind == "AdaGrad":
        return OptimizerState(0, g2=zeros)
    return OptimizerState(0)


def _check_grads(params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteError(f"gradient array {i} (shape {g.shape}) has {bad} non-finite entries")


def step(state: OptimizerState, params, grads, config: OptimizerConfig, t=None, lr_scale=1.0):
    """One update at epoch ``t`` (defaults to ``state.t + 1``).

    Returns ``(new_state, new_params)``. The rate is
    ``lr_at(t, alpha1) * lr_scale``.
    """
    if t is None:
        t = state.t + 1
    if t != state.t + 1:
        raise ValueError(f"step index {t} does not follow state.t={state.t}")
    _check_grads(params, grads)
    lr = lr_at(t, config.alpha1) * lr_scale

    if config.kind == "GD":
        return OptimizerState(t), [p - lr * g for p, g in zip(params, grads)]

    if config.kind == "AdaGrad":
        g2 = [acc + g * g for acc, g in zip(state.g2, grads)]
        new = [p - lr * g / (np.sqrt(acc) + config.eps) for p, g, acc in zip(params, grads, g2)]
        return OptimizerState(t, g2=g2), new

    b1, b2 = config.beta1, config.beta2
    m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1.0 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = [
        p - lr * (mi / c1) / (np.sqrt(vi / c2 + config.eps_bar) + config.eps)
        for p, mi, vi in zip(params, m, v)
    ]
    return OptimizerState(t, m=m, v=v), new


def _weighted_sum(mode_grads, weights, scale):
    first = mode_grads[0]
    if isinstance(first, np.ndarray):
        total = np.zeros_like(first)
        for w, g in zip(weights, mode_grads):
            total = total + w * g
        return total * scale
    total = [np.zeros_like(a) for a in first]
    for w, g in zip(weights, mode_grads):
        total = [acc + w * a for acc, a in zip(total, g)]
    return [acc * scale for acc in total]


def standard_gradient(mode_grads, sigmas, n, m_tr):
    """``(1/(n m)) sum_i sigma_i^2 grad L_i``, the gradient of the plain loss."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    return _weighted_sum(mode_grads, sigmas * sigmas, 1.0 / (n * m_tr))


def reweight_gradient(mode_grads, sigmas, e, n, m_tr):
    """Gradient of the loss with mode weights ``sigma_i^(2+2e)``.

    Returns ``(gradient, lr_scale)`` where ``lr_scale = sigma_1^(-2e)`` keeps
    the leading mode's effective step unchanged. ``mode_grads`` holds one
    gradient per mode, either flat arrays or lists of arrays.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas <= 0):
        raise ValueError("singular values must be positive")
    if len(mode_grads) != sigmas.size:
        raise ShapeError(f"{len(mode_grads)} mode gradients for {sigmas.size} singular values")
    weights = sigmas ** (2.0 + 2.0 * e)
    return _weighted_sum(mode_grads, weights, 1.0 / (n * m_tr)), float(sigmas[0] ** (-2.0 * e))


def mode_weights(sigmas, e):
    """Per-mode weights ``sigma_i^(2+2e)`` and the matching ``lr_scale``."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    return sigmas ** (2.0 + 2.0 * e), float(sigmas[0] ** (-2.0 * e))
