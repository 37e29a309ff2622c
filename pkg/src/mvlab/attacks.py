"""L-infinity FGSM and PGD on patch inputs.

A "model" here is any callable mapping an input :class:`Tensor` of shape
``(P, d)`` or ``(B, P, d)`` to logits; :class:`~mvlab.patchnet.ModelParams`
qualifies.  Attack losses are summed (not averaged) over the batch so each
sample's gradient is independent of what else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, backward, kl_from_log_probs
from .errors import AttackFailureError, ConfigurationError

LOSS_TARGETS = ("ce", "kl")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    step_size: Optional[float] = None  # default epsilon / 4
    steps: int = 10
    random_start: bool = True
    loss_target: str = "ce"
    clamp_box: Optional[tuple] = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError(f"attack.epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ConfigurationError(f"attack.steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.step_size is not None and not self.step_size > 0:
            raise ConfigurationError(f"attack.step_size must be > 0, got {self.step_size}")
        if self.loss_target not in LOSS_TARGETS:
            raise ConfigurationError(f"attack.loss_target must be one of {LOSS_TARGETS}")
        if self.clamp_box is not None:
            lo, hi = self.clamp_box
            if not lo < hi:
                raise ConfigurationError(f"attack.clamp_box {self.clamp_box} must satisfy lo < hi")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return replace(self, epsilon=epsilon)


def _labels_loss(logits: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.int64)
    return -logits.log_softmax(axis=-1).take_last(y).sum()


def input_gradient(model: Callable, x_adv: np.ndarray, y, loss_target: str = "ce", clean_logp=None) -> np.ndarray:
    """Gradient of the (summed) attack loss with respect to the input."""
    X = Tensor(x_adv, requires_grad=True)
    logits = model(X)
    if loss_target == "ce":
        loss = _labels_loss(logits, y)
    else:
        per = kl_from_log_probs(Tensor(clean_logp), logits.log_softmax(axis=-1))
        # kl_from_log_probs averages over the batch; undo it to keep samples independent
        loss = per * float(x_adv.shape[0]) if x_adv.ndim == 3 else per
    (g,) = backward(loss, [X])
    return g


def _check_finite(g: np.ndarray) -> None:
    bad = ~np.isfinite(g)
    if bad.any():
        rows = np.flatnonzero(bad.reshape(bad.shape[0], -1).any(axis=1)) if g.ndim == 3 else [0]
        raise AttackFailureError("non-finite input gradient", indices=rows)


def _clean_logp(model, x, cfg):
    if cfg.loss_target != "kl":
        return None
    return model(Tensor(x)).log_softmax(axis=-1).data


def _project(x_adv, x0, cfg):
    # in-place min/max; np.clip with array bounds is several times slower
    delta = x_adv - x0
    np.minimum(delta, cfg.epsilon, out=delta)
    np.maximum(delta, -cfg.epsilon, out=delta)
    delta += x0
    if cfg.clamp_box is not None:
        lo, hi = cfg.clamp_box
        np.minimum(delta, hi, out=delta)
        np.maximum(delta, lo, out=delta)
    return delta


def fgsm(model: Callable, cfg: AttackConfig, x, y) -> np.ndarray:
    """x + epsilon * sign(grad_x L); sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    g = input_gradient(model, x, y, cfg.loss_target, _clean_logp(model, x, cfg))
    _check_finite(g)
    return _project(x + cfg.epsilon * np.sign(g), x, cfg)


def pgd(model: Callable, cfg: AttackConfig, x, y, rng: Optional[np.random.Generator] = None, hook=None, start=None) -> np.ndarray:
    """Projected sign-gradient ascent inside the epsilon ball around ``x``.

    ``hook(step, x_adv)`` is called after the random start (step 0) and after
    every projected update.  ``start`` overrides the random start offset.
    """
    x0 = np.asarray(x, dtype=np.float64)
    x_adv = x0.copy()
    if start is not None:
        x_adv = _project(x0 + start, x0, cfg)
    elif cfg.random_start and cfg.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = _project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), x0, cfg)
    if hook is not None:
        hook(0, x_adv)
    clean_logp = _clean_logp(model, x0, cfg) if cfg.steps else None
    for t in range(cfg.steps):
        g = input_gradient(model, x_adv, y, cfg.loss_target, clean_logp)
        _check_finite(g)
        x_adv = _project(x_adv + cfg.alpha * np.sign(g), x0, cfg)
        if hook is not None:
            hook(t + 1, x_adv)
    return x_adv


def attack_batch(model: Callable, cfg: AttackConfig, X, y, seed: int = 0, sample_ids=None) -> np.ndarray:
    """PGD over a batch; sample i's random start comes from generator (seed, id_i).

    Results do not depend on batch composition or order.  Per-sample
    failures are collected and raised together with their indices.
    """
    X = np.asarray(X, dtype=np.float64)
    ids = np.arange(len(X)) if sample_ids is None else np.asarray(sample_ids)
    start = None
    if cfg.random_start and cfg.epsilon > 0:
        start = np.stack(
            [np.random.default_rng([seed, int(i)]).uniform(-cfg.epsilon, cfg.epsilon, size=X.shape[1:]) for i in ids]
        )
    try:
        return pgd(model, cfg, X, y, start=start)
    except AttackFailureError as exc:
        raise AttackFailureError(f"attack failed on samples {list(exc.indices)}", indices=exc.indices) from None
