"""Backward-pass verification against central finite differences.

Every loss variant is differentiated with respect to all model parameters on
small random models and compared with a central-difference gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, relative_error
from .errors import InvalidInputError
from .patchnet import METHODS, LossSpec, ModelArch, ModelParams, TrackedModel, composite_loss, init_model

# the six methods plus reversed KL; stop_grad_clean is excluded because its
# gradient is deliberately not the derivative of the loss value
VARIANTS = tuple((m, {}) for m in METHODS) + (("CKTAT", {"kl_reverse": True}),)
# pre-activations this close to a point where the activation's first (relu)
# or second (smooth_relu) derivative jumps are resampled
KINK_MARGIN = 1e-4
KINKS = {"relu": 0.0, "smooth_relu": 1.0}


@dataclass
class GradCheckResult:
    variant: str
    trial: int
    arch: ModelArch
    rel_error: float


def variant_name(method: str, flags: dict) -> str:
    return method + "".join(f"+{k}" for k in sorted(flags))


def _kink_distance(params: ModelParams, *inputs) -> float:
    kink = KINKS[params.arch.activation]
    return min(float(np.abs(x.reshape(-1, params.arch.d) @ params.hidden.T - kink).min()) for x in inputs)


def random_problem(rng: np.random.Generator, activation: str):
    """A small random model, teacher, clean/adversarial batch and labels."""
    k = int(rng.integers(2, 6))
    d = int(rng.integers(2 * k, 21))
    m = int(rng.integers(1, 33))
    P = int(rng.integers(2, 7))
    B = int(rng.integers(1, 5))
    arch = ModelArch(k, d, P, m, activation)
    for _ in range(100):
        params = init_model(arch, int(rng.integers(2**31)))
        params = ModelParams(params.hidden, params.head, rng.normal(0, 0.1, k), arch)
        teacher = init_model(arch, int(rng.integers(2**31)))
        x = rng.normal(0, 1.0, (B, P, d))
        x_adv = x + rng.uniform(-0.1, 0.1, x.shape)
        if _kink_distance(params, x, x_adv) > KINK_MARGIN:
            return params, teacher, x, x_adv, rng.integers(0, k, B)
    raise RuntimeError("could not draw a kink-free problem")


class _FixedLogits:
    """Stands in for a student whose logits on ``x`` and ``x_adv`` are precomputed."""

    def __init__(self, pairs):
        self.pairs = pairs

    def __call__(self, inp):
        for arr, logits in self.pairs:
            if inp is arr:
                return logits
        raise KeyError("unexpected input")


def check_problem(params: ModelParams, teacher: ModelParams, x, x_adv, y, variants=VARIANTS,
                  beta: float = 6.0, tau: float = 5.0, h: float = 1e-5) -> list:
    """Normwise relative error between backward and central differences, per variant.

    The finite-difference sweep evaluates the student once per perturbed
    parameter vector and scores every variant on the same logits.
    """
    specs = [LossSpec(method=m, beta=beta, tau=tau, teacher=teacher, **flags) for m, flags in variants]
    t_logits = teacher.logits(x)
    both = np.concatenate([x, x_adv])
    B = len(x)

    def losses_at(vec):
        logits = ModelParams.from_vector(vec, params.arch).logits(both)
        student = _FixedLogits([(x, Tensor(logits[:B])), (x_adv, Tensor(logits[B:]))])
        return np.array([composite_loss(s, student, x, x_adv, y, teacher_logits=t_logits).item() for s in specs])

    vec = params.to_vector()
    numeric = np.zeros((len(specs), vec.size))
    work = vec.copy()
    for i in range(vec.size):
        work[i] = vec[i] + h
        up = losses_at(work)
        work[i] = vec[i] - h
        down = losses_at(work)
        work[i] = vec[i]
        numeric[:, i] = (up - down) / (2.0 * h)
    if not np.all(np.isfinite(numeric)):
        raise InvalidInputError("non-finite loss during finite differences")

    errors = []
    for spec, fd in zip(specs, numeric):
        tracked = TrackedModel(params)
        loss = composite_loss(spec, tracked, x, x_adv, y, teacher_logits=t_logits)
        analytic = np.concatenate([g.ravel() for g in backward(loss, tracked.leaves)])
        errors.append(relative_error(analytic, fd))
    return errors


def run_gradcheck(trials: int = 50, seed: int = 0, variants=VARIANTS) -> list:
    """One :class:`GradCheckResult` per (trial, variant); ReLU and smooth ReLU alternate."""
    out = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        activation = "relu" if t % 2 == 0 else "smooth_relu"
        params, teacher, x, x_adv, y = random_problem(rng, activation)
        beta, tau = rng.uniform(0.5, 7.0), rng.uniform(1.0, 6.0)
        errors = check_problem(params, teacher, x, x_adv, y, variants, beta, tau)
        for (method, flags), err in zip(variants, errors):
            out.append(GradCheckResult(variant_name(method, flags), t, params.arch, err))
    return out
