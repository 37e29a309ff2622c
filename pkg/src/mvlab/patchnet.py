"""Patch-shared one-hidden-layer network and the training objectives built on it.

Hidden neuron ``i`` applies one weight vector ``w_i`` to every patch and sums
the activations over patches; a linear head maps the ``m`` hidden sums to
``k`` logits.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    cross_entropy,
    kl_from_log_probs,
    log_softmax_temp,
    patch_pool,
    softmax_temp,
)
from .errors import ConfigurationError, ContractError, FormatError

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1

ACTIVATIONS = ("relu", "smooth_relu")
METHODS = ("CLEAN", "PGDAT", "TRADES", "CKTAT", "CKTAT_NO_KL_TEACHER", "CKTAT_NO_KL_SELF")
TEACHER_METHODS = ("CKTAT", "CKTAT_NO_KL_TEACHER", "CKTAT_NO_KL_SELF")
ADVERSARIAL_METHODS = ("PGDAT", "TRADES") + TEACHER_METHODS


@dataclass(frozen=True)
class ModelArch:
    k: int
    d: int
    P: int
    m: int = 40
    activation: str = "relu"

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError(f"arch.m must be >= 1, got {self.m}")
        if min(self.k, self.d, self.P) < 1:
            raise ConfigurationError("arch.k, arch.d and arch.P must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"arch.activation must be one of {ACTIVATIONS}, got {self.activation!r}")


def forward_tensors(hidden: Tensor, head: Tensor, bias: Tensor, X, activation: str = "relu") -> Tensor:
    X = as_tensor(X)
    if X.ndim not in (2, 3) or X.shape[-1] != hidden.shape[1]:
        raise ContractError(f"input shape {X.shape} incompatible with hidden weights {hidden.shape}")
    h = patch_pool(X, hidden, activation)  # (..., m)
    return h @ head.T + bias


@dataclass
class ModelParams:
    hidden: np.ndarray  # (m, d); row i is w_i
    head: np.ndarray  # (k, m)
    bias: np.ndarray  # (k,)
    arch: ModelArch

    def __post_init__(self):
        a = self.arch
        self.hidden = np.asarray(self.hidden, dtype=np.float64)
        self.head = np.asarray(self.head, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.hidden.shape != (a.m, a.d) or self.head.shape != (a.k, a.m) or self.bias.shape != (a.k,):
            raise ContractError(
                f"parameter shapes {self.hidden.shape}, {self.head.shape}, {self.bias.shape} do not match {a}"
            )

    def copy(self) -> "ModelParams":
        return ModelParams(self.hidden.copy(), self.head.copy(), self.bias.copy(), self.arch)

    def tensors(self, requires_grad: bool = False) -> tuple:
        return tuple(Tensor(a, requires_grad=requires_grad) for a in (self.hidden, self.head, self.bias))

    def __call__(self, X) -> Tensor:
        return forward(self, X)

    def logits(self, X) -> np.ndarray:
        return forward(self, X).data

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.hidden.ravel(), self.head.ravel(), self.bias.ravel()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, arch: ModelArch) -> "ModelParams":
        m, d, k = arch.m, arch.d, arch.k
        a, b = m * d, m * d + k * m
        return cls(vec[:a].reshape(m, d).copy(), vec[a:b].reshape(k, m).copy(), vec[b:].copy(), arch)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise parameter equality."""
        return (
            self.arch == other.arch
            and self.hidden.tobytes() == other.hidden.tobytes()
            and self.head.tobytes() == other.head.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )

    # -- checkpoint format --------------------------------------------------
    def to_bytes(self) -> bytes:
        header = json.dumps(dataclasses.asdict(self.arch), sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
        buf.write(header)
        for arr in (self.hidden, self.head, self.bias):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelParams":
        if raw[:4] != CKPT_MAGIC:
            raise FormatError("not a CKPT file (bad magic)")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported CKPT version {version}")
        arch = ModelArch(**json.loads(raw[12 : 12 + hlen].decode("utf-8")))
        payload = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
        expected = arch.m * arch.d + arch.k * arch.m + arch.k
        if payload.size != expected:
            raise FormatError(f"payload holds {payload.size} values, expected {expected}")
        return cls.from_vector(payload.astype(np.float64), arch)

    def save(self, path) -> str:
        raw = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(raw)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class TrackedModel:
    """Parameters held as gradient-tracking leaves for one optimization step."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.hidden, self.head, self.bias = params.tensors(requires_grad=True)

    @property
    def leaves(self) -> tuple:
        return (self.hidden, self.head, self.bias)

    def __call__(self, X) -> Tensor:
        return forward_tensors(self.hidden, self.head, self.bias, X, self.params.arch.activation)


def init_model(arch: ModelArch, seed: int = 0) -> ModelParams:
    """He-style Gaussian init: std sqrt(2/fan_in) for both layers, zero bias."""
    rng = np.random.default_rng(seed)
    hidden = rng.normal(0.0, np.sqrt(2.0 / arch.d), size=(arch.m, arch.d))
    head = rng.normal(0.0, np.sqrt(2.0 / arch.m), size=(arch.k, arch.m))
    return ModelParams(hidden, head, np.zeros(arch.k), arch)


def forward(params: ModelParams, X) -> Tensor:
    """Logits for one sample ``(P, d)`` or a batch ``(B, P, d)``; params are constants."""
    hidden, head, bias = params.tensors()
    return forward_tensors(hidden, head, bias, X, params.arch.activation)


def clean_prediction(teacher: ModelParams, x, tau: float = 1.0) -> Tensor:
    """Temperature-softened teacher probabilities; never part of a gradient tape."""
    logits = teacher.logits(x.data if isinstance(x, Tensor) else x)
    return softmax_temp(logits, tau)


@dataclass
class LossSpec:
    method: str = "CKTAT"
    beta: float = 6.0
    tau: float = 5.0
    teacher: Optional[ModelParams] = None
    kl_reverse: bool = False  # KL(student || target) instead of KL(target || student)
    stop_grad_clean: bool = False  # detach S(x) when it is the KL target

    def validate(self, require_teacher: bool = True) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown loss method {self.method!r}; choose one of {METHODS}")
        if not self.tau > 0:
            raise ConfigurationError(f"loss.tau must be positive, got {self.tau}")
        if not self.beta >= 0:
            raise ConfigurationError(f"loss.beta must be non-negative, got {self.beta}")
        if require_teacher and self.method in TEACHER_METHODS and self.teacher is None:
            raise ConfigurationError(f"loss method {self.method} requires a teacher model")

    @property
    def adversarial(self) -> bool:
        return self.method in ADVERSARIAL_METHODS


def _kl(target_logp: Tensor, student_logp: Tensor, reverse: bool) -> Tensor:
    if reverse:
        return kl_from_log_probs(student_logp, target_logp)
    return kl_from_log_probs(target_logp, student_logp)


def composite_loss(spec: LossSpec, student, x, x_adv, y, teacher_logits=None) -> Tensor:
    """Scalar training objective for one batch.

    ``student`` maps inputs to logits (a :class:`TrackedModel` during
    training).  ``teacher_logits`` may pass precomputed ``T(x)`` logits.

    CLEAN      CE(S(x), y)
    PGDAT      CE(S(x'), y)
    TRADES     CE(S(x), y) + beta * KL(S(x) || S(x'))
    CKTAT      KL(T^tau(x) || S(x')) + beta * KL(S(x) || S(x'))
    CKTAT_NO_KL_TEACHER   CE(S(x'), y) + beta * KL(S(x) || S(x'))
    CKTAT_NO_KL_SELF      KL(T^tau(x) || S(x'))
    """
    spec.validate()
    method = spec.method
    if method != "CLEAN" and x_adv is None:
        raise ContractError(f"{method} needs adversarial inputs")

    if method == "CLEAN":
        return cross_entropy(student(x), y)
    if method == "PGDAT":
        return cross_entropy(student(x_adv), y)

    adv_logits = student(x_adv)
    adv_logp = adv_logits.log_softmax(axis=-1)

    def self_term(clean_logits=None):
        clean_logp = (clean_logits if clean_logits is not None else student(x)).log_softmax(axis=-1)
        if spec.stop_grad_clean:
            clean_logp = clean_logp.detach()
        return _kl(clean_logp, adv_logp, spec.kl_reverse)

    def teacher_term():
        t_logits = teacher_logits if teacher_logits is not None else spec.teacher.logits(_data(x))
        return _kl(log_softmax_temp(_data(t_logits), spec.tau), adv_logp, spec.kl_reverse)

    if method == "TRADES":
        clean_logits = student(x)
        loss = cross_entropy(clean_logits, y)
        return loss + spec.beta * self_term(clean_logits) if spec.beta else loss
    if method == "CKTAT_NO_KL_SELF":
        return teacher_term()
    first = teacher_term() if method == "CKTAT" else cross_entropy(adv_logits, y)
    if spec.beta == 0:
        return first
    return first + spec.beta * self_term()


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
