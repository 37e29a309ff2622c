"""Synthetic multi-view / single-view patch data.

Feature ``(j, l)`` (class ``j`` in ``0..k-1``, slot ``l`` in ``{0, 1}``) lives
at row ``2*j + l`` of the feature bank.  A single-view sample stores the
dominant slot as ``lhat`` in ``{1, 2}`` (``0`` marks a multi-view sample); its
other class feature is only present at the weak scale ``rho``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    InfeasibleOrthogonalityError,
    InvalidParameterError,
)

MVDS_MAGIC = b"MVDS"
MVDS_VERSION = 1

MULTI, SINGLE = 0, 1
OFF_CLASS_LOW = 0.5  # off-class sums ~ U[OFF_CLASS_LOW * gamma, gamma]
WEAK_HIGH = 1.2  # weak-feature sums ~ U[rho, WEAK_HIGH * rho]


def feature_index(j: int, l: int) -> int:
    return 2 * j + l


def feature_key(f: int) -> tuple:
    f = int(f)
    return (f // 2, f % 2)


@dataclass(frozen=True)
class FeatureBank:
    k: int
    d: int
    vectors: np.ndarray  # (2k, d), orthonormal rows

    def vector(self, j: int, l: int) -> np.ndarray:
        return self.vectors[feature_index(j, l)]

    def gram(self) -> np.ndarray:
        return self.vectors @ self.vectors.T

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes()).hexdigest()


def build_feature_bank(k: int, d: int, seed: int = 0) -> FeatureBank:
    """Orthonormalize 2k standard-Gaussian draws in R^d (QR, sign-fixed)."""
    if k < 1:
        raise InvalidParameterError(f"k must be >= 1, got {k}")
    if d < 2 * k:
        raise InfeasibleOrthogonalityError(f"cannot fit {2 * k} orthonormal features in R^{d}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, 2 * k))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    vectors = np.ascontiguousarray(q.T)
    vectors.flags.writeable = False
    return FeatureBank(k=k, d=d, vectors=vectors)


@dataclass
class DistributionConfig:
    k: int = 5
    d: int = 30
    P: Optional[int] = None  # default k^2
    C_p: int = 2
    s: float = 1.0
    mu: float = 0.4
    gamma: Optional[float] = None  # default k^-1.5
    rho: Optional[float] = None  # default 0.1, or k^-0.01 with rho_from_k
    rho_from_k: bool = False
    noise_std: float = 0.05
    main_coeff_range: tuple = (1.0, 2.0)
    seed: int = 0
    mode: str = "full"  # "full" | "simplified"

    def resolved(self) -> "DistributionConfig":
        """Copy with every derived default filled in, validated."""
        cfg = dataclasses.replace(self, main_coeff_range=tuple(float(v) for v in self.main_coeff_range))
        if cfg.P is None:
            cfg.P = cfg.k * cfg.k
        if cfg.gamma is None:
            cfg.gamma = float(cfg.k) ** -1.5
        if cfg.rho is None:
            cfg.rho = float(cfg.k) ** -0.01 if cfg.rho_from_k else 0.1
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigurationError("data.k must be >= 1")
        if self.d < 2 * self.k:
            raise ConfigurationError(f"data.d={self.d} < 2*data.k={2 * self.k}: features cannot be orthogonal")
        if self.P is not None and self.P < 1:
            raise ConfigurationError("data.P must be >= 1")
        if self.C_p < 1:
            raise ConfigurationError("data.C_p must be >= 1")
        if self.P is not None and self.mode == "full" and 2 * self.C_p > self.P:
            raise ConfigurationError(f"data.P={self.P} cannot hold the two label features at data.C_p={self.C_p}")
        if self.s != 0 and not (1.0 <= self.s <= self.k**0.2 + 1e-12):
            raise ConfigurationError(f"data.s={self.s} outside [1, k^0.2] (or 0)")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError(f"data.mu={self.mu} outside [0, 1]")
        for name in ("gamma", "rho", "noise_std"):
            v = getattr(self, name)
            if v is not None and not (v >= 0 and math.isfinite(v)):
                raise ConfigurationError(f"data.{name} must be a finite non-negative number")
        lo, hi = self.main_coeff_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"data.main_coeff_range {self.main_coeff_range} must satisfy 0 < lo <= hi")
        if self.mode not in ("full", "simplified"):
            raise ConfigurationError(f"data.mode must be 'full' or 'simplified', got {self.mode!r}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["main_coeff_range"] = list(self.main_coeff_range)
        return out


@dataclass
class DataPoint:
    patches: np.ndarray  # (P, d)
    label: int
    view: str  # "multi" | "single"
    lhat: int  # 1 or 2 for single-view, 0 for multi-view
    present_features: set
    coeff_sums: dict  # (j, l) -> sum of z_p over the feature's patches
    patch_assignment: dict  # (j, l) -> frozenset of patch indices
    dropped: int = 0


def sample_datapoint(cfg: DistributionConfig, bank: FeatureBank, rng: np.random.Generator, view: Optional[str] = None) -> DataPoint:
    """Draw one (X, y) following the full multi-view distribution.

    ``view`` forces "multi" or "single"; by default a sample is single-view
    with probability ``cfg.mu``.
    """
    if cfg.P is None or cfg.gamma is None or cfg.rho is None:
        cfg = cfg.resolved()
    if (bank.k, bank.d) != (cfg.k, cfg.d):
        raise ContractError(f"bank (k={bank.k}, d={bank.d}) does not match config (k={cfg.k}, d={cfg.d})")
    k, P, C_p = cfg.k, cfg.P, cfg.C_p

    y = int(rng.integers(k))
    is_single = rng.random() < cfg.mu
    if view is not None:
        is_single = view == "single"
    lhat = int(rng.integers(1, 3)) if is_single else 0

    off = rng.random(2 * k) < (cfg.s / k)
    off[2 * y : 2 * y + 2] = False
    off_idx = [int(f) for f in np.flatnonzero(off)]

    capacity = P // C_p
    dropped = 0
    if 2 + len(off_idx) > capacity:
        keep = capacity - 2
        order = rng.permutation(len(off_idx))
        dropped = len(off_idx) - keep
        off_idx = sorted(off_idx[i] for i in order[:keep])

    lo, hi = cfg.main_coeff_range
    sums = {}
    if is_single:
        strong = feature_index(y, lhat - 1)
        weak = feature_index(y, 2 - lhat)
        sums[strong] = rng.uniform(lo, hi)
        sums[weak] = rng.uniform(cfg.rho, WEAK_HIGH * cfg.rho)
    else:
        sums[feature_index(y, 0)] = rng.uniform(lo, hi)
        sums[feature_index(y, 1)] = rng.uniform(lo, hi)
    for f in off_idx:
        sums[f] = rng.uniform(OFF_CLASS_LOW * cfg.gamma, cfg.gamma)

    features = sorted(sums)
    perm = rng.permutation(P)
    X = rng.normal(0.0, cfg.noise_std / math.sqrt(cfg.d), size=(P, cfg.d))
    assignment = {}
    for slot, f in enumerate(features):
        patches = perm[slot * C_p : (slot + 1) * C_p]
        z = rng.dirichlet(np.ones(C_p)) * sums[f] if C_p > 1 else np.array([sums[f]])
        X[patches] += z[:, None] * bank.vectors[f][None, :]
        assignment[feature_key(f)] = frozenset(int(p) for p in patches)

    return DataPoint(
        patches=X,
        label=y,
        view="single" if is_single else "multi",
        lhat=lhat,
        present_features={feature_key(f) for f in features},
        coeff_sums={feature_key(f): float(sums[f]) for f in features},
        patch_assignment=assignment,
        dropped=dropped,
    )


def _record_dtype(P: int, d: int, k: int) -> np.dtype:
    return np.dtype(
        [
            ("label", "<u4"),
            ("view", "u1"),
            ("lhat", "u1"),
            ("patches", "<f8", (P, d)),
            ("coeff", "<f8", (2 * k,)),
            ("present", "u1", (2 * k,)),
            ("owner", "<i4", (P,)),
        ]
    )


class Dataset:
    """N samples stored column-wise; ``ds[i]`` materializes a :class:`DataPoint`."""

    def __init__(self, config: DistributionConfig, bank: FeatureBank, X, labels, views, lhat, coeff, present, owner, meta=None):
        self.config = config
        self.bank = bank
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.views = np.asarray(views, dtype=np.uint8)
        self.lhat = np.asarray(lhat, dtype=np.uint8)
        self.coeff = np.asarray(coeff, dtype=np.float64)
        self.present = np.asarray(present, dtype=bool)
        self.owner = np.asarray(owner, dtype=np.int32)
        self.meta = dict(meta or {})

    @property
    def N(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.N

    @property
    def k(self) -> int:
        return self.bank.k

    @property
    def samples(self) -> list:
        return [self[i] for i in range(self.N)]

    def __getitem__(self, i: int) -> DataPoint:
        present = {feature_key(int(f)) for f in np.flatnonzero(self.present[i])}
        assignment = {}
        for f in np.flatnonzero(self.present[i]):
            assignment[feature_key(int(f))] = frozenset(int(p) for p in np.flatnonzero(self.owner[i] == f))
        return DataPoint(
            patches=self.X[i],
            label=int(self.labels[i]),
            view="single" if self.views[i] == SINGLE else "multi",
            lhat=int(self.lhat[i]),
            present_features=present,
            coeff_sums={key: float(self.coeff[i, feature_index(*key)]) for key in present},
            patch_assignment=assignment,
        )

    def single_view_mask(self) -> np.ndarray:
        return self.views == SINGLE

    def dominant_feature(self) -> np.ndarray:
        """Row index of v_{y,lhat} for single-view samples, -1 for multi-view."""
        return np.where(self.views == SINGLE, 2 * self.labels + self.lhat.astype(np.int64) - 1, -1)

    @classmethod
    def from_points(cls, config: DistributionConfig, bank: FeatureBank, points: list, meta=None) -> "Dataset":
        N, k = len(points), bank.k
        P, d = points[0].patches.shape
        coeff = np.zeros((N, 2 * k))
        present = np.zeros((N, 2 * k), dtype=bool)
        owner = np.full((N, P), -1, dtype=np.int32)
        for i, dp in enumerate(points):
            for key, val in dp.coeff_sums.items():
                f = feature_index(*key)
                coeff[i, f] = val
                present[i, f] = True
            for key, patches in dp.patch_assignment.items():
                owner[i, sorted(patches)] = feature_index(*key)
        meta = dict(meta or {})
        meta.setdefault("dropped_features", int(sum(dp.dropped for dp in points)))
        return cls(
            config,
            bank,
            X=np.stack([dp.patches for dp in points]),
            labels=[dp.label for dp in points],
            views=[SINGLE if dp.view == "single" else MULTI for dp in points],
            lhat=[dp.lhat for dp in points],
            coeff=coeff,
            present=present,
            owner=owner,
            meta=meta,
        )

    # -- serialization -----------------------------------------------------
    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "N": self.N,
            "k": self.k,
            "d": self.bank.d,
            "P": int(self.X.shape[1]),
            "bank_checksum": self.bank.checksum(),
            "meta": self.meta,
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        rec = np.zeros(self.N, dtype=_record_dtype(self.X.shape[1], self.bank.d, self.k))
        rec["label"] = self.labels
        rec["view"] = self.views
        rec["lhat"] = self.lhat
        rec["patches"] = self.X
        rec["coeff"] = self.coeff
        rec["present"] = self.present
        rec["owner"] = self.owner
        buf = io.BytesIO()
        buf.write(MVDS_MAGIC)
        buf.write(struct.pack("<II", MVDS_VERSION, len(hbytes)))
        buf.write(hbytes)
        buf.write(np.ascontiguousarray(self.bank.vectors, dtype="<f8").tobytes())
        buf.write(rec.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Dataset":
        if raw[:4] != MVDS_MAGIC:
            raise FormatError("not an MVDS file (bad magic)")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != MVDS_VERSION:
            raise FormatError(f"unsupported MVDS version {version}")
        off = 12
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
        off += hlen
        k, d, N = header["k"], header["d"], header["N"]
        nbank = 2 * k * d * 8
        vectors = np.frombuffer(raw, dtype="<f8", count=2 * k * d, offset=off).reshape(2 * k, d).astype(np.float64)
        off += nbank
        vectors.flags.writeable = False
        bank = FeatureBank(k=k, d=d, vectors=vectors)
        if bank.checksum() != header["bank_checksum"]:
            raise FormatError("feature bank checksum mismatch")
        cfg_dict = dict(header["config"])
        cfg_dict["main_coeff_range"] = tuple(cfg_dict["main_coeff_range"])
        config = DistributionConfig(**cfg_dict)
        dtype = _record_dtype(header["P"], d, k)
        if len(raw) - off != N * dtype.itemsize:
            raise FormatError("payload length does not match header")
        rec = np.frombuffer(raw, dtype=dtype, count=N, offset=off)
        return cls(
            config,
            bank,
            X=rec["patches"].copy(),
            labels=rec["label"],
            views=rec["view"],
            lhat=rec["lhat"],
            coeff=rec["coeff"].copy(),
            present=rec["present"].astype(bool),
            owner=rec["owner"],
            meta=header.get("meta", {}),
        )

    def save(self, path) -> str:
        raw = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(raw)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def sample_dataset(cfg: DistributionConfig, bank: FeatureBank, N: int, seed: int, stream: int = 0) -> Dataset:
    """N independent draws; sample i uses its own generator seeded by (seed, stream, i).

    Distinct ``stream`` values give independent sets (e.g. train vs test).
    """
    if N < 1:
        raise InvalidParameterError(f"N must be >= 1, got {N}")
    cfg = cfg.resolved()
    points = [sample_datapoint(cfg, bank, np.random.default_rng([seed, stream, i])) for i in range(N)]
    return Dataset.from_points(cfg, bank, points, meta={"seed": int(seed), "stream": int(stream)})


def sample_simplified(k: int, mu: float, N: int, bank: FeatureBank, seed: int, P: Optional[int] = None, stream: int = 0) -> Dataset:
    """The idealized two-feature-per-class distribution.

    Each class feature appears with weight exactly 1 on a single patch: both
    with probability 1 - mu, only one (each with mu/2) otherwise.  No
    off-class features, no noise.
    """
    if N < 1:
        raise InvalidParameterError(f"N must be >= 1, got {N}")
    if not 0.0 <= mu <= 1.0:
        raise InvalidParameterError(f"mu={mu} outside [0, 1]")
    if bank.k != k:
        raise ContractError(f"bank has k={bank.k}, expected {k}")
    P = P if P is not None else max(2, k * k)
    cfg = DistributionConfig(
        k=k, d=bank.d, P=P, C_p=1, s=0.0, mu=mu, gamma=0.0, rho=0.0, noise_std=0.0,
        main_coeff_range=(1.0, 1.0), seed=seed, mode="simplified",
    )
    cfg.validate()
    points = []
    for i in range(N):
        rng = np.random.default_rng([seed, stream, i])
        y = int(rng.integers(k))
        single = rng.random() < mu
        lhat = int(rng.integers(1, 3)) if single else 0
        slots = [lhat - 1] if single else [0, 1]
        perm = rng.permutation(P)
        X = np.zeros((P, bank.d))
        assignment, sums = {}, {}
        for n, l in enumerate(slots):
            X[perm[n]] = bank.vector(y, l)
            assignment[(y, l)] = frozenset([int(perm[n])])
            sums[(y, l)] = 1.0
        points.append(
            DataPoint(X, y, "single" if single else "multi", lhat, set(sums), sums, assignment)
        )
    return Dataset.from_points(cfg, bank, points, meta={"seed": int(seed), "stream": int(stream)})


def patch_coefficients(dp: DataPoint, bank: FeatureBank) -> dict:
    """Recover sum_p <x_p, v_{j,l}> for every feature of the bank."""
    proj = bank.vectors @ np.asarray(dp.patches).sum(axis=0)
    return {feature_key(f): float(proj[f]) for f in range(2 * bank.k)}


def coefficient_interval(cfg: DistributionConfig, view: str, lhat: int, label: int, key: tuple) -> tuple:
    """The allowed range of a present feature's coefficient sum."""
    j, l = key
    lo, hi = cfg.main_coeff_range
    if j != label:
        return (OFF_CLASS_LOW * cfg.gamma, cfg.gamma)
    if view == "single" and l != lhat - 1:
        return (cfg.rho, WEAK_HIGH * cfg.rho)
    return (lo, hi)


def check_datapoint(dp: DataPoint, cfg: DistributionConfig) -> list:
    """Return a list of human-readable violations (empty when conformant)."""
    problems = []
    seen = set()
    for key, patches in dp.patch_assignment.items():
        if seen & patches:
            problems.append(f"feature {key} overlaps another feature's patches")
        seen |= patches
        if any(p < 0 or p >= cfg.P for p in patches):
            problems.append(f"feature {key} uses a patch outside [P]")
        if len(patches) != cfg.C_p:
            problems.append(f"feature {key} occupies {len(patches)} patches, expected {cfg.C_p}")
    y = dp.label
    if (y, 0) not in dp.present_features or (y, 1) not in dp.present_features:
        problems.append("label features missing")
    for key, val in dp.coeff_sums.items():
        lo, hi = coefficient_interval(cfg, dp.view, dp.lhat, y, key)
        if not (lo - 1e-12 <= val <= hi + 1e-12):
            problems.append(f"feature {key} sum {val} outside [{lo}, {hi}]")
    return problems
