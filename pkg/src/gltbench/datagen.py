"""Synthetic dataset generator with class-wise and attribute-wise long tails.

Every sample is built additively from one class direction, the directions of
its attributes, and isotropic gaussian noise:

    x = mu[y] + sum_a nu[a] + sigma * eps

The K class directions and A attribute directions are rows of a jointly
orthonormal set, so with sigma = 0 nearest-class-direction classification is
exact by construction. Class counts follow a configurable head/tail envelope;
attribute draws follow per-class long-tailed conditionals whose layout rotates
with the class index, so each attribute is frequent for some classes and rare
for others. An optional spurious knob boosts one (class, attribute) pair.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError

GLTD_MAGIC = b"GLTD"
GLTD_VERSION = 1

CLASS_SHAPES = ("exponential", "pareto")
REGIMES = ("single", "multi")

# Frequency masses of the top/middle/bottom attribute groups, mirroring a
# 70/20/10 three-way smoothing; within each group frequencies decay
# geometrically by ATTR_DECAY.
ATTR_GROUP_MASSES = (0.70, 0.20, 0.10)
ATTR_DECAY = 0.8


@dataclass(frozen=True, eq=False)
class GenConfig:
    """Full recipe for one synthetic dataset; generation is a pure function of it."""

    n_classes: int
    n_attributes: int
    feat_dim: int
    class_imbalance_ratio: float
    samples_head: int
    seed: int
    class_shape: str = "exponential"
    attr_profile: Optional[np.ndarray] = None  # (K, A) row-stochastic override
    spurious: Optional[tuple[int, int, float]] = None  # (class, attribute, strength)
    noise_sigma: float = 0.1
    regime: str = "single"
    multi_mean: float = 3.0  # expected attributes per sample (multi regime)
    extra_per_class: int = 0  # reserve on top of the class prior, for split carving
    attr_class_overlap: float = 0.0  # lambda: attribute-direction mass inside class span
    confusable_cos: float = 0.0  # cosine between the two classes of a confusable pair
    confusable_stride: int = 1  # rank distance between pair members (prior skew knob)

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.n_attributes < 1:
            raise ConfigError("n_attributes must be >= 1")
        if self.feat_dim < self.n_classes + self.n_attributes:
            raise ConfigError(
                f"feat_dim must be >= n_classes + n_attributes "
                f"({self.n_classes + self.n_attributes}), got {self.feat_dim}"
            )
        if self.class_imbalance_ratio < 1.0:
            raise ConfigError("class_imbalance_ratio must be >= 1")
        if self.samples_head < self.class_imbalance_ratio:
            raise ConfigError("samples_head must be >= class_imbalance_ratio")
        if self.class_shape not in CLASS_SHAPES:
            raise ConfigError(f"class_shape must be one of {CLASS_SHAPES}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.extra_per_class < 0:
            raise ConfigError("extra_per_class must be >= 0")
        if not (0.0 <= self.attr_class_overlap < 1.0):
            # strict < 1 keeps noiseless nearest-class-direction decoding exact:
            # |<nu_a, mu_j - mu_y>| <= lambda * ||mu_j - mu_y|| < 2
            raise ConfigError("attr_class_overlap must be in [0, 1)")
        if not (0.0 <= self.confusable_cos < 1.0):
            raise ConfigError("confusable_cos must be in [0, 1)")
        if self.confusable_stride < 1:
            raise ConfigError("confusable_stride must be >= 1")
        if self.attr_profile is not None:
            prof = np.asarray(self.attr_profile, dtype=np.float64)
            if prof.shape != (self.n_classes, self.n_attributes):
                raise ConfigError(
                    f"attr_profile must have shape (n_classes, n_attributes), got {prof.shape}"
                )
            if (prof < 0).any():
                raise ConfigError("attr_profile entries must be nonnegative")
            if not np.allclose(prof.sum(axis=1), 1.0, atol=1e-9):
                raise ConfigError("attr_profile rows must each sum to 1")
            object.__setattr__(self, "attr_profile", prof)
        if self.spurious is not None:
            k, a, s = self.spurious
            if not (0 <= int(k) < self.n_classes):
                raise ConfigError("spurious class index out of range")
            if not (0 <= int(a) < self.n_attributes):
                raise ConfigError("spurious attribute index out of range")
            if s < 0:
                raise ConfigError("spurious strength must be >= 0")
            object.__setattr__(self, "spurious", (int(k), int(a), float(s)))

    def to_dict(self) -> dict:
        d = {
            "n_classes": self.n_classes,
            "n_attributes": self.n_attributes,
            "feat_dim": self.feat_dim,
            "class_imbalance_ratio": self.class_imbalance_ratio,
            "samples_head": self.samples_head,
            "seed": self.seed,
            "class_shape": self.class_shape,
            "attr_profile": None if self.attr_profile is None else self.attr_profile.tolist(),
            "spurious": None if self.spurious is None else list(self.spurious),
            "noise_sigma": self.noise_sigma,
            "regime": self.regime,
            "multi_mean": self.multi_mean,
            "extra_per_class": self.extra_per_class,
            "attr_class_overlap": self.attr_class_overlap,
            "confusable_cos": self.confusable_cos,
            "confusable_stride": self.confusable_stride,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        required = ("n_classes", "n_attributes", "feat_dim", "class_imbalance_ratio",
                    "samples_head", "seed")
        for name in required:
            if name not in d:
                raise ConfigError(f"missing required config field: {name}")
        known = set(required) | {"class_shape", "attr_profile", "spurious", "noise_sigma",
                                 "regime", "multi_mean", "extra_per_class",
                                 "attr_class_overlap", "confusable_cos",
                                 "confusable_stride"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if kwargs.get("attr_profile") is not None:
            kwargs["attr_profile"] = np.asarray(kwargs["attr_profile"], dtype=np.float64)
        if kwargs.get("spurious") is not None:
            kwargs["spurious"] = tuple(kwargs["spurious"])
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    x: np.ndarray
    y: int
    attrs: object  # int attribute index (single) or 0/1 uint8 vector (multi)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable sample store. Arrays are the storage; Sample views are derived."""

    X: np.ndarray  # (n, D) float32
    y: np.ndarray  # (n,) int64
    attrs: np.ndarray  # (n,) int64 or (n, A) uint8
    regime: str
    n_classes: int
    n_attributes: int
    gen_config: Optional[GenConfig] = None
    class_dirs: Optional[np.ndarray] = None  # (K, D) float64
    attr_dirs: Optional[np.ndarray] = None  # (A, D) float64

    def __post_init__(self):
        self.X.setflags(write=False)
        self.y.setflags(write=False)
        self.attrs.setflags(write=False)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.X.shape[1]

    def sample(self, i: int) -> Sample:
        attrs = int(self.attrs[i]) if self.regime == "single" else self.attrs[i]
        return Sample(id=i, x=self.X[i], y=int(self.y[i]), attrs=attrs)

    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.y == k) for k in range(self.n_classes)]

    def attr_matrix(self) -> np.ndarray:
        """Attributes as an (n, A) 0/1 float64 matrix (one-hot in the single regime)."""
        if self.regime == "multi":
            return self.attrs.astype(np.float64)
        out = np.zeros((len(self), self.n_attributes), dtype=np.float64)
        out[np.arange(len(self)), self.attrs] = 1.0
        return out

    def save(self, path) -> None:
        write_gltd(self, path)

    @classmethod
    def load(cls, path, config_path=None) -> "Dataset":
        return read_gltd(path, config_path=config_path)


def build_class_prior(n_classes: int, ratio: float, shape: str, samples_head: int) -> np.ndarray:
    """Per-class sample counts from head to tail.

    The head class gets ``samples_head`` and the tail class
    ``round(samples_head / ratio)``; intermediate classes interpolate
    geometrically (exponential) or by a power law in rank (pareto).
    """
    if n_classes < 1:
        raise ConfigError("n_classes must be >= 1")
    if ratio < 1.0:
        raise ConfigError("ratio must be >= 1")
    if samples_head < ratio:
        raise ConfigError("samples_head must be >= ratio")
    if shape not in CLASS_SHAPES:
        raise ConfigError(f"shape must be one of {CLASS_SHAPES}")
    tail = int(round(samples_head / ratio))
    if tail < 1:
        raise ConfigError("ratio produces an empty tail class")
    if n_classes == 1:
        return np.array([samples_head], dtype=np.int64)
    ranks = np.arange(n_classes, dtype=np.float64)
    if shape == "exponential":
        r = ratio ** (-1.0 / (n_classes - 1))
        counts = samples_head * r ** ranks
    else:
        a = np.log(ratio) / np.log(n_classes)
        counts = samples_head * (ranks + 1.0) ** (-a)
    counts = np.round(counts).astype(np.int64)
    counts[0] = samples_head
    counts[-1] = tail
    counts = np.maximum.accumulate(counts[::-1])[::-1]  # enforce monotone nonincreasing
    if (counts < 1).any():
        raise ConfigError("class prior produced an empty class")
    return counts


def attr_base_profile(n_attributes: int) -> np.ndarray:
    """Long-tailed base attribute profile.

    Attributes split into top/middle/bottom groups of near-equal size (extras
    go to the earlier groups) holding 70/20/10 percent of the mass; within a
    group, frequencies decay geometrically.
    """
    A = n_attributes
    sizes = [A // 3 + (1 if i < A % 3 else 0) for i in range(3)]
    profile = np.empty(A, dtype=np.float64)
    pos = 0
    for mass, size in zip(ATTR_GROUP_MASSES, sizes):
        if size == 0:
            continue
        w = ATTR_DECAY ** np.arange(size)
        profile[pos:pos + size] = mass * w / w.sum()
        pos += size
    if pos < A:  # A < 3: whatever groups exist absorb the leftover mass
        profile = profile[:pos]
    return profile / profile.sum()


def pair_structure(n_classes: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Confusable-pair layout: class k is paired with class k + stride inside
    blocks of 2 * stride consecutive ranks.

    Returns (pair id per class, second-member flag per class). With a monotone
    class prior, stride controls the head/tail skew inside each pair. Classes
    in an incomplete trailing block stay unpaired (pair id -1 for both arrays'
    purposes they keep a unique id with second=False).
    """
    pair_id = np.empty(n_classes, dtype=np.int64)
    second = np.zeros(n_classes, dtype=bool)
    next_pair = 0
    block = 2 * stride
    for b in range(0, n_classes, block):
        size = min(block, n_classes - b)
        if size < block:
            for i in range(size):  # incomplete block: no partners
                pair_id[b + i] = next_pair
                next_pair += 1
            break
        for i in range(stride):
            pair_id[b + i] = next_pair + i
            pair_id[b + stride + i] = next_pair + i
            second[b + stride + i] = True
        next_pair += stride
    return pair_id, second


def default_attr_profile(n_classes: int, n_attributes: int,
                         stride: int = 1) -> np.ndarray:
    """Per-class attribute profiles: the base envelope rotated per pair, with
    the two members of a confusable pair rotated half a turn apart.

    The rotation makes the attribute layout class-dependent (each attribute is
    a head attribute for some classes and a tail one for others). The
    anti-phase offset inside a pair means the classes tied together when
    ``confusable_cos`` > 0 have maximally different attribute mixes, so
    attribute identity is the natural (but non-robust) cue for telling a pair
    apart.
    """
    base = attr_base_profile(n_attributes)
    pair_id, second = pair_structure(n_classes, stride)
    rows = []
    for k in range(n_classes):
        roll = int(pair_id[k]) % n_attributes
        if second[k]:
            roll = (roll + n_attributes // 2) % n_attributes
        rows.append(np.roll(base, roll))
    return np.stack(rows)


def build_attribute_conditional(cfg: GenConfig) -> np.ndarray:
    """(K, A) row-stochastic matrix p(attribute | class), spurious knob applied."""
    if cfg.attr_profile is not None:
        cond = cfg.attr_profile.copy()
    else:
        cond = default_attr_profile(cfg.n_classes, cfg.n_attributes,
                                    cfg.confusable_stride)
    if cfg.spurious is not None:
        k, a, s = cfg.spurious
        cond[k, a] *= 1.0 + s
        cond[k] /= cond[k].sum()
    return cond


def _gram_schmidt(M: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on the rows; returns an orthonormal copy."""
    if M.shape[0] > M.shape[1]:
        raise ConfigError("cannot orthonormalize more directions than dimensions")
    M = M.astype(np.float64, copy=True)
    for i in range(M.shape[0]):
        for j in range(i):
            M[i] -= (M[i] @ M[j]) * M[j]
        norm = np.linalg.norm(M[i])
        if norm < 1e-12:
            raise ArithmeticError("degenerate direction draw")
        M[i] /= norm
    return M


def draw_directions(n_rows: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Random gaussian rows orthonormalized jointly by modified Gram-Schmidt."""
    return _gram_schmidt(rng.standard_normal((n_rows, dim)))


def synth_sample(class_dirs: np.ndarray, attr_dirs: np.ndarray, k: int, attrs,
                 noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """One feature vector: class direction + attribute directions + noise."""
    x = class_dirs[k].copy()
    for a in np.atleast_1d(attrs):
        x += attr_dirs[int(a)]
    if noise_sigma > 0.0:
        x += noise_sigma * rng.standard_normal(class_dirs.shape[1])
    return x


def _rng_streams(cfg: GenConfig) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(cfg.seed)
    dirs_ss, draw_ss = ss.spawn(2)
    return np.random.default_rng(dirs_ss), np.random.default_rng(draw_ss)


def _dataset_directions(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class directions (orthonormal) and attribute directions with a
    controlled class-evidence component.

    Each attribute direction is a unit vector

        nu_a = sqrt(1 - lambda^2) * g_perp + lambda * u_a,

    where g_perp is a random unit direction orthogonal to the class span and
    u_a is the normalized conditional-frequency-weighted mix of the class
    directions that carry attribute a. That makes an attribute genuine (but
    non-robust) evidence for the classes it co-occurs with: the
    frequent-attribute-implies-class shortcut exists in the input geometry,
    not only in finite-sample noise. lambda < 1 keeps noiseless
    nearest-class-direction decoding exact, since
    |<nu_a, mu_j - mu_y>| <= lambda * ||mu_j - mu_y|| = lambda * sqrt(2) < 2.
    """
    rng_dirs, _ = _rng_streams(cfg)
    K, A, D = cfg.n_classes, cfg.n_attributes, cfg.feat_dim
    raw = rng_dirs.standard_normal((K + A, D))
    basis = _gram_schmidt(raw[:K])
    mu = basis.copy()
    c = cfg.confusable_cos
    if c > 0.0 and K >= 2:
        # paired classes share class components: their directions get cosine
        # similarity c. Margins stay positive (2 * (1 - c) > 0), so noiseless
        # nearest-direction decoding remains exact; what changes is that
        # separating a pair under noise now genuinely needs secondary
        # evidence, which is where the pair's anti-phase attribute mixes enter.
        pair_id, secondary = pair_structure(K, cfg.confusable_stride)
        s = np.sqrt(1.0 - c * c)
        first_of = {}
        for k in range(K):
            if not secondary[k]:
                first_of[int(pair_id[k])] = k
        for k in range(K):
            if secondary[k]:
                mu[k] = c * mu[first_of[int(pair_id[k])]] + s * mu[k]
    lam = cfg.attr_class_overlap
    cond = build_attribute_conditional(cfg)
    nu = np.empty((A, D))
    for a in range(A):
        g = raw[K + a]
        g_perp = g - (g @ basis.T) @ basis  # off span(mu); basis spans it exactly
        norm = np.linalg.norm(g_perp)
        if norm < 1e-12:
            raise ArithmeticError("degenerate attribute direction draw")
        g_perp /= norm
        u = cond[:, a] @ mu
        u /= np.linalg.norm(u)
        nu[a] = np.sqrt(1.0 - lam * lam) * g_perp + lam * u
    return mu, nu


def generate(cfg: GenConfig) -> Dataset:
    """Generate the dataset described by ``cfg``; bit-identical for equal configs."""
    K, A, D = cfg.n_classes, cfg.n_attributes, cfg.feat_dim
    counts = build_class_prior(K, cfg.class_imbalance_ratio, cfg.class_shape,
                               cfg.samples_head)
    counts = counts + cfg.extra_per_class
    cond = build_attribute_conditional(cfg)
    mu, nu = _dataset_directions(cfg)
    _, rng = _rng_streams(cfg)

    blocks_x, blocks_attr = [], []
    for k in range(K):
        n_k = int(counts[k])
        if cfg.regime == "single":
            attrs_k = rng.choice(A, size=n_k, p=cond[k])
            contrib = nu[attrs_k]
        else:
            rates = np.minimum(cond[k] * cfg.multi_mean, 0.95)
            attrs_k = (rng.random((n_k, A)) < rates).astype(np.uint8)
            contrib = attrs_k.astype(np.float64) @ nu
        x_k = mu[k] + contrib
        if cfg.noise_sigma > 0.0:
            x_k = x_k + cfg.noise_sigma * rng.standard_normal((n_k, D))
        blocks_x.append(x_k)
        blocks_attr.append(attrs_k)

    X = np.concatenate(blocks_x).astype(np.float32)
    y = np.repeat(np.arange(K, dtype=np.int64), counts)
    if cfg.regime == "single":
        attrs = np.concatenate(blocks_attr).astype(np.int64)
    else:
        attrs = np.concatenate(blocks_attr).astype(np.uint8)
    return Dataset(X=X, y=y, attrs=attrs, regime=cfg.regime, n_classes=K,
                   n_attributes=A, gen_config=cfg, class_dirs=mu, attr_dirs=nu)


# ---------------------------------------------------------------------------
# GLTD file format
#
# Header: magic "GLTD", version u16, n_samples u32, D u16, K u16, A u16,
# regime u8 (0 single / 1 multi). Records: id u32, y u16, attr payload
# (u16 attribute index, or A bytes of 0/1 flags in the multi regime),
# D little-endian f32 features.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHIHHHB")


def write_gltd(ds: Dataset, path) -> None:
    n, D = ds.X.shape
    regime_code = 0 if ds.regime == "single" else 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GLTD_MAGIC, GLTD_VERSION, n, D, ds.n_classes,
                              ds.n_attributes, regime_code))
        ids = np.arange(n, dtype="<u4")
        ys = ds.y.astype("<u2")
        feats = ds.X.astype("<f4")
        if ds.regime == "single":
            payload = ds.attrs.astype("<u2")
            rec = np.dtype([("id", "<u4"), ("y", "<u2"), ("attr", "<u2"),
                            ("x", "<f4", (D,))])
            out = np.empty(n, dtype=rec)
            out["attr"] = payload
        else:
            rec = np.dtype([("id", "<u4"), ("y", "<u2"),
                            ("attr", "u1", (ds.n_attributes,)), ("x", "<f4", (D,))])
            out = np.empty(n, dtype=rec)
            out["attr"] = ds.attrs
        out["id"] = ids
        out["y"] = ys
        out["x"] = feats
        fh.write(out.tobytes())


def read_gltd(path, config_path=None) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ConfigError(f"truncated GLTD header in {path}")
        magic, version, n, D, K, A, regime_code = _HEADER.unpack(head)
        if magic != GLTD_MAGIC:
            raise ConfigError(f"not a GLTD file: {path}")
        if version != GLTD_VERSION:
            raise ConfigError(f"unsupported GLTD version {version}")
        regime = "single" if regime_code == 0 else "multi"
        if regime == "single":
            rec = np.dtype([("id", "<u4"), ("y", "<u2"), ("attr", "<u2"),
                            ("x", "<f4", (D,))])
        else:
            rec = np.dtype([("id", "<u4"), ("y", "<u2"), ("attr", "u1", (A,)),
                            ("x", "<f4", (D,))])
        raw = np.frombuffer(fh.read(), dtype=rec, count=n)
    order = np.argsort(raw["id"], kind="stable")
    X = np.ascontiguousarray(raw["x"][order]).astype(np.float32)
    y = raw["y"][order].astype(np.int64)
    if regime == "single":
        attrs = raw["attr"][order].astype(np.int64)
    else:
        attrs = np.ascontiguousarray(raw["attr"][order]).astype(np.uint8)

    cfg = mu = nu = None
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            cfg = GenConfig.from_dict(json.load(fh))
        if (cfg.n_classes, cfg.n_attributes, cfg.feat_dim) != (K, A, D):
            raise ConfigError("config JSON does not match GLTD header dimensions")
        mu, nu = _dataset_directions(cfg)
    return Dataset(X=X, y=y, attrs=attrs, regime=regime, n_classes=K,
                   n_attributes=A, gen_config=cfg, class_dirs=mu, attr_dirs=nu)
