"""Benchmark split construction for the CLT / ALT / GLT protocols.

Four splits are carved disjointly (within a protocol) out of one generated
pool: Train-GLT (class long tail), Train-CBL (class balanced, attributes
i.i.d.), Test-CBL (class balanced, attributes i.i.d.) and Test-GBL (balanced
over classes and attributes). Attribute balance in Test-GBL comes either from
a per-(class, cluster) grid over KMeans pretext attributes, or from a greedy
std-minimizing subset when samples carry multi-label attributes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .datagen import Dataset
from .errors import ConfigError, ProtocolError

TRAIN_GLT = "TrainGLT"
TRAIN_CBL = "TrainCBL"
TEST_CBL = "TestCBL"
TEST_GBL = "TestGBL"
SPLIT_NAMES = (TRAIN_GLT, TRAIN_CBL, TEST_CBL, TEST_GBL)

CLT, ALT, GLT = "CLT", "ALT", "GLT"
PROTOCOLS = (CLT, ALT, GLT)

# (protocol) -> (train split name, test split name)
PROTOCOL_PAIRS = {CLT: (TRAIN_GLT, TEST_CBL), ALT: (TRAIN_CBL, TEST_GBL),
                  GLT: (TRAIN_GLT, TEST_GBL)}

MANY_C, MEDIUM_C, FEW_C = "Many_C", "Medium_C", "Few_C"
MANY_A, MEDIUM_A, FEW_A = "Many_A", "Medium_A", "Few_A"


@dataclass(frozen=True, eq=False)
class Split:
    name: str
    sample_ids: np.ndarray  # int64, ordered
    protocol_tag: str

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split name {self.name!r}")
        if self.protocol_tag not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol_tag!r}")
        object.__setattr__(self, "sample_ids",
                           np.asarray(self.sample_ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.sample_ids)

    def to_dict(self) -> dict:
        return {"name": self.name, "protocol": self.protocol_tag,
                "sample_ids": self.sample_ids.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        for key in ("name", "protocol", "sample_ids"):
            if key not in d:
                raise ConfigError(f"split file missing field: {key}")
        return cls(name=d["name"], sample_ids=np.asarray(d["sample_ids"]),
                   protocol_tag=d["protocol"])

    def save(self, path, extra: Optional[dict] = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Split":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Per-class KMeans clusters over raw features (the pretext attributes)."""

    n_clusters: int
    centroids: dict  # class -> (n_clusters, D) float64
    labels: np.ndarray  # (n,) int64 cluster index of every pool sample

    def cell_indices(self, dataset: Dataset, klass: int, cluster: int) -> np.ndarray:
        return np.flatnonzero((dataset.y == klass) & (self.labels == cluster))


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    converged: bool
    n_iter: int
    inertia_history: np.ndarray


@dataclass(frozen=True, eq=False)
class Strata:
    """Class and attribute stratum maps for one protocol's reporting."""

    class_stratum: dict  # class -> Many_C / Medium_C / Few_C
    attr_stratum: dict  # (class, cluster) -> Many_A / Medium_A / Few_A; may be empty
    thresholds: tuple = (100, 20)
    cluster_labels: Optional[dict] = None  # sample id -> cluster, for eval

    def to_dict(self) -> dict:
        return {
            "class_stratum": {str(k): v for k, v in sorted(self.class_stratum.items())},
            "attr_stratum": {f"{k}:{c}": v for (k, c), v in sorted(self.attr_stratum.items())},
            "thresholds": list(self.thresholds),
            "cluster_labels": None if self.cluster_labels is None else
                {str(i): int(c) for i, c in sorted(self.cluster_labels.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Strata":
        attr = {}
        for key, v in d.get("attr_stratum", {}).items():
            k, c = key.split(":")
            attr[(int(k), int(c))] = v
        labels = d.get("cluster_labels")
        if labels is not None:
            labels = {int(i): int(c) for i, c in labels.items()}
        return cls(class_stratum={int(k): v for k, v in d["class_stratum"].items()},
                   attr_stratum=attr, thresholds=tuple(d.get("thresholds", (100, 20))),
                   cluster_labels=labels)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Strata":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def kmeans(features, k: int, seed: int, max_iters: int = 100,
           tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding; deterministic given seed.

    Empty clusters are repaired by reseeding to the farthest point. The
    ``converged`` flag is False when ``max_iters`` was exhausted before the
    total centroid shift fell below ``tol``.
    """
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("kmeans expects an (n, D) feature array")
    n = X.shape[0]
    if not (1 <= k <= n):
        raise ConfigError(f"kmeans needs 1 <= k <= n; got k={k}, n={n}")
    if not np.isfinite(X).all():
        raise ConfigError("kmeans features must be finite")
    rng = np.random.default_rng(seed)
    C0 = _kmeans_pp(X, k, rng)
    labels, C, history, converged = _kernels.lloyd(X, C0, max_iters, tol)
    return KMeansResult(labels=np.asarray(labels), centroids=np.asarray(C),
                        converged=bool(converged), n_iter=len(history),
                        inertia_history=np.asarray(history))


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            chosen[j] = rng.integers(n)
        else:
            chosen[j] = rng.choice(n, p=d2 / total)
        d2 = np.minimum(d2, ((X - X[chosen[j]]) ** 2).sum(axis=1))
    return X[chosen].copy()


def build_cluster_model(dataset: Dataset, n_clusters: int, seed: int) -> ClusterModel:
    """Per-class KMeans over the raw generated features of the whole pool."""
    labels = np.full(len(dataset), -1, dtype=np.int64)
    centroids = {}
    ss = np.random.SeedSequence(seed).spawn(dataset.n_classes)
    for k, idx in enumerate(dataset.class_indices()):
        sub_seed = int(ss[k].generate_state(1)[0])
        res = kmeans(dataset.X[idx].astype(np.float64), n_clusters, sub_seed)
        labels[idx] = res.labels
        centroids[k] = res.centroids
    return ClusterModel(n_clusters=n_clusters, centroids=centroids, labels=labels)


def _candidates_by_class(dataset: Dataset, exclude) -> list[np.ndarray]:
    mask = np.ones(len(dataset), dtype=bool)
    if exclude is not None:
        mask[np.asarray(list(exclude), dtype=np.int64)] = False
    return [np.flatnonzero((dataset.y == k) & mask) for k in range(dataset.n_classes)]


def _sample_per_class(dataset: Dataset, counts, rng, exclude, split_name, protocol):
    ids = []
    for k, pool in enumerate(_candidates_by_class(dataset, exclude)):
        want = int(counts[k])
        if len(pool) < want:
            raise ConfigError(
                f"class {k} has {len(pool)} available samples, "
                f"but {split_name} requests {want}")
        take = rng.choice(pool, size=want, replace=False)
        ids.append(np.sort(take))
    return Split(name=split_name, sample_ids=np.concatenate(ids), protocol_tag=protocol)


def make_train_glt(dataset: Dataset, prior_counts, rng, exclude=None,
                   protocol: str = CLT) -> Split:
    """Class-long-tailed training split: per-class counts follow the prior."""
    return _sample_per_class(dataset, prior_counts, rng, exclude, TRAIN_GLT, protocol)


def make_train_cbl(dataset: Dataset, per_class_n: int, rng, exclude=None) -> Split:
    """Class-balanced training split; attributes stay i.i.d. (long-tailed)."""
    counts = [per_class_n] * dataset.n_classes
    return _sample_per_class(dataset, counts, rng, exclude, TRAIN_CBL, ALT)


def make_test_cbl(dataset: Dataset, per_class_n: int, rng, exclude=None) -> Split:
    """Class-balanced, attribute-long-tailed test split (i.i.d. within class)."""
    counts = [per_class_n] * dataset.n_classes
    return _sample_per_class(dataset, counts, rng, exclude, TEST_CBL, CLT)


def make_test_gbl_grid(dataset: Dataset, clusters: ClusterModel, per_cell: int,
                       rng, exclude=None, protocol: str = GLT) -> Split:
    """Test split with exactly q samples per (class, cluster) cell.

    q = min(per_cell, smallest cell); when clipping happens the affected
    cells are reported in a warning. An empty cell is a hard error.
    """
    mask = np.ones(len(dataset), dtype=bool)
    if exclude is not None:
        mask[np.asarray(list(exclude), dtype=np.int64)] = False
    cells = {}
    for k in range(dataset.n_classes):
        for c in range(clusters.n_clusters):
            cell = np.flatnonzero((dataset.y == k) & (clusters.labels == c) & mask)
            if len(cell) == 0:
                raise ConfigError(f"empty (class={k}, cluster={c}) cell in Test-GBL grid")
            cells[(k, c)] = cell
    q = min(per_cell, min(len(v) for v in cells.values()))
    if q < per_cell:
        clipped = sorted(kc for kc, v in cells.items() if len(v) < per_cell)
        warnings.warn(f"Test-GBL per-cell quota clipped to {q}; short cells: {clipped}")
    ids = [np.sort(rng.choice(cells[(k, c)], size=q, replace=False))
           for k in range(dataset.n_classes) for c in range(clusters.n_clusters)]
    return Split(name=TEST_GBL, sample_ids=np.concatenate(ids), protocol_tag=protocol)


def make_test_gbl_greedy(dataset: Dataset, per_class_n: int, exclude=None,
                         protocol: str = GLT) -> Split:
    """Test split greedily minimizing the std of the per-class attribute mix.

    Per class, one sample is added per round: the candidate minimizing the
    standard deviation of the running attribute-count vector normalized by
    its sum, with ties broken by the lowest sample id. Already-selected
    samples never re-enter the scan.
    """
    attr = dataset.attr_matrix()
    ids = []
    for k, pool in enumerate(_candidates_by_class(dataset, exclude)):
        if len(pool) < per_class_n:
            raise ConfigError(
                f"class {k} has {len(pool)} available samples, "
                f"but Test-GBL requests {per_class_n}")
        rows = np.ascontiguousarray(attr[pool])  # pool is id-ascending
        selected = np.zeros(len(pool), dtype=np.uint8)
        zdist = np.zeros(dataset.n_attributes, dtype=np.float64)
        picked = []
        for _ in range(per_class_n):
            idx, _std = _kernels.gbl_scan(rows, zdist, selected)
            selected[idx] = 1
            zdist += rows[idx]
            picked.append(pool[idx])
        ids.append(np.sort(np.asarray(picked, dtype=np.int64)))
    return Split(name=TEST_GBL, sample_ids=np.concatenate(ids), protocol_tag=protocol)


def _third_sizes(k: int) -> list[int]:
    return [k // 3 + (1 if i < k % 3 else 0) for i in range(3)]


def stratify(dataset: Dataset, split: Split, clusters: Optional[ClusterModel],
             class_thresholds: tuple = (100, 20)) -> Strata:
    """Class strata from split class counts; attribute strata from cluster ranks.

    Classes: Many_C above the first threshold, Few_C below the second,
    Medium_C between them (inclusive on both ends). Clusters are ranked per
    class by their frequency inside the split and partitioned into
    top/middle/bottom thirds (2/2/2 when there are six clusters).
    """
    many_gt, few_lt = class_thresholds
    counts = np.bincount(dataset.y[split.sample_ids], minlength=dataset.n_classes)
    class_stratum = {}
    for k in range(dataset.n_classes):
        c = int(counts[k])
        if c > many_gt:
            class_stratum[k] = MANY_C
        elif c >= few_lt:
            class_stratum[k] = MEDIUM_C
        else:
            class_stratum[k] = FEW_C

    attr_stratum = {}
    cluster_labels = None
    if clusters is not None:
        names = (MANY_A, MEDIUM_A, FEW_A)
        sizes = _third_sizes(clusters.n_clusters)
        split_y = dataset.y[split.sample_ids]
        split_c = clusters.labels[split.sample_ids]
        for k in range(dataset.n_classes):
            freq = np.bincount(split_c[split_y == k], minlength=clusters.n_clusters)
            order = np.lexsort((np.arange(clusters.n_clusters), -freq))
            pos = 0
            for name, size in zip(names, sizes):
                for c in order[pos:pos + size]:
                    attr_stratum[(k, int(c))] = name
                pos += size
        cluster_labels = {int(i): int(clusters.labels[i])
                          for i in range(len(dataset)) if clusters.labels[i] >= 0}
    return Strata(class_stratum=class_stratum, attr_stratum=attr_stratum,
                  thresholds=class_thresholds, cluster_labels=cluster_labels)


@dataclass(frozen=True, eq=False)
class BenchmarkSplits:
    """All four splits plus per-protocol strata, carved from one pool."""

    splits: dict  # (protocol, split name) -> Split
    strata: dict  # protocol -> Strata
    clusters: Optional[ClusterModel]

    def pair(self, protocol: str) -> tuple[Split, Split]:
        train_name, test_name = PROTOCOL_PAIRS[protocol]
        return self.splits[(protocol, train_name)], self.splits[(protocol, test_name)]


@dataclass(frozen=True)
class SplitParams:
    test_cbl_per_class: int = 30
    train_cbl_per_class: int = 60
    gbl_per_cell: int = 5
    gbl_per_class: Optional[int] = None  # greedy budget (multi regime); default: grid total
    n_clusters: int = 6
    class_thresholds: tuple = (100, 20)


def build_benchmark(dataset: Dataset, prior_counts, params: SplitParams,
                    seed: int) -> BenchmarkSplits:
    """Carve Test-CBL, Test-GBL, Train-GLT and Train-CBL (in that order).

    Both training splits are disjoint from both test splits; the test splits
    are disjoint from each other. Each protocol gets its own strata derived
    from its training split.
    """
    ss = np.random.SeedSequence(seed).spawn(4)
    rng_tcbl, rng_gbl, rng_tglt, rng_tcblr = (np.random.default_rng(s) for s in ss)

    clusters = None
    test_cbl = make_test_cbl(dataset, params.test_cbl_per_class, rng_tcbl)
    taken = set(test_cbl.sample_ids.tolist())
    if dataset.regime == "single":
        clusters = build_cluster_model(dataset, params.n_clusters, seed)
        test_gbl = make_test_gbl_grid(dataset, clusters, params.gbl_per_cell,
                                      rng_gbl, exclude=taken)
    else:
        per_class = params.gbl_per_class
        if per_class is None:
            per_class = params.gbl_per_cell * params.n_clusters
        test_gbl = make_test_gbl_greedy(dataset, per_class, exclude=taken)
    taken |= set(test_gbl.sample_ids.tolist())

    train_glt = make_train_glt(dataset, prior_counts, rng_tglt, exclude=taken)
    train_cbl = make_train_cbl(dataset, params.train_cbl_per_class, rng_tcblr,
                               exclude=taken)

    splits = {}
    for protocol in PROTOCOLS:
        train_name, test_name = PROTOCOL_PAIRS[protocol]
        base = {TRAIN_GLT: train_glt, TRAIN_CBL: train_cbl,
                TEST_CBL: test_cbl, TEST_GBL: test_gbl}
        for name in (train_name, test_name):
            s = base[name]
            splits[(protocol, name)] = Split(name=name, sample_ids=s.sample_ids,
                                             protocol_tag=protocol)
    strata = {}
    for protocol in PROTOCOLS:
        train, _ = PROTOCOL_PAIRS[protocol]
        strata[protocol] = stratify(dataset, splits[(protocol, train)], clusters,
                                    params.class_thresholds)
    return BenchmarkSplits(splits=splits, strata=strata, clusters=clusters)


def check_protocol_pair(train_split: Split, test_split: Split) -> None:
    """Raise ProtocolError unless the two splits form a valid protocol pair."""
    if train_split.protocol_tag != test_split.protocol_tag:
        raise ProtocolError(
            f"protocol mismatch: train split is {train_split.protocol_tag}, "
            f"test split is {test_split.protocol_tag}")
    want_train, want_test = PROTOCOL_PAIRS[train_split.protocol_tag]
    if train_split.name != want_train or test_split.name != want_test:
        raise ProtocolError(
            f"{train_split.protocol_tag} protocol pairs {want_train} with "
            f"{want_test}; got {train_split.name} and {test_split.name}")
