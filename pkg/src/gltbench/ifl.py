"""Invariant feature learning: environments, centers, and the training loop.

The procedure: warm up with plain cross-entropy, then repeatedly (re)build
training environments from the model's per-sample confidence and train with
the combined objective

    L = L_cls + alpha(epoch) * L_center,

where L_center pulls each penultimate feature toward its class's
moving-average center, shared across environments. The center receives no
gradient; it is updated separately after every batch. The second environment
re-samples each class so its lowest-confidence 20% fills 80% of the slots
(a Pareto flip of the attribute mix); an optional third environment uses the
midpoint mass. Single-environment training with alpha > 0 is the vanilla
center-loss baseline; with alpha = 0 the loop is gradient-for-gradient plain
cross-entropy.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .datagen import Dataset
from .errors import ConfigError, NonFiniteError
from .nn import (ModelParams, TrainConfig, backward, ce_loss_grad, forward,
                 init_params, irm_penalty, sgd_step, SgdState, softmax,
                 crt_stage2)
from .splits import Split

ENV_TAGS = ("iid", "reversed", "extra")


@dataclass(frozen=True, eq=False)
class Environment:
    """A per-class resampled multiset of sample ids, plus how it was sampled."""

    tag: str
    per_class: dict  # class -> int64 array of sample ids (repeats allowed)
    epoch_built: int = 0

    def __post_init__(self):
        if self.tag not in ENV_TAGS:
            raise ConfigError(f"environment tag must be one of {ENV_TAGS}")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.per_class[k] for k in sorted(self.per_class)])

    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def to_dict(self) -> dict:
        return {"tag": self.tag, "epoch_built": self.epoch_built,
                "per_class": {str(k): v.tolist() for k, v in sorted(self.per_class.items())}}


@dataclass
class Centers:
    """Per-class moving-average feature centers, updated with rate eta."""

    C: np.ndarray  # (K, H)
    eta: float = 0.5

    @classmethod
    def from_features(cls, Z: np.ndarray, y: np.ndarray, n_classes: int,
                      eta: float = 0.5) -> "Centers":
        C = np.zeros((n_classes, Z.shape[1]))
        for k in range(n_classes):
            mask = y == k
            if mask.any():
                C[k] = Z[mask].mean(axis=0)
        return cls(C=C, eta=eta)


def update_centers(centers: Centers, z: np.ndarray, labels: np.ndarray,
                   eta: Optional[float] = None) -> Centers:
    """C_k <- C_k - eta * (C_k - batch mean of class k); absent classes untouched."""
    eta = centers.eta if eta is None else eta
    labels = np.asarray(labels)
    for k in np.unique(labels):
        mean_k = z[labels == k].mean(axis=0)
        centers.C[k] -= eta * (centers.C[k] - mean_k)
    return centers


def ifl_loss_grad(z: np.ndarray, y, centers: Centers, variant: str = "squared"):
    """Center-pull metric loss and its gradient on the features.

    squared: 0.5 * ||z - C_y||^2 with dz = z - C_y;
    l2: ||z - C_y|| with dz = (z - C_y) / max(||z - C_y||, 1e-8).
    Batched inputs return the mean loss and a 1/B-scaled gradient. No
    gradient flows into the centers.
    """
    if variant not in ("squared", "l2"):
        raise ConfigError("variant must be 'squared' or 'l2'")
    single = z.ndim == 1
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    yy = np.atleast_1d(np.asarray(y, dtype=np.int64))
    diff = Z - centers.C[yy]
    B = Z.shape[0]
    if variant == "squared":
        loss = float(0.5 * (diff * diff).sum(axis=1).mean())
        dz = diff / B
    else:
        norms = np.sqrt((diff * diff).sum(axis=1))
        loss = float(norms.mean())
        dz = diff / np.maximum(norms, 1e-8)[:, None] / B
    if single:
        return loss, dz[0]
    return loss, dz


@dataclass(frozen=True)
class EnvConfig:
    """Environment construction and schedule knobs."""

    n_envs: int = 2
    tail_fraction: float = 0.2
    tail_mass: float = 0.8
    warmup_epochs: Optional[int] = None  # default 60% of total epochs
    refresh_period_epochs: Optional[int] = None  # default 20% of total epochs
    alpha_schedule: Optional[list] = None  # [(epoch or fraction, alpha)]

    def __post_init__(self):
        if not (1 <= self.n_envs <= 3):
            raise ConfigError("n_envs must be 1, 2 or 3")
        if not (0.0 < self.tail_fraction < self.tail_mass < 1.0):
            raise ConfigError("need 0 < tail_fraction < tail_mass < 1")

    def resolve(self, total_epochs: int) -> tuple[int, int]:
        warmup = (self.warmup_epochs if self.warmup_epochs is not None
                  else round(0.6 * total_epochs))
        refresh = (self.refresh_period_epochs if self.refresh_period_epochs is not None
                   else max(1, round(0.2 * total_epochs)))
        return int(warmup), int(refresh)

    def to_dict(self) -> dict:
        return {"n_envs": self.n_envs, "tail_fraction": self.tail_fraction,
                "tail_mass": self.tail_mass, "warmup_epochs": self.warmup_epochs,
                "refresh_period_epochs": self.refresh_period_epochs,
                "alpha_schedule": (None if self.alpha_schedule is None
                                   else [[e, a] for e, a in self.alpha_schedule])}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if kwargs.get("alpha_schedule") is not None:
            kwargs["alpha_schedule"] = [(float(e), float(a))
                                        for e, a in kwargs["alpha_schedule"]]
        return cls(**kwargs)


def resolve_alpha(schedule, epoch: int, total_epochs: int) -> float:
    """Step schedule: the alpha of the last breakpoint at or before ``epoch``.

    Breakpoints below 1.0 are fractions of the total epoch budget.
    """
    alpha = 0.0
    for e, a in schedule:
        e_abs = e * total_epochs if 0.0 < e < 1.0 else e
        if epoch >= e_abs:
            alpha = a
    return alpha


def confidence_scores(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Softmax probability of the ground-truth class for every sample."""
    _, logits, _ = forward(params, X)
    P = softmax(logits)
    return P[np.arange(len(y)), np.asarray(y, dtype=np.int64)]


def construct_environments(sample_ids: np.ndarray, y: np.ndarray,
                           scores: np.ndarray, cfg: EnvConfig,
                           rng: np.random.Generator,
                           epoch: int = 0) -> list[Environment]:
    """Build the requested environments from per-sample confidences.

    Environment 1 is the identity i.i.d. copy. Environment 2 re-samples each
    class of size n so that ceil(tail_mass * n) slots are drawn with
    replacement from the ceil(tail_fraction * n) lowest-confidence samples
    (ties broken toward lower sample ids) and the rest without replacement
    from the complement. Environment 3 does the same with the midpoint mass.
    Classes with fewer than two samples fall back to the identity copy.
    """
    ids = np.asarray(sample_ids, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.unique(y)
    envs = [Environment(tag="iid", epoch_built=epoch,
                        per_class={int(k): ids[y == k].copy() for k in classes})]
    masses = []
    if cfg.n_envs >= 2:
        masses.append(("reversed", cfg.tail_mass))
    if cfg.n_envs >= 3:
        masses.append(("extra", (cfg.tail_mass + cfg.tail_fraction) / 2.0))
    for tag, mass in masses:
        per_class = {}
        for k in classes:
            mask = y == k
            ids_k = ids[mask]
            n = len(ids_k)
            if n < 2:
                warnings.warn(f"class {int(k)} has {n} sample(s); "
                              f"environment '{tag}' degenerates to i.i.d.")
                per_class[int(k)] = ids_k.copy()
                continue
            order = np.lexsort((ids_k, scores[mask]))
            low_n = math.ceil(cfg.tail_fraction * n)
            low_slots = math.ceil(mass * n)
            low_pool = ids_k[order[:low_n]]
            high_pool = ids_k[order[low_n:]]
            chosen_low = rng.choice(low_pool, size=low_slots, replace=True)
            chosen_high = rng.choice(high_pool, size=n - low_slots, replace=False)
            per_class[int(k)] = np.concatenate([chosen_low, chosen_high])
        envs.append(Environment(tag=tag, epoch_built=epoch, per_class=per_class))
    return envs


def dump_environments(envs: list[Environment], scores: np.ndarray, path) -> None:
    qs = np.quantile(np.asarray(scores, dtype=np.float64), [0.0, 0.2, 0.5, 0.8, 1.0])
    doc = {"confidence_quantiles": {"q0": float(qs[0]), "q20": float(qs[1]),
                                    "q50": float(qs[2]), "q80": float(qs[3]),
                                    "q100": float(qs[4])},
           "environments": [e.to_dict() for e in envs]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


@dataclass(eq=False)
class TrainResult:
    params: ModelParams
    centers: Optional[Centers]
    log: list  # one dict per epoch: epoch, lr, loss_cls, loss_ifl, alpha
    environments: Optional[list] = None  # last built environments
    class_counts: Optional[np.ndarray] = None  # train split class histogram


_ACT_IDS = {"relu": _kernels.ACT_RELU, "tanh": _kernels.ACT_TANH}

# methods that build environments and use the center metric loss
_ENV_METHODS = {"center": 1, "ifl2": 2, "ifl3": 3}


def _materialize(dataset: Dataset, split: Split):
    """Split arrays in canonical class-grouped order (stable within class)."""
    ids = split.sample_ids
    order = np.argsort(dataset.y[ids], kind="stable")
    ids = ids[order]
    X = np.ascontiguousarray(dataset.X[ids], dtype=np.float64)
    y = dataset.y[ids].copy()
    return ids, X, y


def _default_alpha_schedule() -> list:
    # desk-scale analog of the 0 -> 0.001 -> 0.005 ramp: same 1:5 ratio,
    # rescaled for unit-norm features and a short budget
    return [(0.0, 0.0), (0.6, 0.02), (0.8, 0.1)]


def train(dataset: Dataset, split: Split, train_cfg: TrainConfig,
          env_cfg: Optional[EnvConfig] = None) -> TrainResult:
    """Run one training method end to end; deterministic given the configs.

    Non-environment methods (ce, blsoftmax, focal, logitadj, crt) are plain
    single-distribution loops; environment methods (center, ifl2, ifl3, irm)
    warm up with CE and then cycle batches round-robin over the environments,
    refreshing them periodically from the current confidences.
    """
    env_cfg = env_cfg or EnvConfig()
    method = train_cfg.method
    n_envs = _ENV_METHODS.get(method, 2 if method == "irm" else 0)
    if method in _ENV_METHODS or method == "irm":
        env_cfg = EnvConfig(n_envs=n_envs, tail_fraction=env_cfg.tail_fraction,
                            tail_mass=env_cfg.tail_mass,
                            warmup_epochs=env_cfg.warmup_epochs,
                            refresh_period_epochs=env_cfg.refresh_period_epochs,
                            alpha_schedule=env_cfg.alpha_schedule)
    warmup, refresh = env_cfg.resolve(train_cfg.epochs)
    alpha_schedule = (env_cfg.alpha_schedule or train_cfg.alpha_schedule
                      or _default_alpha_schedule())

    ids, X, y = _materialize(dataset, split)
    n, D = X.shape
    K = dataset.n_classes
    class_counts = np.bincount(y, minlength=K)
    pos_of_id = np.full(int(ids.max()) + 1, -1, dtype=np.int64)
    pos_of_id[ids] = np.arange(n)

    ss = np.random.SeedSequence(train_cfg.seed).spawn(3)
    rng_init = np.random.default_rng(ss[0])
    rng_shuffle = np.random.default_rng(ss[1])
    crt_seed = int(ss[2].generate_state(1)[0])

    params = init_params(D, [train_cfg.hidden_dim], K, train_cfg.activation, rng_init)
    W1, b1 = params.hidden[0]
    W2, b2 = params.w_cls, params.b_cls
    vel = [np.zeros_like(a) for a in (W1, b1, W2, b2)]
    act_id = _ACT_IDS[train_cfg.activation]

    logit_shift = np.zeros(K)
    if method == "blsoftmax":
        logit_shift = np.log(class_counts.astype(np.float64))
    gamma = train_cfg.focal_gamma if method == "focal" else 0.0
    use_ifl = method in _ENV_METHODS
    ifl_l2 = train_cfg.ifl_variant == "l2"
    is_env_method = use_ifl or method == "irm"

    centers: Optional[Centers] = None
    dummy_centers = np.zeros((K, train_cfg.hidden_dim))
    envs: Optional[list] = None
    env_pos: list = []
    B = train_cfg.batch_size
    log = []

    def plain_epoch(lr):
        perm = rng_shuffle.permutation(n)
        tot_cls = 0.0
        for start in range(0, n, B):
            bidx = perm[start:start + B]
            loss_cls, _, _ = _kernels.fused_train_step(
                W1, b1, W2, b2, vel[0], vel[1], vel[2], vel[3],
                np.ascontiguousarray(X[bidx]), y[bidx], logit_shift, gamma,
                0.0, dummy_centers, False, lr, train_cfg.momentum,
                train_cfg.weight_decay, act_id)
            tot_cls += loss_cls * len(bidx)
        return tot_cls / n, 0.0

    def env_epoch(lr, alpha):
        perms = [pos[rng_shuffle.permutation(len(pos))] for pos in env_pos]
        n_batches = math.ceil(n / B)
        tot_cls = tot_ifl = 0.0
        count = 0
        for b in range(n_batches):
            for perm in perms:
                bidx = perm[b * B:(b + 1) * B]
                if len(bidx) == 0:
                    continue
                loss_cls, loss_ifl, Z = _kernels.fused_train_step(
                    W1, b1, W2, b2, vel[0], vel[1], vel[2], vel[3],
                    np.ascontiguousarray(X[bidx]), y[bidx], logit_shift, gamma,
                    alpha, centers.C if centers is not None else dummy_centers,
                    ifl_l2, lr, train_cfg.momentum, train_cfg.weight_decay, act_id)
                if use_ifl and centers is not None:
                    update_centers(centers, Z, y[bidx])
                tot_cls += loss_cls * len(bidx)
                tot_ifl += loss_ifl * len(bidx)
                count += len(bidx)
        return tot_cls / count, tot_ifl / count

    def irm_epoch(lr, sgd_state):
        perms = [pos[rng_shuffle.permutation(len(pos))] for pos in env_pos]
        n_batches = math.ceil(n / B)
        tot = 0.0
        count = 0
        for b in range(n_batches):
            batches = [perm[b * B:(b + 1) * B] for perm in perms]
            batches = [bi for bi in batches if len(bi) > 0]
            if not batches:
                continue
            caches, dlog_ce, env_logits, env_labels = [], [], [], []
            loss_round = 0.0
            for bidx in batches:
                _, logits, cache = forward(params, X[bidx])
                loss_e, dl = ce_loss_grad(logits, y[bidx])
                caches.append(cache)
                dlog_ce.append(dl / len(batches))
                env_logits.append(logits)
                env_labels.append(y[bidx])
                loss_round += loss_e / len(batches)
            penalty, dlog_pen = irm_penalty(env_logits, env_labels)
            loss_round += train_cfg.irm_weight * penalty
            total_grads = None
            for cache, dce, dpen in zip(caches, dlog_ce, dlog_pen):
                g = backward(params, cache, dce + train_cfg.irm_weight * dpen)
                if total_grads is None:
                    total_grads = g
                else:
                    for (tw, tb), (gw, gb) in zip(total_grads.hidden, g.hidden):
                        tw += gw
                        tb += gb
                    total_grads.w_cls += g.w_cls
                    total_grads.b_cls += g.b_cls
            sgd_step(params, total_grads, lr, train_cfg.momentum,
                     train_cfg.weight_decay, sgd_state)
            tot += loss_round * sum(len(bi) for bi in batches)
            count += sum(len(bi) for bi in batches)
        return tot / count, 0.0

    irm_state = SgdState(velocity=[vel[0], vel[1], vel[2], vel[3]]) if method == "irm" else None
    last_scores = None
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        alpha = resolve_alpha(alpha_schedule, epoch, train_cfg.epochs) if use_ifl else 0.0
        if not is_env_method or epoch < warmup:
            loss_cls, loss_ifl = plain_epoch(lr)
            alpha = 0.0
        else:
            if envs is None or (epoch - warmup) % refresh == 0:
                last_scores = confidence_scores(params, X, y)
                rng_env = np.random.default_rng(
                    np.random.SeedSequence([train_cfg.seed, 0xE2B, epoch]))
                envs = construct_environments(ids, y, last_scores, env_cfg,
                                              rng_env, epoch=epoch)
                env_pos = [pos_of_id[e.flatten()] for e in envs]
                if use_ifl and centers is None:
                    Z, _, _ = forward(params, X)
                    centers = Centers.from_features(Z, y, K, eta=train_cfg.center_lr)
            if method == "irm":
                loss_cls, loss_ifl = irm_epoch(lr, irm_state)
            else:
                loss_cls, loss_ifl = env_epoch(lr, alpha)
        if not (np.isfinite(loss_cls) and np.isfinite(loss_ifl)):
            raise NonFiniteError(f"non-finite loss at epoch {epoch} (method {method})")
        log.append({"epoch": epoch, "lr": lr, "loss_cls": loss_cls,
                    "loss_ifl": loss_ifl, "alpha": alpha})

    if method == "crt":
        params = crt_stage2(params, X, y, K, train_cfg, crt_seed)

    return TrainResult(params=params, centers=centers, log=log,
                       environments=envs, class_counts=class_counts)
