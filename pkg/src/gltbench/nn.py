"""Small feedforward classifier with hand-written forward/backward passes.

Everything here is plain numpy in float64; analytic gradients are verified
against central finite differences in the tests. The jitted fused training
step (``_kernels``) covers the one-hidden-layer fast path used by the
training loop; these modular functions are the reference semantics and serve
scoring, evaluation and the gradient checks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NonFiniteError

ACTIVATIONS = ("relu", "tanh")
LR_SCHEDULES = ("cosine", "multistep")
METHODS = ("ce", "center", "ifl2", "ifl3", "blsoftmax", "logitadj", "focal",
           "crt", "irm")

CHECKPOINT_MAGIC = b"GLTC"


@dataclass
class ModelParams:
    """Hidden layers (weight, bias) plus the classifier head.

    Weight matrices are (fan_in, fan_out); the head maps the penultimate
    H-dim feature to K logits.
    """

    hidden: list  # [(W, b), ...]
    w_cls: np.ndarray  # (H, K)
    b_cls: np.ndarray  # (K,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        for i, (W, b) in enumerate(self.hidden):
            if W.shape[1] != b.shape[0]:
                raise ConfigError(f"hidden layer {i}: bias does not match weight")
        if self.w_cls.shape[1] != self.b_cls.shape[0]:
            raise ConfigError("classifier bias does not match weight")
        self.dims  # raises when layer dimensions do not chain

    @property
    def dims(self) -> list[int]:
        dims = [self.hidden[0][0].shape[0]]
        for W, _ in self.hidden:
            if W.shape[0] != dims[-1]:
                raise ConfigError("layer dimensions do not chain")
            dims.append(W.shape[1])
        if self.w_cls.shape[0] != dims[-1]:
            raise ConfigError("classifier head does not chain with hidden layers")
        dims.append(self.w_cls.shape[1])
        return dims

    @property
    def n_classes(self) -> int:
        return self.b_cls.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(hidden=[(W.copy(), b.copy()) for W, b in self.hidden],
                           w_cls=self.w_cls.copy(), b_cls=self.b_cls.copy(),
                           activation=self.activation)

    def flat_arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in self.hidden:
            out += [W, b]
        out += [self.w_cls, self.b_cls]
        return out


def init_params(in_dim: int, hidden_dims, n_classes: int, activation: str,
                rng: np.random.Generator) -> ModelParams:
    """He-style gaussian init, biases at zero."""
    dims = [in_dim] + list(hidden_dims)
    hidden = []
    for a, b in zip(dims[:-1], dims[1:]):
        W = rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
        hidden.append((W, np.zeros(b)))
    w_cls = rng.standard_normal((dims[-1], n_classes)) * np.sqrt(1.0 / dims[-1])
    return ModelParams(hidden=hidden, w_cls=w_cls, b_cls=np.zeros(n_classes),
                       activation=activation)


def _act(h: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(h, 0.0) if activation == "relu" else np.tanh(h)


def _act_grad(pre: np.ndarray, post: np.ndarray, activation: str) -> np.ndarray:
    return (pre > 0.0).astype(np.float64) if activation == "relu" else 1.0 - post * post


def forward(params: ModelParams, x: np.ndarray):
    """Returns (penultimate feature z, logits, cache for backward).

    Accepts a single (D,) vector or a (B, D) batch; shapes of z/logits follow.
    """
    single = x.ndim == 1
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pres, posts = [], [a]
    for W, b in params.hidden:
        pre = a @ W + b
        a = _act(pre, params.activation)
        pres.append(pre)
        posts.append(a)
    logits = a @ params.w_cls + params.b_cls
    if not (np.isfinite(logits).all() and np.isfinite(a).all()):
        raise NonFiniteError("non-finite activations in forward pass")
    cache = {"pres": pres, "posts": posts}
    z = posts[-1]
    if single:
        return z[0], logits[0], cache
    return z, logits, cache


@dataclass
class ParamGrads:
    hidden: list  # [(dW, db), ...]
    w_cls: np.ndarray
    b_cls: np.ndarray

    def flat_arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in self.hidden:
            out += [W, b]
        out += [self.w_cls, self.b_cls]
        return out


def backward(params: ModelParams, cache: dict, dlogits: np.ndarray,
             dz_extra: Optional[np.ndarray] = None) -> ParamGrads:
    """Exact reverse-mode gradients of <dlogits, logits> + <dz_extra, z>.

    ``dz_extra`` injects an additional gradient on the penultimate feature
    (the metric-loss hook); it bypasses the classifier head entirely.
    """
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    z = cache["posts"][-1]
    if dlogits.shape != (z.shape[0], params.b_cls.shape[0]):
        raise ConfigError(f"dlogits shape {dlogits.shape} does not match forward cache")
    dw_cls = z.T @ dlogits
    db_cls = dlogits.sum(axis=0)
    da = dlogits @ params.w_cls.T
    if dz_extra is not None:
        dz_extra = np.atleast_2d(np.asarray(dz_extra, dtype=np.float64))
        if dz_extra.shape != z.shape:
            raise ConfigError(f"dz_extra shape {dz_extra.shape} does not match features")
        da = da + dz_extra
    hidden_grads = []
    for i in range(len(params.hidden) - 1, -1, -1):
        W, _b = params.hidden[i]
        dpre = da * _act_grad(cache["pres"][i], cache["posts"][i + 1], params.activation)
        dW = cache["posts"][i].T @ dpre
        db = dpre.sum(axis=0)
        hidden_grads.append((dW, db))
        da = dpre @ W.T
    hidden_grads.reverse()
    return ParamGrads(hidden=hidden_grads, w_cls=dw_cls, b_cls=db_cls)


@dataclass
class SgdState:
    """Momentum buffers, one per parameter array, initialized at zero."""

    velocity: list = field(default_factory=list)

    @classmethod
    def like(cls, params: ModelParams) -> "SgdState":
        return cls(velocity=[np.zeros_like(a) for a in params.flat_arrays()])


def sgd_step(params: ModelParams, grads: ParamGrads, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             state: Optional[SgdState] = None) -> ModelParams:
    """Momentum SGD update, in place. Weight decay applies to weights only."""
    if momentum != 0.0 and state is None:
        raise ConfigError("momentum > 0 requires an SgdState")
    arrays = params.flat_arrays()
    garrays = grads.flat_arrays()
    for i, (p, g) in enumerate(zip(arrays, garrays)):
        if weight_decay != 0.0 and p.ndim == 2:
            g = g + weight_decay * p
        if state is not None:
            v = state.velocity[i]
            v *= momentum
            v += g
            g = v
        p -= lr * g
    return params


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    return lr0 * (1.0 + np.cos(np.pi * epoch / total_epochs)) / 2.0


def multistep_lr(epoch: int, total_epochs: int, lr0: float,
                 milestones=(0.6, 0.8), gamma: float = 0.1) -> float:
    lr = lr0
    for m in milestones:
        if epoch >= m * total_epochs:
            lr *= gamma
    return lr


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(logits, y):
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if (y >= logits.shape[1]).any() or (y < 0).any():
        raise ConfigError("label out of range")
    return logits, y, single


def ce_loss_grad(logits, y):
    """Cross-entropy loss and gradient w.r.t. logits.

    For a batch the loss is the mean and the gradient is scaled by 1/B, so
    <dlogits, delta> approximates the change of the returned loss.
    """
    logits, y, single = _as_batch(logits, y)
    B = logits.shape[0]
    P = softmax(logits)
    rows = np.arange(B)
    loss = float(-np.log(np.maximum(P[rows, y], 1e-300)).mean())
    dlogits = P.copy()
    dlogits[rows, y] -= 1.0
    dlogits /= B
    return loss, (dlogits[0] if single else dlogits)


def balanced_softmax_loss(logits, y, class_counts):
    """Cross-entropy over logits shifted by log class counts.

    The shift is constant in the logits, so the gradient w.r.t. the original
    logits is the plain CE gradient of the shifted ones.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ConfigError("class counts must be positive")
    return ce_loss_grad(np.asarray(logits, dtype=np.float64) + np.log(counts), y)


def logit_adjust(logits, class_prior, tau: float = 1.0) -> np.ndarray:
    """Post-hoc adjustment: logits - tau * log(prior). Prediction = argmax."""
    prior = np.asarray(class_prior, dtype=np.float64)
    if (prior <= 0).any():
        raise ConfigError("class prior must be positive")
    return np.asarray(logits, dtype=np.float64) - tau * np.log(prior)


def focal_loss(logits, y, gamma: float = 2.0):
    """(1 - p_y)^gamma * CE with its exact analytic gradient."""
    logits, y, single = _as_batch(logits, y)
    B = logits.shape[0]
    P = softmax(logits)
    rows = np.arange(B)
    p_y = np.maximum(P[rows, y], 1e-300)
    logp = np.log(p_y)
    if gamma == 0.0:
        loss = float(-logp.mean())
        dlogits = P.copy()
        dlogits[rows, y] -= 1.0
    else:
        u = np.maximum(1.0 - p_y, 1e-12)
        loss = float((u ** gamma * -logp).mean())
        scale = gamma * p_y * u ** (gamma - 1.0) * logp - u ** gamma
        onehot = np.zeros_like(P)
        onehot[rows, y] = 1.0
        dlogits = (onehot - P) * scale[:, None]
    dlogits /= B
    return loss, (dlogits[0] if single else dlogits)


def irm_penalty(per_env_logits, per_env_labels):
    """IRMv1 penalty over environments with its gradient w.r.t. the logits.

    Per environment e the penalty is g_e^2 where g_e is the derivative of the
    environment's mean CE with respect to a scalar multiplier on the logits,
    evaluated at 1. Returns (sum of penalties, list of per-env dlogits).
    Raises NonFiniteError when the penalty is not finite (the known
    instability of this objective).
    """
    total = 0.0
    grads = []
    for logits, y in zip(per_env_logits, per_env_labels):
        logits, y, _ = _as_batch(logits, y)
        B = logits.shape[0]
        P = softmax(logits)
        rows = np.arange(B)
        onehot = np.zeros_like(P)
        onehot[rows, y] = 1.0
        resid = P - onehot
        # g = d/ds mean CE(s * logits) at s=1
        g = float((resid * logits).sum() / B)
        # dg/dlogits = (resid + P * (logits - rowsum(P*logits))) / B
        inner = (P * logits).sum(axis=1, keepdims=True)
        dg = (resid + P * (logits - inner)) / B
        total += g * g
        grads.append(2.0 * g * dg)
    if not np.isfinite(total):
        raise NonFiniteError("IRM penalty is not finite")
    return total, grads


@dataclass
class TrainConfig:
    """Everything a training run needs besides the data."""

    epochs: int = 50
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"
    seed: int = 0
    method: str = "ce"
    hidden_dim: int = 64
    activation: str = "relu"
    # method-specific knobs
    alpha_schedule: Optional[list] = None  # [(epoch or fraction, alpha)]
    tau: float = 1.0
    focal_gamma: float = 2.0
    center_lr: float = 0.5
    ifl_variant: str = "squared"  # or "l2"
    irm_weight: float = 1.0
    crt_epochs: Optional[int] = None  # default: 10% of epochs, min 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.ifl_variant not in ("squared", "l2"):
            raise ConfigError("ifl_variant must be 'squared' or 'l2'")
        if self.alpha_schedule is not None:
            for e, a in self.alpha_schedule:
                if a < 0:
                    raise ConfigError("alpha values must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return cosine_lr(epoch, self.epochs, self.lr0)
        return multistep_lr(epoch, self.epochs, self.lr0)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "epochs", "batch_size", "lr0", "momentum", "weight_decay",
            "lr_schedule", "seed", "method", "hidden_dim", "activation",
            "tau", "focal_gamma", "center_lr", "ifl_variant", "irm_weight")}
        d["alpha_schedule"] = (None if self.alpha_schedule is None
                               else [[e, a] for e, a in self.alpha_schedule])
        d["crt_epochs"] = self.crt_epochs
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if kwargs.get("alpha_schedule") is not None:
            kwargs["alpha_schedule"] = [(float(e), float(a))
                                        for e, a in kwargs["alpha_schedule"]]
        return cls(**kwargs)


def crt_stage2(params: ModelParams, X: np.ndarray, y: np.ndarray,
               n_classes: int, cfg: TrainConfig, seed: int) -> ModelParams:
    """Classifier re-training: freeze the backbone, re-init the head, train it
    with class-balanced resampling (uniform class, then uniform sample).

    With zero stage-2 epochs the model is returned untouched (the head is not
    even re-initialized). The hidden features are computed once since the
    backbone never changes.
    """
    stage2 = cfg.crt_epochs if cfg.crt_epochs is not None else max(1, round(0.1 * cfg.epochs))
    if stage2 == 0:
        return params
    rng = np.random.default_rng(seed)
    out = params.copy()
    H, K = out.w_cls.shape
    out.w_cls = rng.standard_normal((H, K)) * np.sqrt(1.0 / H)
    out.b_cls = np.zeros(K)

    Z, _, _ = forward(out, X)
    per_class = [np.flatnonzero(y == k) for k in range(n_classes)]
    if any(len(p) == 0 for p in per_class):
        raise ConfigError("crt stage 2 requires at least one sample per class")
    n = X.shape[0]
    vel_w = np.zeros_like(out.w_cls)
    vel_b = np.zeros_like(out.b_cls)
    steps_per_epoch = max(1, n // cfg.batch_size)
    for epoch in range(stage2):
        lr = cosine_lr(epoch, stage2, cfg.lr0)
        for _ in range(steps_per_epoch):
            classes = rng.integers(n_classes, size=cfg.batch_size)
            picks = np.array([per_class[c][rng.integers(len(per_class[c]))]
                              for c in classes])
            zb = Z[picks]
            logits = zb @ out.w_cls + out.b_cls
            _, dlogits = ce_loss_grad(logits, y[picks])
            gw = zb.T @ dlogits + cfg.weight_decay * out.w_cls
            gb = dlogits.sum(axis=0)
            vel_w *= cfg.momentum
            vel_w += gw
            vel_b *= cfg.momentum
            vel_b += gb
            out.w_cls -= lr * vel_w
            out.b_cls -= lr * vel_b
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: magic "GLTC", u32 JSON header length, the UTF-8 JSON
# header, then the little-endian f32 weight blob. Blob order: per hidden
# layer W then b, then the classifier W and b, then centers when present.
# ---------------------------------------------------------------------------

_CKPT_HEAD = struct.Struct("<4sI")


def save_checkpoint(path, params: ModelParams, meta: dict,
                    centers: Optional[np.ndarray] = None) -> None:
    header = dict(meta)
    header["dims"] = params.dims
    header["activation"] = params.activation
    header["has_centers"] = centers is not None
    blob = b"".join(a.astype("<f4").tobytes() for a in params.flat_arrays())
    if centers is not None:
        blob += centers.astype("<f4").tobytes()
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CHECKPOINT_MAGIC, len(payload)))
        fh.write(payload)
        fh.write(blob)


def load_checkpoint(path):
    """Returns (ModelParams, header dict, centers or None)."""
    with open(path, "rb") as fh:
        head = fh.read(_CKPT_HEAD.size)
        magic, hlen = _CKPT_HEAD.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file: {path}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    dims = header["dims"]
    offset = 0

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += size * 4
        return arr.reshape(shape).astype(np.float64)

    hidden = []
    for a, b in zip(dims[:-2], dims[1:-1]):
        W = take((a, b))
        bias = take((b,))
        hidden.append((W, bias))
    w_cls = take((dims[-2], dims[-1]))
    b_cls = take((dims[-1],))
    centers = take((dims[-1], dims[-2])) if header.get("has_centers") else None
    params = ModelParams(hidden=hidden, w_cls=w_cls, b_cls=b_cls,
                         activation=header["activation"])
    return params, header, centers
