"""Pure-numpy implementations of the hot kernels.

This module is the reference backend: every function here has a
numba twin in ``numba_impl`` with the same signature and semantics.
Keep the two in lockstep; ``tests/test_kernels.py`` enforces agreement.
"""

import numpy as np

ACT_RELU = 0
ACT_TANH = 1


def mlp1_forward(X, W1, b1, W2, b2, act_id):
    """Forward pass of a one-hidden-layer MLP over a batch.

    Returns (pre-activation H1, hidden Z, logits). X is (B, D) float64.
    """
    H1 = X @ W1 + b1
    if act_id == ACT_RELU:
        Z = np.maximum(H1, 0.0)
    else:
        Z = np.tanh(H1)
    logits = Z @ W2 + b2
    return H1, Z, logits


def softmax_rows(logits):
    """Row-wise stable softmax."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fused_train_step(W1, b1, W2, b2, vW1, vb1, vW2, vb2,
                     Xb, yb, logit_shift, focal_gamma, alpha, centers,
                     ifl_l2, lr, momentum, weight_decay, act_id):
    """One SGD step on a batch: forward, loss, backward, momentum update.

    Parameters and momentum buffers are updated in place. ``logit_shift``
    is added to the logits before the softmax (balanced-softmax shift;
    zeros for plain CE). ``focal_gamma`` = 0 gives cross-entropy.
    ``alpha`` > 0 adds the center-pull metric loss on the hidden features
    (squared by default, plain L2 when ``ifl_l2``). Centers receive no
    gradient. Returns (mean cls loss, mean metric loss, hidden features).
    """
    B = Xb.shape[0]
    H1, Z, logits = mlp1_forward(Xb, W1, b1, W2, b2, act_id)
    P = softmax_rows(logits + logit_shift)
    rows = np.arange(B)
    p_y = np.maximum(P[rows, yb], 1e-300)
    logp_y = np.log(p_y)

    dlogits = P.copy()
    if focal_gamma == 0.0:
        loss_cls = -logp_y.mean()
        dlogits[rows, yb] -= 1.0
    else:
        u = np.maximum(1.0 - p_y, 1e-12)
        loss_cls = (u ** focal_gamma * -logp_y).mean()
        # d/dl_j [(1-p_y)^g * -log p_y] = (onehot_j - p_j) *
        #   (g * p_y * u^(g-1) * log p_y - u^g)
        scale = focal_gamma * p_y * u ** (focal_gamma - 1.0) * logp_y - u ** focal_gamma
        onehot = np.zeros_like(P)
        onehot[rows, yb] = 1.0
        dlogits = (onehot - P) * scale[:, None]
    dlogits /= B

    loss_ifl = 0.0
    dZ = dlogits @ W2.T
    if alpha != 0.0:
        diff = Z - centers[yb]
        if ifl_l2:
            norms = np.sqrt((diff * diff).sum(axis=1))
            loss_ifl = norms.mean()
            dz_ifl = diff / np.maximum(norms, 1e-8)[:, None]
        else:
            loss_ifl = 0.5 * (diff * diff).sum(axis=1).mean()
            dz_ifl = diff
        dZ = dZ + (alpha / B) * dz_ifl

    dW2 = Z.T @ dlogits
    db2 = dlogits.sum(axis=0)
    if act_id == ACT_RELU:
        dH1 = dZ * (H1 > 0.0)
    else:
        dH1 = dZ * (1.0 - Z * Z)
    dW1 = Xb.T @ dH1
    db1 = dH1.sum(axis=0)

    _sgd_update(W1, dW1, vW1, lr, momentum, weight_decay)
    _sgd_update(b1, db1, vb1, lr, momentum, 0.0)
    _sgd_update(W2, dW2, vW2, lr, momentum, weight_decay)
    _sgd_update(b2, db2, vb2, lr, momentum, 0.0)
    return loss_cls, loss_ifl, Z


def _sgd_update(p, g, v, lr, momentum, weight_decay):
    if weight_decay != 0.0:
        g = g + weight_decay * p
    v *= momentum
    v += g
    p -= lr * v


def lloyd(X, C, max_iters, tol):
    """Lloyd iterations from initial centroids C (modified in place is avoided).

    Empty clusters are repaired by reseeding to the point farthest from its
    assigned centroid (lowest index on ties). Returns
    (labels, centroids, inertia history, converged flag).
    """
    n, d = X.shape
    k = C.shape[0]
    C = C.copy()
    labels = np.zeros(n, dtype=np.int64)
    history = np.empty(max_iters, dtype=np.float64)
    converged = False
    n_iter = 0
    for it in range(max_iters):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        dist_own = d2[np.arange(n), labels]
        history[it] = dist_own.sum()
        n_iter = it + 1
        newC = np.zeros_like(C)
        counts = np.zeros(k, dtype=np.int64)
        for j in range(k):
            mask = labels == j
            counts[j] = mask.sum()
            if counts[j] > 0:
                newC[j] = X[mask].mean(axis=0)
        for j in range(k):
            if counts[j] == 0:
                far = int(dist_own.argmax())
                newC[j] = X[far]
                labels[far] = j
                dist_own = dist_own.copy()
                dist_own[far] = 0.0
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).sum()
        C = newC
        if shift < tol:
            converged = True
            break
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, C, history[:n_iter], converged


def gbl_scan(attr, zdist, selected):
    """One greedy round: best not-yet-selected row minimizing the std of the
    normalized attribute-count vector after adding it. Ties go to the lowest
    index. Returns (index, std); index is -1 when nothing is selectable.
    """
    n, A = attr.shape
    best_idx = -1
    best_std = np.inf
    for i in range(n):
        if selected[i]:
            continue
        cand = zdist + attr[i]
        s = cand.sum()
        if s > 0.0:
            cand = cand / s
        std = cand.std()
        if std < best_std:
            best_std = std
            best_idx = i
    return best_idx, best_std
