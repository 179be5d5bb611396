"""Numba-jitted twins of the kernels in ``numpy_impl``.

Same signatures, same semantics; accumulation order may differ from the
numpy backend at the last ulp. All kernels are single-threaded and
deterministic. ``cache=True`` keeps worker processes from recompiling.
"""

import numpy as np
from numba import njit

ACT_RELU = 0
ACT_TANH = 1


@njit(cache=True)
def _forward(X, W1, b1, W2, b2, act_id):
    H1 = np.dot(X, W1)
    B, H = H1.shape
    Z = np.empty_like(H1)
    for i in range(B):
        for j in range(H):
            h = H1[i, j] + b1[j]
            H1[i, j] = h
            if act_id == ACT_RELU:
                Z[i, j] = h if h > 0.0 else 0.0
            else:
                Z[i, j] = np.tanh(h)
    logits = np.dot(Z, W2)
    K = logits.shape[1]
    for i in range(B):
        for j in range(K):
            logits[i, j] += b2[j]
    return H1, Z, logits


def mlp1_forward(X, W1, b1, W2, b2, act_id):
    return _forward(X, W1, b1, W2, b2, act_id)


@njit(cache=True)
def softmax_rows(logits):
    B, K = logits.shape
    P = np.empty_like(logits)
    for i in range(B):
        m = logits[i, 0]
        for j in range(1, K):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(K):
            e = np.exp(logits[i, j] - m)
            P[i, j] = e
            s += e
        for j in range(K):
            P[i, j] /= s
    return P


@njit(cache=True)
def _sgd_update(p, g, v, lr, momentum, weight_decay):
    pf = p.ravel()
    gf = g.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        gi = gf[i] + weight_decay * pf[i]
        vf[i] = momentum * vf[i] + gi
        pf[i] -= lr * vf[i]


@njit(cache=True)
def fused_train_step(W1, b1, W2, b2, vW1, vb1, vW2, vb2,
                     Xb, yb, logit_shift, focal_gamma, alpha, centers,
                     ifl_l2, lr, momentum, weight_decay, act_id):
    B = Xb.shape[0]
    H1, Z, logits = _forward(Xb, W1, b1, W2, b2, act_id)
    K = logits.shape[1]
    shifted = np.empty_like(logits)
    for i in range(B):
        for j in range(K):
            shifted[i, j] = logits[i, j] + logit_shift[j]
    P = softmax_rows(shifted)

    loss_cls = 0.0
    dlogits = np.empty_like(P)
    for i in range(B):
        y = yb[i]
        p_y = P[i, y]
        if p_y < 1e-300:
            p_y = 1e-300
        logp = np.log(p_y)
        if focal_gamma == 0.0:
            loss_cls += -logp
            for j in range(K):
                dlogits[i, j] = P[i, j]
            dlogits[i, y] -= 1.0
        else:
            u = 1.0 - p_y
            if u < 1e-12:
                u = 1e-12
            loss_cls += u ** focal_gamma * -logp
            scale = focal_gamma * p_y * u ** (focal_gamma - 1.0) * logp - u ** focal_gamma
            for j in range(K):
                onehot = 1.0 if j == y else 0.0
                dlogits[i, j] = (onehot - P[i, j]) * scale
    loss_cls /= B
    for i in range(B):
        for j in range(K):
            dlogits[i, j] /= B

    dZ = np.dot(dlogits, W2.T)
    H = Z.shape[1]
    loss_ifl = 0.0
    if alpha != 0.0:
        for i in range(B):
            y = yb[i]
            if ifl_l2:
                sq = 0.0
                for j in range(H):
                    d = Z[i, j] - centers[y, j]
                    sq += d * d
                norm = np.sqrt(sq)
                loss_ifl += norm
                denom = norm if norm > 1e-8 else 1e-8
                for j in range(H):
                    dZ[i, j] += (alpha / B) * (Z[i, j] - centers[y, j]) / denom
            else:
                sq = 0.0
                for j in range(H):
                    d = Z[i, j] - centers[y, j]
                    sq += d * d
                    dZ[i, j] += (alpha / B) * d
                loss_ifl += 0.5 * sq
        loss_ifl /= B

    dW2 = np.dot(Z.T, dlogits)
    db2 = np.zeros(K)
    for i in range(B):
        for j in range(K):
            db2[j] += dlogits[i, j]
    dH1 = np.empty_like(dZ)
    for i in range(B):
        for j in range(H):
            if act_id == ACT_RELU:
                dH1[i, j] = dZ[i, j] if H1[i, j] > 0.0 else 0.0
            else:
                dH1[i, j] = dZ[i, j] * (1.0 - Z[i, j] * Z[i, j])
    dW1 = np.dot(Xb.T, dH1)
    db1 = np.zeros(H)
    for i in range(B):
        for j in range(H):
            db1[j] += dH1[i, j]

    _sgd_update(W1, dW1, vW1, lr, momentum, weight_decay)
    _sgd_update(b1, db1, vb1, lr, momentum, 0.0)
    _sgd_update(W2, dW2, vW2, lr, momentum, weight_decay)
    _sgd_update(b2, db2, vb2, lr, momentum, 0.0)
    return loss_cls, loss_ifl, Z


@njit(cache=True)
def lloyd(X, C, max_iters, tol):
    n, d = X.shape
    k = C.shape[0]
    C = C.copy()
    labels = np.zeros(n, dtype=np.int64)
    dist_own = np.zeros(n)
    history = np.empty(max_iters)
    converged = False
    n_iter = 0
    for it in range(max_iters):
        for i in range(n):
            best = np.inf
            bj = 0
            for j in range(k):
                s = 0.0
                for c in range(d):
                    diff = X[i, c] - C[j, c]
                    s += diff * diff
                if s < best:
                    best = s
                    bj = j
            labels[i] = bj
            dist_own[i] = best
        history[it] = dist_own.sum()
        n_iter = it + 1
        newC = np.zeros((k, d))
        counts = np.zeros(k, dtype=np.int64)
        for i in range(n):
            counts[labels[i]] += 1
            for c in range(d):
                newC[labels[i], c] += X[i, c]
        for j in range(k):
            if counts[j] > 0:
                for c in range(d):
                    newC[j, c] /= counts[j]
        for j in range(k):
            if counts[j] == 0:
                far = 0
                fv = -1.0
                for i in range(n):
                    if dist_own[i] > fv:
                        fv = dist_own[i]
                        far = i
                for c in range(d):
                    newC[j, c] = X[far, c]
                labels[far] = j
                dist_own[far] = 0.0
        shift = 0.0
        for j in range(k):
            s = 0.0
            for c in range(d):
                diff = newC[j, c] - C[j, c]
                s += diff * diff
            shift += np.sqrt(s)
        C = newC
        if shift < tol:
            converged = True
            break
    for i in range(n):
        best = np.inf
        bj = 0
        for j in range(k):
            s = 0.0
            for c in range(d):
                diff = X[i, c] - C[j, c]
                s += diff * diff
            if s < best:
                best = s
                bj = j
        labels[i] = bj
    return labels, C, history[:n_iter], converged


@njit(cache=True)
def gbl_scan(attr, zdist, selected):
    n, A = attr.shape
    best_idx = -1
    best_std = np.inf
    cand = np.empty(A)
    for i in range(n):
        if selected[i]:
            continue
        s = 0.0
        for a in range(A):
            cand[a] = zdist[a] + attr[i, a]
            s += cand[a]
        mean = 0.0
        if s > 0.0:
            for a in range(A):
                cand[a] /= s
        for a in range(A):
            mean += cand[a]
        mean /= A
        var = 0.0
        for a in range(A):
            d = cand[a] - mean
            var += d * d
        std = np.sqrt(var / A)
        if std < best_std:
            best_std = std
            best_idx = i
    return best_idx, best_std
