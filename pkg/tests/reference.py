"""Plain numpy forward passes used as finite-difference oracles.

These never touch the autograd engine, so a gradient check against them
tests the analytic backward pass and the graph-building forward at once.
"""

import numpy as np

from hid.icloss import LossConfig


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def encode(params: dict, sessions, kind: str) -> np.ndarray:
    E = params["item_embeddings"]
    B, L = len(sessions), max(len(s) for s in sessions)
    idx = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(sessions):
        idx[b, : len(s)] = s
        mask[b, : len(s)] = True
    if kind == "mean":
        return (E[idx] * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)
    h = np.tile(params["h0"], (B, 1))
    for t in range(L):
        x = E[idx[:, t]]
        z = _sigmoid(x @ params["W_z"] + h @ params["U_z"] + params["b_z"])
        r = _sigmoid(x @ params["W_r"] + h @ params["U_r"] + params["b_r"])
        n = np.tanh(x @ params["W_n"] + r * (h @ params["U_n"]) + params["b_n"])
        h = np.where(mask[:, t : t + 1], (1.0 - z) * n + z * h, h)
    return h


def losses(params: dict, sessions, labels, item_to_intent, kind: str, cfg: LossConfig) -> np.ndarray:
    """``[L_p, L_c (sum), L_p + eps * L_c (mean)]`` from one vectorized forward pass."""
    labels = np.asarray(labels)
    E = params["item_embeddings"]
    S = encode(params, sessions, kind)
    logits = S @ E.T
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    lp = np.mean(lse - logits[np.arange(labels.size), labels])

    targets = item_to_intent[labels]
    used = np.unique(targets)
    C = np.stack([E[item_to_intent == c].mean(axis=0) for c in used])
    C /= np.linalg.norm(C, axis=1, keepdims=True)
    S = S / np.linalg.norm(S, axis=1, keepdims=True)
    cos = S @ C.T
    t = np.searchsorted(used, targets)
    noise = np.ones_like(cos, dtype=bool)
    noise[np.arange(labels.size), t] = False
    per = np.zeros(labels.size)
    for u in range(labels.size):
        if not noise[u].any():
            continue
        dist = np.sqrt(2.0 - 2.0 * cos[u, noise[u]])
        p = np.clip(dist.var() - cfg.eta, 0.0, 1.0)
        x = cos[u, noise[u]] / cfg.sigma
        per[u] = np.log1p(cfg.lambda_p * p) + x.max() + np.log(np.exp(x - x.max()).sum()) - cos[u, t[u]] / cfg.sigma
    return np.array([lp, per.sum(), lp + cfg.epsilon * per.mean()])
