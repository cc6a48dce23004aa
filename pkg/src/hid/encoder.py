"""Item embeddings, stand-in session encoders and the softmax prediction head."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from hid import autograd as ag
from hid.autograd import Tensor

ENCODERS = ("mean", "gru")
LOG_FLOOR = 1e-12
INIT_STD = 0.1


def pad_sessions(sessions: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad item index lists into ``(B, L)`` indices and a boolean mask."""
    if any(len(s) == 0 for s in sessions):
        raise ValueError("cannot encode an empty session")
    L = max(len(s) for s in sessions)
    idx = np.zeros((len(sessions), L), dtype=np.int64)
    mask = np.zeros((len(sessions), L), dtype=bool)
    for b, s in enumerate(sessions):
        idx[b, : len(s)] = s
        mask[b, : len(s)] = True
    return idx, mask


class SessionModel:
    """Shared item table plus an encoder ``F`` mapping a session to a d-vector.

    ``kind="mean"`` averages the session's item embeddings; ``kind="gru"``
    runs a single-layer gated recurrence (hidden size d) and returns the
    last hidden state.
    """

    def __init__(self, m: int, d: int, kind: str = "mean", seed: int = 0):
        if kind not in ENCODERS:
            raise ValueError(f"unknown encoder kind {kind!r}; choose from {ENCODERS}")
        self.m, self.d, self.kind, self.seed = m, d, kind, seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            "item_embeddings": ag.parameter(rng.normal(0.0, INIT_STD, size=(m, d)), "item_embeddings"),
        }
        if kind == "gru":
            for gate in ("z", "r", "n"):
                self.params[f"W_{gate}"] = ag.parameter(rng.normal(0.0, INIT_STD, size=(d, d)), f"W_{gate}")
                self.params[f"U_{gate}"] = ag.parameter(rng.normal(0.0, INIT_STD, size=(d, d)), f"U_{gate}")
                self.params[f"b_{gate}"] = ag.parameter(np.zeros(d), f"b_{gate}")
            self.params["h0"] = ag.parameter(np.zeros(d), "h0")

    @property
    def item_embeddings(self) -> Tensor:
        return self.params["item_embeddings"]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.params.items()}

    # -- forward ------------------------------------------------------------

    def encode(self, sessions: list[list[int]]) -> Tensor:
        """Session embeddings ``(B, d)`` for a batch of item index lists."""
        idx, mask = pad_sessions(sessions)
        if idx.max() >= self.m or idx.min() < 0:
            raise IndexError("item index outside the catalog")
        if self.kind == "mean":
            return self._mean_pool(idx, mask)
        return self._gru(idx, mask)

    def _mean_pool(self, idx, mask) -> Tensor:
        weights = mask / mask.sum(axis=1, keepdims=True)
        rows = ag.gather_rows(self.item_embeddings, idx)  # (B, L, d)
        return (rows * weights[:, :, None]).sum(axis=1)

    def _gru(self, idx, mask) -> Tensor:
        p = self.params
        B, L = idx.shape
        x_all = ag.gather_rows(self.item_embeddings, idx)  # (B, L, d)
        h = p["h0"] + Tensor(np.zeros((B, self.d)))
        for t in range(L):
            x = x_all[:, t, :]
            z = (x @ p["W_z"] + h @ p["U_z"] + p["b_z"]).sigmoid()
            r = (x @ p["W_r"] + h @ p["U_r"] + p["b_r"]).sigmoid()
            n = (x @ p["W_n"] + r * (h @ p["U_n"]) + p["b_n"]).tanh()
            h_new = (1.0 - z) * n + z * h
            if mask[:, t].all():
                h = h_new
            else:
                keep = mask[:, t : t + 1].astype(np.float64)
                h = h_new * keep + h * (1.0 - keep)
        return h

    def logits(self, session_emb: Tensor) -> Tensor:
        return session_emb @ self.item_embeddings.T

    def scores(self, sessions: list[list[int]], batch_size: int = 512) -> np.ndarray:
        """Raw dot-product scores ``(B, m)`` without building a graph to keep."""
        out = []
        for start in range(0, len(sessions), batch_size):
            emb = self.encode(sessions[start : start + batch_size]).data
            out.append(emb @ self.item_embeddings.data.T)
        return np.concatenate(out) if out else np.zeros((0, self.m))

    # -- checkpoints --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "kind": self.kind, "m": self.m, "d": self.d, "seed": self.seed,
            "tensors": {
                name: {
                    "shape": list(t.data.shape),
                    "dtype": "float64",
                    "data": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
                }
                for name, t in sorted(self.params.items())
            },
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> SessionModel:
        model = cls(state["m"], state["d"], state["kind"], state["seed"])
        for name, spec in state["tensors"].items():
            arr = np.frombuffer(base64.b64decode(spec["data"]), dtype="<f8").reshape(spec["shape"])
            model.params[name].data = arr.astype(np.float64).copy()
        return model

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        state = self.state_dict()
        if extra:
            state["extra"] = extra
        with open(path, "w") as fh:
            json.dump(state, fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> SessionModel:
        with open(path) as fh:
            return cls.from_state_dict(json.load(fh))


# -- plain numpy helpers (examples and oracles) --------------------------------

def encode_session(session, embeddings: np.ndarray, kind: str = "mean", params: dict | None = None) -> np.ndarray:
    """Encode one session against a given item table without building a model."""
    if len(session) == 0:
        raise ValueError("cannot encode an empty session")
    E = np.asarray(embeddings, dtype=np.float64)
    if kind == "mean":
        return E[np.asarray(session)].mean(axis=0)
    if kind != "gru":
        raise ValueError(f"unknown encoder kind {kind!r}")
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def sig(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    h = p.get("h0", np.zeros(E.shape[1]))
    for item in session:
        x = E[item]
        z = sig(x @ p["W_z"] + h @ p["U_z"] + p["b_z"])
        r = sig(x @ p["W_r"] + h @ p["U_r"] + p["b_r"])
        n = np.tanh(x @ p["W_n"] + r * (h @ p["U_n"]) + p["b_n"])
        h = (1.0 - z) * n + z * h
    return h


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def score_items(session_emb, embeddings) -> np.ndarray:
    """Softmax over ``embeddings @ session_emb``, max-subtracted."""
    return softmax(np.asarray(embeddings, dtype=np.float64) @ np.asarray(session_emb, dtype=np.float64))


def cross_entropy(probs, label: int) -> float:
    return float(-np.log(max(float(np.asarray(probs)[label]), LOG_FLOOR)))


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= eps:
        raise ValueError("cannot normalize a (near-)zero vector")
    return v / n


def prediction_loss(model: SessionModel, session_emb: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of the softmax head, built in the autograd graph."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = ag.log_softmax(model.logits(session_emb), axis=1)
    picked = logp[np.arange(labels.size), labels]
    return -(picked.mean() if reduction == "mean" else picked.sum())
