"""Hybrid intents: attribute co-occurrence graph -> spectral clusters -> item partition."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hid.autograd import Tensor
from hid.dataset import Catalog


@dataclass
class IntentGraph:
    weights: np.ndarray  # k x k symmetric, integer-valued co-occurrence counts

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.weights, k=1))
        return list(zip(i.tolist(), j.tolist()))

    def total_weight(self) -> float:
        return float(np.triu(self.weights, k=1).sum())


@dataclass
class SpectralDecomposition:
    laplacian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass
class HybridIntentSet:
    n: int
    attribute_to_intent: np.ndarray
    item_to_intent: np.ndarray

    def members(self, intent: int) -> np.ndarray:
        return np.flatnonzero(self.item_to_intent == intent)

    def attributes(self, intent: int) -> np.ndarray:
        return np.flatnonzero(self.attribute_to_intent == intent)

    def pooling_matrix(self) -> np.ndarray:
        """n x m matrix whose product with the item table averages each intent's members."""
        m = self.item_to_intent.size
        P = np.zeros((self.n, m))
        P[self.item_to_intent, np.arange(m)] = 1.0
        return P / P.sum(axis=1, keepdims=True)


@dataclass
class IntentAssignment:
    target: np.ndarray  # (B,) hybrid intent index per session
    noise: np.ndarray  # (B, n) boolean mask of noise intents

    def noise_sets(self) -> list[set[int]]:
        return [set(np.flatnonzero(row).tolist()) for row in self.noise]


# -- preliminary intents and the co-occurrence graph ---------------------------

def build_preliminary_intents(catalog: Catalog) -> dict[int, set[int]]:
    groups: dict[int, set[int]] = {}
    for item, attr in enumerate(catalog.attribute_of):
        groups.setdefault(int(attr), set()).add(item)
    return groups


def cooccurrence_matrix(sequences, node_of: np.ndarray, n_nodes: int, window: int = 1) -> np.ndarray:
    """Count node pairs at distance <= ``window`` in each mapped sequence.

    Pairs mapping to the same node are skipped, so the diagonal stays zero.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    W = np.zeros((n_nodes, n_nodes))
    for seq in sequences:
        nodes = node_of[np.asarray(seq, dtype=np.int64)]
        for gap in range(1, min(window, len(nodes) - 1) + 1):
            a, b = nodes[:-gap], nodes[gap:]
            keep = a != b
            np.add.at(W, (a[keep], b[keep]), 1.0)
            np.add.at(W, (b[keep], a[keep]), 1.0)
    return W


def build_intent_graph(sequences, catalog: Catalog, window: int = 1) -> IntentGraph:
    """Attribute co-occurrence graph over training sequences (items already indexed)."""
    return IntentGraph(cooccurrence_matrix(sequences, catalog.attribute_of, catalog.k, window))


def add_isolated_self_loops(weights: np.ndarray) -> np.ndarray:
    W = np.array(weights, dtype=np.float64)
    isolated = W.sum(axis=1) == 0
    W[isolated, isolated] = 1.0
    return W


def normalized_laplacian(weights) -> np.ndarray:
    """``I - D^{-1/2} W D^{-1/2}`` with ``D_ii = sum_j w_ij``."""
    W = weights.weights if isinstance(weights, IntentGraph) else np.asarray(weights, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] == 0:
        raise ValueError("weights must be a non-empty square matrix")
    degree = W.sum(axis=1)
    if np.any(degree <= 0):
        raise RuntimeError("zero-degree node; call add_isolated_self_loops first")
    inv_sqrt = 1.0 / np.sqrt(degree)
    L = np.eye(W.shape[0]) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    return 0.5 * (L + L.T)


def spectral_embed(laplacian: np.ndarray, q: int) -> SpectralDecomposition:
    """The ``q`` eigenvectors of smallest eigenvalue, as rows-per-node.

    Each eigenvector's sign is fixed so that its largest-magnitude entry is positive.
    """
    k = laplacian.shape[0]
    if not 1 <= q <= k:
        raise ValueError(f"q must lie in [1, {k}], got {q}")
    vals, vecs = np.linalg.eigh(laplacian)
    vals, vecs = vals[:q], vecs[:, :q].copy()
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(q)])
    signs[signs == 0] = 1.0
    vecs *= signs
    return SpectralDecomposition(laplacian, vals, vecs)


# -- k-means ----------------------------------------------------------------

def _kmeans_pp(X: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(X)))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, n):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(len(X), p=d2 / total))
        else:
            # every point coincides with a center; pick any unused index
            unused = np.setdiff1d(np.arange(len(X)), centers)
            nxt = int(rng.choice(unused))
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[centers].copy()


def _fill_empty(X: np.ndarray, labels: np.ndarray, centroids: np.ndarray, n: int) -> np.ndarray:
    labels = labels.copy()
    for c in range(n):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=n)
        dist = ((X - centroids[labels]) ** 2).sum(axis=1)
        dist[sizes[labels] <= 1] = -1.0  # never empty another cluster
        labels[int(np.argmax(dist))] = c
    return labels


def _sse(X, labels, centroids) -> float:
    return float(((X - centroids[labels]) ** 2).sum())


def kmeans(X, n: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6, n_init: int = 10) -> np.ndarray:
    """Lloyd's k-means with seeded k-means++ starts; returns labels for the rows of ``X``.

    All ``n`` clusters are non-empty: an empty cluster takes the point farthest
    from its own centroid (drawn from clusters that can spare one).
    The restart with the lowest within-cluster SSE wins.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not 1 <= n <= len(X):
        raise ValueError(f"cannot form {n} clusters from {len(X)} points")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    best, best_sse = None, np.inf
    for _ in range(n_init):
        centroids = _kmeans_pp(X, n, rng)
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            labels = _fill_empty(X, np.argmin(d2, axis=1), centroids, n)
            new = np.stack([X[labels == c].mean(axis=0) for c in range(n)])
            shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
            centroids = new
            if shift < tol:
                break
        sse = _sse(X, labels, centroids)
        if sse < best_sse - 1e-12:
            best, best_sse = labels, sse
    return _canonical(best)


def _canonical(labels: np.ndarray) -> np.ndarray:
    # relabel clusters in order of first appearance
    mapping: dict[int, int] = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels], dtype=np.int64)


# -- hybrid intents -----------------------------------------------------------

def spectral_cluster(weights: np.ndarray, n: int, q: int | None = None, seed: int = 0,
                     normalize_rows: bool = True) -> np.ndarray:
    """Normalized spectral clustering of a weighted graph into ``n`` groups."""
    W = add_isolated_self_loops(weights)
    k = W.shape[0]
    if n > k:
        raise ValueError(f"requested {n} clusters but the graph has {k} nodes")
    q = n if q is None else q
    emb = spectral_embed(normalized_laplacian(W), q).eigenvectors
    if normalize_rows:
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        emb = emb / np.maximum(norms, 1e-12)
    return kmeans(emb, n, seed=seed)


def form_hybrid_intents(attribute_to_intent, catalog_or_attribute_of) -> HybridIntentSet:
    attribute_to_intent = _canonical(np.asarray(attribute_to_intent))
    attribute_of = (catalog_or_attribute_of.attribute_of if isinstance(catalog_or_attribute_of, Catalog)
                    else np.asarray(catalog_or_attribute_of))
    n = int(attribute_to_intent.max()) + 1
    return HybridIntentSet(n, attribute_to_intent, attribute_to_intent[attribute_of])


def build_hybrid_intents(sequences, catalog: Catalog, n: int, q: int | None = None, seed: int = 0,
                         window: int = 1) -> HybridIntentSet:
    graph = build_intent_graph(sequences, catalog, window)
    return form_hybrid_intents(spectral_cluster(graph.weights, n, q, seed), catalog)


def hybrid_intent_embedding(members, item_embeddings):
    """Mean of the member item embeddings (a Tensor in, a Tensor out)."""
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise ValueError("hybrid intent has no items")
    if isinstance(item_embeddings, Tensor):
        return item_embeddings[members].mean(axis=0)
    return np.asarray(item_embeddings)[members].mean(axis=0)


def intent_embeddings(intents: HybridIntentSet, item_embeddings: Tensor) -> Tensor:
    """All n intent embeddings at once, from the live item table."""
    return Tensor(intents.pooling_matrix()) @ item_embeddings


def assign_intents(labels, item_to_intent: np.ndarray, n: int | None = None) -> IntentAssignment:
    """Target intent of each session's label, and the other sessions' targets as noise."""
    target = np.asarray(item_to_intent)[np.asarray(labels, dtype=np.int64)]
    n = int(np.max(item_to_intent)) + 1 if n is None else n
    B = target.size
    counts = np.zeros(n, dtype=np.int64)
    np.add.at(counts, target, 1)
    # other sessions' targets: subtract this session's own contribution
    others = np.broadcast_to(counts, (B, n)).copy()
    others[np.arange(B), target] -= 1
    noise = others > 0
    noise[np.arange(B), target] = False
    return IntentAssignment(target, noise)


# -- attribute-free variant ---------------------------------------------------

def semantic_preliminary_intents(item_embeddings, k_sem: int, seed: int = 0) -> np.ndarray:
    """k-means over item embedding rows; returns a cluster id per item."""
    E = item_embeddings.data if isinstance(item_embeddings, Tensor) else np.asarray(item_embeddings)
    if k_sem < 2:
        raise ValueError(f"k_sem must be >= 2, got {k_sem}")
    if k_sem > len(E):
        raise ValueError(f"k_sem={k_sem} exceeds the number of items {len(E)}")
    return kmeans(E, k_sem, seed=seed, n_init=3)


def item_spectral_clusters(sequences, m: int, n: int, seed: int = 0, window: int = 1) -> np.ndarray:
    """Items as graph nodes: precomputed once before attribute-free training."""
    W = cooccurrence_matrix(sequences, np.arange(m), m, window)
    return spectral_cluster(W, n, seed=seed)


def compose_semantic_intents(semantic: np.ndarray, item_cluster: np.ndarray) -> HybridIntentSet:
    """Map each semantic cluster to the spectral cluster holding most of its items.

    Ties go to the lower spectral cluster index; spectral clusters that receive
    no semantic cluster are dropped, keeping every hybrid intent non-empty.
    """
    k_sem = int(semantic.max()) + 1
    n_spec = int(item_cluster.max()) + 1
    votes = np.zeros((k_sem, n_spec), dtype=np.int64)
    np.add.at(votes, (semantic, item_cluster), 1)
    pre_to_spec = np.argmax(votes, axis=1)
    return form_hybrid_intents(pre_to_spec, semantic)


# -- persistence --------------------------------------------------------------

def save_intents(path: str | Path, intents: HybridIntentSet, n: int, q: int | None, seed: int,
                 extra: dict | None = None) -> None:
    obj = {"n": int(n), "n_formed": int(intents.n), "q": None if q is None else int(q), "seed": int(seed),
           "attribute_to_cluster": intents.attribute_to_intent.tolist(),
           "item_to_intent": intents.item_to_intent.tolist()}
    if extra:
        obj.update(extra)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def load_intents(path: str | Path) -> tuple[HybridIntentSet, dict]:
    with open(path) as fh:
        obj = json.load(fh)
    a2i = np.asarray(obj["attribute_to_cluster"], dtype=np.int64)
    i2i = np.asarray(obj["item_to_intent"], dtype=np.int64)
    return HybridIntentSet(int(i2i.max()) + 1, a2i, i2i), obj
