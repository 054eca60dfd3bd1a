"""Parallelizing two embedding spaces.

Both tables are projected onto their top K principal components; a pair of
K x K transformation matrices is then learned by mini-batch gradient descent
on a reconstruction objective with cycle constraints:

    L = sum ||b_i - T_ab a_i||^2 + sum ||a_j - T_ba b_j||^2
        + lam * sum ||a_i - T_ba T_ab a_i||^2
        + lam * sum ||b_j - T_ab T_ba b_j||^2

Evaluation is top-k nearest accuracy: a word counts if its own target vector
is among the k nearest neighbors of its transformed source vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AlignError(Exception):
    pass


@dataclass
class PcaProjection:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (K, D), orthonormal rows
    explained_variance: np.ndarray  # (K,), non-increasing

    @property
    def k(self):
        return self.basis.shape[0]


@dataclass
class AlignConfig:
    k: int = 100
    cycle_weight: float = 0.5
    batch_size: int = 200
    lr: float = 1e-2
    iterations: int = 3000
    metric: str = "euclidean"  # or "cosine"
    seed: int = 0

    def validate(self):
        if self.k < 1:
            raise AlignError("k must be >= 1")
        if self.cycle_weight < 0:
            raise AlignError("cycle_weight must be >= 0")
        if self.batch_size < 1:
            raise AlignError("batch_size must be >= 1")
        if self.metric not in ("euclidean", "cosine"):
            raise AlignError(f"unknown metric {self.metric!r}")


@dataclass
class AlignmentModel:
    t_ab: np.ndarray  # (K, K)
    t_ba: np.ndarray  # (K, K)
    pca_a: PcaProjection
    pca_b: PcaProjection
    cycle_weight: float
    k: int
    final_loss: float = float("nan")


def fit_pca(table_or_matrix, k):
    """Top-k principal directions of a table's vectors (or a raw matrix)."""
    if hasattr(table_or_matrix, "matrix"):
        data, _ = table_or_matrix.matrix()
    else:
        data = np.asarray(table_or_matrix)
    data = data.astype(np.float64)
    n, d = data.shape
    if n < 2:
        raise AlignError("PCA needs at least 2 vectors")
    if k > min(d, n - 1):
        raise AlignError(f"k={k} exceeds min(dim={d}, count-1={n - 1})")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = (centered.T @ centered) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    basis = eigvecs[:, order].T
    # Deterministic sign: largest-magnitude component of each row positive.
    for row in basis:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1
    return PcaProjection(
        mean=mean, basis=basis, explained_variance=np.maximum(eigvals[order], 0.0)
    )


def project(p, v):
    """basis @ (v - mean); accepts a vector or a matrix of row vectors."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != p.mean.shape[0]:
        raise AlignError(f"vector dimension {v.shape[-1]}, projection expects {p.mean.shape[0]}")
    return (v - p.mean) @ p.basis.T


def alignment_loss(t_ab, t_ba, a, b, cycle_weight):
    """The cycle-constrained objective over paired point sets (rows)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or a.shape != b.shape:
        raise AlignError("alignment_loss needs nonempty matching point sets")
    fwd = b - a @ t_ab.T
    bwd = a - b @ t_ba.T
    cyc_a = a - (a @ t_ab.T) @ t_ba.T
    cyc_b = b - (b @ t_ba.T) @ t_ab.T
    return (
        (fwd ** 2).sum()
        + (bwd ** 2).sum()
        + cycle_weight * (cyc_a ** 2).sum()
        + cycle_weight * (cyc_b ** 2).sum()
    )


def alignment_gradients(t_ab, t_ba, a, b, cycle_weight):
    """Analytic gradients of alignment_loss wrt (t_ab, t_ba)."""
    fwd = b - a @ t_ab.T
    bwd = a - b @ t_ba.T
    ca = a @ t_ab.T
    cyc_a = a - ca @ t_ba.T
    db = b @ t_ba.T
    cyc_b = b - db @ t_ab.T
    g_ab = (
        -2 * fwd.T @ a
        - 2 * cycle_weight * (t_ba.T @ cyc_a.T @ a)
        - 2 * cycle_weight * (cyc_b.T @ db)
    )
    g_ba = (
        -2 * bwd.T @ b
        - 2 * cycle_weight * (cyc_a.T @ ca)
        - 2 * cycle_weight * (t_ab.T @ cyc_b.T @ b)
    )
    return g_ab, g_ba


def _resolve_pairing(table_a, table_b, pairing):
    pairs = []
    for item in pairing:
        la, lb = (item, item) if isinstance(item, str) else item
        pairs.append((la, lb))
    missing_a = [la for la, _ in pairs if la not in table_a]
    missing_b = [lb for _, lb in pairs if lb not in table_b]
    if missing_a or missing_b:
        raise AlignError(
            f"pairing not covered by tables; missing from A: {missing_a[:5]}, "
            f"from B: {missing_b[:5]}"
        )
    return pairs


def train_alignment(table_a, table_b, pairing, cfg):
    """Learn (T_ab, T_ba) over the labeled pairs; deterministic given cfg.seed.

    PCA bases are fit on each table's full entry set; transforms start at
    identity and are updated with Adam on analytic gradients, mini-batches of
    cfg.batch_size pairs.
    """
    cfg.validate()
    pairs = _resolve_pairing(table_a, table_b, pairing)
    if not pairs:
        raise AlignError("empty pairing")

    pca_a = fit_pca(table_a, cfg.k)
    pca_b = fit_pca(table_b, cfg.k)
    a = project(pca_a, np.stack([table_a[la] for la, _ in pairs]))
    b = project(pca_b, np.stack([table_b[lb] for _, lb in pairs]))

    k = cfg.k
    t_ab = np.eye(k)
    t_ba = np.eye(k)
    rng = np.random.default_rng(cfg.seed)

    # Adam state
    m_ab = np.zeros_like(t_ab); v_ab = np.zeros_like(t_ab)
    m_ba = np.zeros_like(t_ba); v_ba = np.zeros_like(t_ba)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    n = len(pairs)
    order = rng.permutation(n)
    cursor = 0
    loss = alignment_loss(t_ab, t_ba, a, b, cfg.cycle_weight)
    for step in range(1, cfg.iterations + 1):
        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        g_ab, g_ba = alignment_gradients(t_ab, t_ba, a[idx], b[idx], cfg.cycle_weight)
        g_ab /= len(idx); g_ba /= len(idx)

        m_ab = beta1 * m_ab + (1 - beta1) * g_ab
        v_ab = beta2 * v_ab + (1 - beta2) * g_ab ** 2
        m_ba = beta1 * m_ba + (1 - beta1) * g_ba
        v_ba = beta2 * v_ba + (1 - beta2) * g_ba ** 2
        bc1 = 1 - beta1 ** step
        bc2 = 1 - beta2 ** step
        # Geometric decay to 1% of the base rate quiets minibatch noise.
        lr = cfg.lr * 0.01 ** (step / cfg.iterations)
        t_ab = t_ab - lr * (m_ab / bc1) / (np.sqrt(v_ab / bc2) + eps)
        t_ba = t_ba - lr * (m_ba / bc1) / (np.sqrt(v_ba / bc2) + eps)

    loss = alignment_loss(t_ab, t_ba, a, b, cfg.cycle_weight)
    return AlignmentModel(
        t_ab=t_ab, t_ba=t_ba, pca_a=pca_a, pca_b=pca_b,
        cycle_weight=cfg.cycle_weight, k=k, final_loss=float(loss),
    )


def topk_nearest_accuracy(model, table_a, table_b, pairing, k, metric="euclidean"):
    """Fraction of paired words whose own target vector is among the k nearest
    neighbors of the transformed source vector. Candidates are the full
    evaluated B table; ties broken by label order."""
    if k < 1:
        raise AlignError("k must be >= 1")
    pairs = _resolve_pairing(table_a, table_b, pairing)
    if not pairs:
        raise AlignError("empty pairing")

    b_labels = table_b.labels
    b_all = project(model.pca_b, np.stack([table_b[l] for l in b_labels]))
    b_index = {l: i for i, l in enumerate(b_labels)}

    a = project(model.pca_a, np.stack([table_a[la] for la, _ in pairs]))
    mapped = a @ model.t_ab.T

    if metric == "cosine":
        bn = b_all / np.maximum(np.linalg.norm(b_all, axis=1, keepdims=True), 1e-12)
        mn = mapped / np.maximum(np.linalg.norm(mapped, axis=1, keepdims=True), 1e-12)
        dists = 1.0 - mn @ bn.T
    elif metric == "euclidean":
        dists = (
            (mapped ** 2).sum(axis=1, keepdims=True)
            - 2 * mapped @ b_all.T
            + (b_all ** 2).sum(axis=1)
        )
    else:
        raise AlignError(f"unknown metric {metric!r}")

    hits = 0
    for i, (_, lb) in enumerate(pairs):
        # Stable sort on (distance, label index) fixes tie order.
        ranked = np.lexsort((np.arange(len(b_labels)), dists[i]))
        if b_index[lb] in ranked[:k]:
            hits += 1
    return hits / len(pairs)
