"""Self-supervised tag clustering and the item-intent relatedness matrix."""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import softmax
from sklearn.cluster import kmeans_plusplus

from errors import DegenerateCluster

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
STOCHASTIC_TOL = 1e-6


@dataclass(eq=False)
class ClusterState:
    """Snapshot taken at a refresh; read-only until the next one."""

    centers: np.ndarray
    Q: np.ndarray
    Q_hat: np.ndarray
    hard_assign: np.ndarray
    eta: float
    M: np.ndarray
    tag_counts: np.ndarray

    @property
    def K(self):
        return self.centers.shape[0]


def squared_distances(tag_table, centers):
    """||t_l - mu_k||^2 for every tag and center."""

    diff = tag_table[:, None, :] - centers[None, :, :]
    return np.einsum("lkd,lkd->lk", diff, diff)


def soft_assign(tag_table, centers, eta=1.0):
    """Student-t kernel assignment of tags to centers, rows summing to one."""

    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    kernel = (1.0 + squared_distances(tag_table, centers) / eta) ** (-(eta + 1.0) / 2.0)
    return kernel / kernel.sum(axis=1, keepdims=True)


def target_distribution(Q):
    """Sharpened targets Q^2 / column mass, row-normalized."""

    mass = Q.sum(axis=0)
    empty = np.flatnonzero(mass <= 0)
    if len(empty):
        raise DegenerateCluster(empty)
    weight = Q ** 2 / mass
    return weight / weight.sum(axis=1, keepdims=True)


def kl_loss(Q_hat, Q):
    """KL(Q_hat || Q) summed over tags; zero target entries contribute zero."""

    Q_hat = np.asarray(Q_hat)
    Q = np.asarray(Q)
    if Q_hat.shape != Q.shape:
        raise ValueError(f"shape mismatch {Q_hat.shape} vs {Q.shape}")
    ratio = np.log(np.maximum(Q_hat, LOG_CLAMP)) - np.log(np.maximum(Q, LOG_CLAMP))
    return float(np.sum(np.where(Q_hat > 0, Q_hat * ratio, 0.0)))


def clustering_loss(Q_hat, model, eta=1.0, grads=None, scale=1.0):
    """KL(Q_hat || Q) at the current tag table and centers, with gradients.

    Q_hat is a constant target: nothing flows back through it.
    """

    tags = model.params["tag"]
    centers = model.params["centers"]
    D = squared_distances(tags, centers)
    kernel = (1.0 + D / eta) ** (-(eta + 1.0) / 2.0)
    Q = kernel / kernel.sum(axis=1, keepdims=True)
    loss = kl_loss(Q_hat, Q)

    if grads is not None:
        G = scale * (eta + 1.0) * (Q_hat - Q) / (eta + D)
        grads["tag"] += (tags * G.sum(axis=1, keepdims=True) - G @ centers).astype(tags.dtype)
        grads["centers"] += (centers * G.sum(axis=0)[:, None] - G.T @ tags).astype(tags.dtype)
    return loss, grads


def hard_assign(Q):
    """Row argmax; ties go to the lowest cluster index."""

    return np.argmax(Q, axis=1)


def cluster_tag_counts(it_labels, assignment, K):
    """|T^k(v_j)|: how many of item j's tags sit in cluster k."""

    onehot = sp.csr_matrix((np.ones(len(assignment)), (np.arange(len(assignment)), assignment)),
                           shape=(len(assignment), K))
    return np.asarray((it_labels @ onehot).todense(), dtype=np.float64)


def relatedness_matrix(it_labels, assignment, K):
    """Row-wise softmax of per-cluster tag counts."""

    return softmax(cluster_tag_counts(it_labels, assignment, K), axis=1)


def check_row_stochastic(name, matrix, tol=STOCHASTIC_TOL):
    if np.any(matrix < 0) or np.any(matrix > 1 + tol):
        raise AssertionError(f"{name} has entries outside [0, 1]")
    if not np.allclose(matrix.sum(axis=1), 1.0, atol=tol, rtol=0):
        raise AssertionError(f"{name} rows do not sum to 1")


def init_centers_kmeanspp(tag_table, K, seed=0):
    """k-means++ seeds, one assignment pass, then cluster means."""

    X = np.asarray(tag_table, dtype=np.float64)
    seeds, _ = kmeans_plusplus(X, n_clusters=K, random_state=seed)
    labels = np.argmin(squared_distances(X, seeds), axis=1)
    centers = seeds.copy()
    for k in range(K):
        members = labels == k
        if members.any():
            centers[k] = X[members].mean(axis=0)
    return centers.astype(tag_table.dtype)


def recover_empty_clusters(tag_table, centers, Q, empty):
    """Move each empty center onto the tag farthest from its own center."""

    current = hard_assign(Q)
    own = tag_table - centers[current]
    spread = np.einsum("ld,ld->l", own, own)
    taken = set()
    for k in empty:
        order = np.argsort(-spread, kind="stable")
        pick = next(int(l) for l in order if int(l) not in taken)
        taken.add(pick)
        logger.warning("cluster %d lost all mass; re-seeding at tag %d", k, pick)
        centers[k] = tag_table[pick]


def refresh(model, it_labels, eta=1.0):
    """Recompute Q, Q_hat, the hard map and M from current parameters."""

    tags = model.params["tag"]
    centers = model.params["centers"]
    K = centers.shape[0]

    Q = soft_assign(tags, centers, eta)
    try:
        Q_hat = target_distribution(Q)
    except DegenerateCluster as exc:
        recover_empty_clusters(tags, centers, Q, exc.clusters)
        Q = soft_assign(tags, centers, eta)
        Q_hat = target_distribution(Q)

    assignment = hard_assign(Q)
    counts = cluster_tag_counts(it_labels, assignment, K)
    M = softmax(counts, axis=1)

    check_row_stochastic("Q", Q)
    check_row_stochastic("Q_hat", Q_hat)
    check_row_stochastic("M", M)

    return ClusterState(centers=centers.copy(), Q=Q, Q_hat=Q_hat, hard_assign=assignment,
                        eta=eta, M=M, tag_counts=counts)


def cluster_members(assignment, tags, K):
    """Per-cluster tag names and sizes, for inspection."""

    members = {}
    for k in range(K):
        ids = np.flatnonzero(assignment == k)
        members[str(k)] = {"count": int(len(ids)), "tags": [tags.decode(int(i)) for i in ids]}
    return members
