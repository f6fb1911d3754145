"""Intent-aware contrastive alignment of users, items and tags.

For every item in a mini-batch and every intent k the user side is the mean
k-chunk of the item's training users, and the item side fuses the item's
k-chunk with a linear transform of the mean embedding of the item's tags that
fall in tag cluster k. Both sides pass through a per-intent projection head
and are aligned with a relatedness-weighted bidirectional InfoNCE loss whose
negatives are the other items of the batch. The set-to-set variant admits as
extra positives items whose cluster-k tag sets overlap the anchor's by more
than a Jaccard threshold.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp, softmax

from models import LIGHTGCN, leaky_relu, leaky_relu_grad

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class AlignmentHeads:
    """Per-intent tag transform (W0, b0) and projection head (W1, b1, W2)."""

    W0: np.ndarray
    b0: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray

    @classmethod
    def from_params(cls, params):
        return cls(params["W0"], params["b0"], params["W1"], params["b1"], params["W2"])

    @property
    def K(self):
        return self.W0.shape[0]


@dataclass(frozen=True)
class AlignmentOptions:
    """Switches that shape the alignment objective."""

    tau: float = 1.0
    p_max: int = 4
    use_isa: bool = True
    use_item: bool = True
    use_tags: bool = True
    use_projection: bool = True
    propagated: bool = False


@dataclass(eq=False)
class SimilarSets:
    """Per-intent symmetric item-item membership, self excluded."""

    delta: float
    neighbors: list

    def members(self, k, item):
        table = self.neighbors[k]
        return table.indices[table.indptr[item]:table.indptr[item + 1]]

    def n_pairs(self, k):
        return self.neighbors[k].nnz // 2

    def to_json(self):
        intents = {}
        for k, table in enumerate(self.neighbors):
            rows = np.flatnonzero(np.diff(table.indptr))
            intents[str(k)] = {str(int(j)): [int(x) for x in self.members(k, j)] for j in rows}
        return {"delta": self.delta, "intents": intents}


@dataclass(eq=False)
class AlignmentCache:
    """Row-normalized aggregation operators plus the current similar sets.

    `item_users` averages training users per item; `item_tags[k]` averages the
    item's tags in cluster k. Rebuilt whenever the hard assignment changes.
    """

    item_users: sp.csr_matrix
    item_tags: list
    assignment: np.ndarray
    similar_sets: SimilarSets = None


@dataclass(eq=False)
class AlignmentBatch:
    """Forward state for one batch; anchors are the first `n_anchors` columns."""

    items: np.ndarray
    n_anchors: int
    user_agg: list
    tag_agg: list
    tag_hat: list
    item_chunks: list
    fused: list
    user_proj: list
    fused_proj: list
    positive_weights: list
    tau: float
    caches: dict = field(default_factory=dict)

    @property
    def anchors(self):
        return self.items[:self.n_anchors]


def normalize_rows(matrix):
    """Divide each sparse row by its entry count; empty rows stay empty."""

    matrix = sp.csr_matrix(matrix, dtype=np.float64)
    matrix.data[:] = 1.0
    counts = np.diff(matrix.indptr)
    with np.errstate(divide="ignore"):
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return sp.diags(inv) @ matrix


def build_alignment_cache(ui_train, it_labels, assignment, K, delta=None):
    item_users = normalize_rows(ui_train.T.tocsr()).tocsr()
    item_tags = []
    for k in range(K):
        mask = sp.diags((np.asarray(assignment) == k).astype(np.float64))
        restricted = (it_labels @ mask).tocsr()
        restricted.eliminate_zeros()
        item_tags.append(normalize_rows(restricted).tocsr())
    sets = build_similar_sets(it_labels, assignment, K, delta) if delta is not None else None
    return AlignmentCache(item_users, item_tags, np.array(assignment, copy=True), sets)


##############################################################################
# Single-item building blocks


def aggregate_users(item, ui_train, user_table, k, K):
    """Mean k-chunk of the item's training users; zeros when it has none."""

    c = user_table.shape[1] // K
    users = ui_train.tocsc()[:, item].indices
    if len(users) == 0:
        return np.zeros(c, dtype=user_table.dtype)
    return user_table[users, k * c:(k + 1) * c].mean(axis=0)


def aggregate_tags(item, it_labels, assignment, tag_table, k):
    """Mean full tag row over the item's tags in cluster k; zeros when none."""

    tags = it_labels[item].indices
    tags = tags[np.asarray(assignment)[tags] == k]
    if len(tags) == 0:
        return np.zeros(tag_table.shape[1], dtype=tag_table.dtype)
    return tag_table[tags].mean(axis=0)


def l2_normalize(x):
    """Unit rows; all-zero rows stay zero."""

    x = np.atleast_2d(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, x / safe, 0.0), norms


def _l2_normalize_grad(x, unit, norms, grad):
    safe = np.where(norms > 0, norms, 1.0)
    radial = np.sum(unit * grad, axis=1, keepdims=True)
    return np.where(norms > 0, (grad - unit * radial) / safe, 0.0)


def fuse_item_tag(tag_mean, item_chunk, heads, k, use_item=True, use_tags=True):
    """normalize(W0 t + b0) + normalize(v^k) for one item or a block of items."""

    tag_hat = np.atleast_2d(tag_mean) @ heads.W0[k].T + heads.b0[k]
    fused = np.zeros_like(tag_hat)
    if use_tags:
        fused = fused + l2_normalize(tag_hat)[0]
    if use_item:
        fused = fused + l2_normalize(item_chunk)[0]
    return fused[0] if np.ndim(tag_mean) == 1 else fused


def _project_forward(x, heads, k):
    hidden = x @ heads.W1[k].T + heads.b1[k]
    return leaky_relu(hidden) @ heads.W2[k].T, hidden


def project(x, heads, k):
    """W2 LeakyReLU(W1 x + b1) with the intent-k head."""

    out, _ = _project_forward(np.atleast_2d(x), heads, k)
    return out[0] if np.ndim(x) == 1 else out


def jaccard_similarity(tags_a, tags_b):
    """|A & B| / |A | B|, and 0 when both sets are empty."""

    tags_a, tags_b = set(tags_a), set(tags_b)
    union = tags_a | tags_b
    if not union:
        return 0.0
    return len(tags_a & tags_b) / len(union)


def build_similar_sets(it_labels, assignment, K, delta):
    """Item pairs whose cluster-k tag sets have Jaccard index above delta."""

    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")

    n_items = it_labels.shape[0]
    neighbors = []
    for k in range(K):
        mask = sp.diags((np.asarray(assignment) == k).astype(np.float64))
        restricted = (sp.csr_matrix(it_labels, dtype=np.float64) @ mask).tocsr()
        restricted.eliminate_zeros()
        sizes = np.diff(restricted.indptr)

        shared = (restricted @ restricted.T).tocoo()
        rows, cols, overlap = shared.row, shared.col, shared.data
        union = sizes[rows] + sizes[cols] - overlap
        keep = (rows != cols) & (overlap / union > delta)

        table = sp.csr_matrix((np.ones(int(keep.sum()), dtype=np.int8), (rows[keep], cols[keep])),
                              shape=(n_items, n_items))
        table.sort_indices()
        neighbors.append(table)
        logger.debug("intent %d: %d similar pairs above %.2f", k, table.nnz // 2, delta)
    return SimilarSets(delta, neighbors)


def sample_positive_sets(anchors, similar_sets, K, p_max, rng):
    """P^k_j: the anchor itself plus up to p_max-1 distinct similar items."""

    positives = []
    for k in range(K):
        per_anchor = []
        for j in anchors:
            chosen = [int(j)]
            if similar_sets is not None and p_max > 1:
                pool = similar_sets.members(k, j)
                if len(pool) > p_max - 1:
                    pool = rng.choice(pool, size=p_max - 1, replace=False)
                chosen.extend(int(x) for x in pool)
            per_anchor.append(chosen)
        positives.append(per_anchor)
    return positives


##############################################################################
# Batched forward and losses


def build_batch(anchors, positives, cache, user_table, item_table, tag_table, heads,
                options=AlignmentOptions()):
    """Aggregate, fuse and project every intent for anchors and extra positives.

    `positives[k][i]` lists the positive items of `anchors[i]` under intent k;
    positives outside the anchor set are appended as extra columns.
    """

    anchors = np.asarray(anchors, dtype=np.int64)
    if len(np.unique(anchors)) != len(anchors):
        raise ValueError("alignment anchors must be distinct")

    K = heads.K
    c = user_table.shape[1] // K
    column_of = {int(j): i for i, j in enumerate(anchors)}
    extra = []
    for per_anchor in positives:
        for chosen in per_anchor:
            for j in chosen:
                if j not in column_of:
                    column_of[j] = len(anchors) + len(extra)
                    extra.append(j)
    items = np.concatenate([anchors, np.asarray(extra, dtype=np.int64)])

    user_mean = cache.item_users[items]
    users_all = user_mean @ user_table

    batch = AlignmentBatch(items=items, n_anchors=len(anchors), user_agg=[], tag_agg=[],
                           tag_hat=[], item_chunks=[], fused=[], user_proj=[], fused_proj=[],
                           positive_weights=[], tau=options.tau)
    batch.caches = {"user_mean": user_mean, "tag_mean": [], "norm_tag": [], "norm_item": [],
                    "hidden_user": [], "hidden_fused": []}

    for k in range(K):
        sl = slice(k * c, (k + 1) * c)
        tag_mean = cache.item_tags[k][items]
        tag_agg = tag_mean @ tag_table
        tag_hat = tag_agg @ heads.W0[k].T + heads.b0[k]
        item_chunk = item_table[items, sl]

        unit_tag, tag_norms = l2_normalize(tag_hat)
        unit_item, item_norms = l2_normalize(item_chunk)
        fused = np.zeros_like(tag_hat)
        if options.use_tags:
            fused = fused + unit_tag
        if options.use_item:
            fused = fused + unit_item

        user_agg = users_all[:, sl]
        if options.use_projection:
            user_proj, hidden_user = _project_forward(user_agg, heads, k)
            fused_proj, hidden_fused = _project_forward(fused, heads, k)
        else:
            user_proj, hidden_user = user_agg, None
            fused_proj, hidden_fused = fused, None

        weights = np.zeros((len(anchors), len(items)), dtype=np.float64)
        for i, chosen in enumerate(positives[k]):
            for j in chosen:
                weights[i, column_of[j]] = 1.0 / len(chosen)

        batch.user_agg.append(user_agg)
        batch.tag_agg.append(tag_agg)
        batch.tag_hat.append(tag_hat)
        batch.item_chunks.append(item_chunk)
        batch.fused.append(fused)
        batch.user_proj.append(user_proj)
        batch.fused_proj.append(fused_proj)
        batch.positive_weights.append(weights)
        batch.caches["tag_mean"].append(tag_mean)
        batch.caches["norm_tag"].append((unit_tag, tag_norms))
        batch.caches["norm_item"].append((unit_item, item_norms))
        batch.caches["hidden_user"].append(hidden_user)
        batch.caches["hidden_fused"].append(hidden_fused)

    return batch


def info_nce(anchor_reps, column_reps, weights, positive_weights, tau):
    """sum_j w_j * sum_c P[j,c] * -log softmax(anchor_j . column / tau)_c.

    Returns the loss and its gradient w.r.t. the logits.
    """

    logits = anchor_reps @ column_reps.T / tau
    log_prob = logits - logsumexp(logits, axis=1, keepdims=True)
    per_anchor = -np.sum(positive_weights * log_prob, axis=1)
    loss = float(np.sum(weights * per_anchor))
    dlogits = weights[:, None] * (softmax(logits, axis=1) - positive_weights)
    return loss, dlogits


def _bidirectional(batch, M, tau, positive_weights):
    n = batch.n_anchors
    K = len(batch.user_proj)
    rows = np.asarray(M)[batch.anchors]
    total = 0.0
    grad_user, grad_fused = [], []
    for k in range(K):
        a, b = batch.user_proj[k], batch.fused_proj[k]
        weights = rows[:, k]
        u2it, d_u2it = info_nce(a[:n], b, weights, positive_weights[k], tau)
        it2u, d_it2u = info_nce(b[:n], a, weights, positive_weights[k], tau)
        total += u2it + it2u

        scale = 1.0 / (2 * K * tau)
        da = np.zeros_like(a)
        db = np.zeros_like(b)
        da[:n] += scale * (d_u2it @ b)
        db += scale * (d_u2it.T @ a[:n])
        db[:n] += scale * (d_it2u @ a)
        da += scale * (d_it2u.T @ b[:n])
        grad_user.append(da)
        grad_fused.append(db)
    return total / (2 * K), (grad_user, grad_fused)


def contrastive_loss(batch, M, tau=None):
    """Relatedness-weighted bidirectional InfoNCE with the item itself as positive."""

    tau = batch.tau if tau is None else tau
    identity = [np.eye(batch.n_anchors, len(batch.items)) for _ in batch.user_proj]
    return _bidirectional(batch, M, tau, identity)


def set_to_set_loss(batch, M, tau=None):
    """InfoNCE averaged over each anchor's positive set P^k_j."""

    tau = batch.tau if tau is None else tau
    return _bidirectional(batch, M, tau, batch.positive_weights)


def backward(batch, grad_user, grad_fused, heads, grads, options=AlignmentOptions(),
             scale=1.0, user_grad=None, item_grad=None):
    """Chain gradients on projected representations back to every parameter.

    User/item row gradients go into `user_grad`/`item_grad` when given
    (propagated tables) and into grads["user"]/grads["item"] otherwise.
    """

    user_grad = grads["user"] if user_grad is None else user_grad
    item_grad = grads["item"] if item_grad is None else item_grad
    K = heads.K
    c = heads.W1.shape[1]
    user_rows = np.zeros((len(batch.items), K * c), dtype=np.float64)

    for k in range(K):
        sl = slice(k * c, (k + 1) * c)
        d_user = scale * grad_user[k]
        d_fused = scale * grad_fused[k]

        if options.use_projection:
            d_user = _project_backward(batch.user_agg[k], batch.caches["hidden_user"][k],
                                       d_user, heads, k, grads)
            d_fused = _project_backward(batch.fused[k], batch.caches["hidden_fused"][k],
                                        d_fused, heads, k, grads)
        user_rows[:, sl] = d_user

        if options.use_item:
            unit, norms = batch.caches["norm_item"][k]
            d_item = _l2_normalize_grad(batch.item_chunks[k], unit, norms, d_fused)
            item_grad[batch.items, sl] += d_item.astype(item_grad.dtype)

        if options.use_tags:
            unit, norms = batch.caches["norm_tag"][k]
            d_hat = _l2_normalize_grad(batch.tag_hat[k], unit, norms, d_fused)
            grads["W0"][k] += (d_hat.T @ batch.tag_agg[k]).astype(grads["W0"].dtype)
            grads["b0"][k] += d_hat.sum(axis=0).astype(grads["b0"].dtype)
            d_agg = d_hat @ heads.W0[k]
            grads["tag"] += np.asarray(batch.caches["tag_mean"][k].T @ d_agg,
                                       dtype=grads["tag"].dtype)

    user_grad += np.asarray(batch.caches["user_mean"].T @ user_rows, dtype=user_grad.dtype)
    return grads


def _project_backward(x, hidden, d_out, heads, k, grads):
    activated = leaky_relu(hidden)
    grads["W2"][k] += (d_out.T @ activated).astype(grads["W2"].dtype)
    d_hidden = (d_out @ heads.W2[k]) * leaky_relu_grad(hidden)
    grads["W1"][k] += (d_hidden.T @ x).astype(grads["W1"].dtype)
    grads["b1"][k] += d_hidden.sum(axis=0).astype(grads["b1"].dtype)
    return d_hidden @ heads.W1[k]


def alignment_loss(model, cache, M, anchors, options, rng, grads=None, scale=1.0):
    """Full set-to-set alignment term for one batch of anchor items.

    With `use_isa` off (or no similar sets) every positive set is the anchor
    alone and the value equals `contrastive_loss`.
    """

    heads = AlignmentHeads.from_params(model.params)
    K = heads.K
    p_max = options.p_max if options.use_isa else 1
    positives = sample_positive_sets(anchors, cache.similar_sets if options.use_isa else None,
                                     K, p_max, rng)

    propagated = options.propagated and model.dims.backbone == LIGHTGCN
    users, items = model.vectors() if propagated else (model.params["user"], model.params["item"])

    batch = build_batch(anchors, positives, cache, users, items, model.params["tag"], heads,
                        options)
    loss, (grad_user, grad_fused) = set_to_set_loss(batch, M, options.tau)

    if grads is not None:
        if propagated:
            user_grad = np.zeros_like(users)
            item_grad = np.zeros_like(items)
            backward(batch, grad_user, grad_fused, heads, grads, options, scale,
                     user_grad, item_grad)
            raw_users, raw_items = model.propagate_grad(user_grad, item_grad)
            grads["user"] += raw_users.astype(grads["user"].dtype)
            grads["item"] += raw_items.astype(grads["item"].dtype)
        else:
            backward(batch, grad_user, grad_fused, heads, grads, options, scale)
    return loss, grads
