"""Learnable parameters, backbone scoring and the BPR ranking losses."""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from errors import CheckpointError, DimError, DimMismatch, StaleCache

logger = logging.getLogger(__name__)

BPRMF = "bprmf"
NEUMF = "neumf"
LIGHTGCN = "lightgcn"
BACKBONES = (BPRMF, NEUMF, LIGHTGCN)

LEAKY_SLOPE = 0.01

CHECKPOINT_MAGIC = b"IMCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIQQQII8sI")

# Fixed table order inside a checkpoint.
EMBEDDING_PARAMS = ("user", "item", "tag")
CLUSTER_PARAMS = ("centers",)
HEAD_PARAMS = ("W0", "b0", "W1", "b1", "W2")
MLP_PARAMS = ("mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2", "mlp_W3", "mlp_b3")

BIAS_PARAMS = frozenset({"b0", "b1", "mlp_b1", "mlp_b2", "mlp_b3"})


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x):
    return np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype)


@dataclass(frozen=True)
class ModelDims:
    """Sizes that fix the shape of every parameter table."""

    n_users: int
    n_items: int
    n_tags: int
    d: int = 64
    K: int = 4
    backbone: str = BPRMF
    n_layers: int = 2

    @property
    def chunk_dim(self):
        return self.d // self.K

    def validate(self):
        if self.K < 1 or self.d < 1 or self.d % self.K:
            raise DimError(f"K={self.K} does not divide d={self.d}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == NEUMF and self.d < 2:
            raise DimError("NeuMF needs d >= 2")
        return self


@dataclass(eq=False)
class IntentEmbeddings:
    """User/item tables viewed as K chunks of d/K; tags keep the full d."""

    user_table: np.ndarray
    item_table: np.ndarray
    tag_table: np.ndarray
    K: int

    @property
    def d(self):
        return self.user_table.shape[1]

    @property
    def chunk_dim(self):
        return self.d // self.K

    def chunk(self, table, k):
        """Contiguous slice [k*d/K, (k+1)*d/K) of every row."""

        c = self.chunk_dim
        return table[:, k * c:(k + 1) * c]


@dataclass(eq=False)
class BackboneParams:
    variant: str
    mlp_weights: list
    n_layers: int
    normalized_adjacency: sp.csr_matrix = None


def xavier_uniform(rng, shape, dtype):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) over the last two axes."""

    fan_out, fan_in = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_adjacency(ui_train):
    """Symmetric degree-normalized bipartite adjacency over users then items.

    Zero-degree nodes get all-zero rows.
    """

    n_users, n_items = ui_train.shape
    R = sp.csr_matrix(ui_train, dtype=np.float64)
    R.data[:] = 1.0
    A = sp.bmat([[None, R], [R.T, None]], format="csr", dtype=np.float64)

    degrees = np.asarray(A.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(degrees > 0, 1.0 / np.sqrt(degrees), 0.0)
    D = sp.diags(inv_sqrt)
    return (D @ A @ D).tocsr()


def lightgcn_propagate(user_table, item_table, adjacency, n_layers=2):
    """Mean of layers 0..n_layers of repeated adjacency products."""

    n_users = user_table.shape[0]
    layer = np.vstack([user_table, item_table])
    total = layer.copy()
    for _ in range(n_layers):
        layer = adjacency @ layer
        total += layer
    total /= n_layers + 1
    return total[:n_users], total[n_users:]


class Model:
    """Every learnable table plus the backbone's propagation cache."""

    def __init__(self, dims, params, adjacency=None):
        self.dims = dims.validate()
        self.params = params
        self.adjacency = None
        self._adjacency_version = 0
        self._cache = None
        self._cache_version = -1
        if adjacency is not None:
            self.set_adjacency(adjacency)

    def __repr__(self):
        d = self.dims
        return (f"<Model {d.backbone} users={d.n_users} items={d.n_items} "
                f"tags={d.n_tags} d={d.d} K={d.K}>")

    @property
    def dtype(self):
        return self.params["user"].dtype

    @property
    def embeddings(self):
        p = self.params
        return IntentEmbeddings(p["user"], p["item"], p["tag"], self.dims.K)

    @property
    def backbone(self):
        weights = [(self.params[f"mlp_W{i}"], self.params[f"mlp_b{i}"])
                   for i in (1, 2, 3) if f"mlp_W{i}" in self.params]
        return BackboneParams(self.dims.backbone, weights, self.dims.n_layers, self.adjacency)

    def parameters(self):
        return self.params

    def set_adjacency(self, adjacency):
        self.adjacency = adjacency.astype(self.dtype)
        self._adjacency_version += 1

    def propagate(self):
        """Refresh the LightGCN cache from the current tables."""

        if self.dims.backbone != LIGHTGCN:
            return
        if self.adjacency is None:
            raise StaleCache("LightGCN model has no adjacency")
        users, items = lightgcn_propagate(self.params["user"], self.params["item"],
                                          self.adjacency, self.dims.n_layers)
        self._cache = (users, items)
        self._cache_version = self._adjacency_version

    def propagate_grad(self, grad_users, grad_items):
        """Pull gradients on propagated rows back to the raw tables.

        The normalized adjacency is symmetric, so the backward map is the
        forward map itself.
        """

        return lightgcn_propagate(grad_users, grad_items, self.adjacency, self.dims.n_layers)

    def vectors(self):
        """(user rows, item rows) the backbone scores with."""

        if self.dims.backbone != LIGHTGCN:
            return self.params["user"], self.params["item"]
        if self._cache is None or self._cache_version != self._adjacency_version:
            raise StaleCache("adjacency changed since the last propagation")
        return self._cache

    def score_pairs(self, users, items):
        users = np.asarray(users)
        items = np.asarray(items)
        U, V = self.vectors()
        if self.dims.backbone == NEUMF:
            return _mlp_forward(self.params, U[users], V[items])[0]
        return np.einsum("bd,bd->b", U[users], V[items])

    def score(self, user, item):
        return float(self.score_pairs([user], [item])[0])

    def score_all(self, users, block=32):
        """Scores of every item for each of `users`, shape (len(users), n_items)."""

        users = np.asarray(users)
        U, V = self.vectors()
        if self.dims.backbone != NEUMF:
            return U[users] @ V.T

        out = np.empty((len(users), V.shape[0]), dtype=U.dtype)
        p = self.params
        d = self.dims.d
        # First layer splits into user and item halves.
        item_part = V @ p["mlp_W1"][:, d:].T
        for start in range(0, len(users), block):
            chunk = users[start:start + block]
            user_part = U[chunk] @ p["mlp_W1"][:, :d].T + p["mlp_b1"]
            h1 = leaky_relu(user_part[:, None, :] + item_part[None, :, :])
            h2 = leaky_relu(h1 @ p["mlp_W2"].T + p["mlp_b2"])
            out[start:start + block] = (h2 @ p["mlp_W3"].T)[..., 0] + p["mlp_b3"][0]
        return out

    def check_finite(self):
        """Names of parameter tables holding NaN or Inf."""

        return [name for name, table in self.params.items() if not np.all(np.isfinite(table))]


def init_parameters(dims, seed=0, dtype=np.float32, adjacency=None):
    """Xavier-uniform weights, zero biases, deterministic under `seed`."""

    dims = dims.validate()
    rng = np.random.default_rng(seed)
    d, K, c = dims.d, dims.K, dims.chunk_dim

    params = {
        "user": xavier_uniform(rng, (dims.n_users, d), dtype),
        "item": xavier_uniform(rng, (dims.n_items, d), dtype),
        "tag": xavier_uniform(rng, (dims.n_tags, d), dtype),
        "centers": xavier_uniform(rng, (K, d), dtype),
        "W0": xavier_uniform(rng, (K, c, d), dtype),
        "b0": np.zeros((K, c), dtype=dtype),
        "W1": xavier_uniform(rng, (K, c, c), dtype),
        "b1": np.zeros((K, c), dtype=dtype),
        "W2": xavier_uniform(rng, (K, c, c), dtype),
    }
    if dims.backbone == NEUMF:
        h1, h2 = d, max(1, d // 2)
        params.update({
            "mlp_W1": xavier_uniform(rng, (h1, 2 * d), dtype),
            "mlp_b1": np.zeros(h1, dtype=dtype),
            "mlp_W2": xavier_uniform(rng, (h2, h1), dtype),
            "mlp_b2": np.zeros(h2, dtype=dtype),
            "mlp_W3": xavier_uniform(rng, (1, h2), dtype),
            "mlp_b3": np.zeros(1, dtype=dtype),
        })

    model = Model(dims, params, adjacency)
    if adjacency is not None:
        model.propagate()
    return model


def score(model, user, item):
    """Relevance of `item` for `user` under the model's backbone."""

    return model.score(user, item)


##############################################################################
# BPR losses


def _mlp_forward(p, U, V):
    h0 = np.concatenate([U, V], axis=1)
    a1 = h0 @ p["mlp_W1"].T + p["mlp_b1"]
    h1 = leaky_relu(a1)
    a2 = h1 @ p["mlp_W2"].T + p["mlp_b2"]
    h2 = leaky_relu(a2)
    y = (h2 @ p["mlp_W3"].T)[:, 0] + p["mlp_b3"][0]
    return y, (h0, a1, h1, a2, h2)


def _mlp_backward(p, dy, cache, grads):
    """Accumulate MLP weight gradients; return gradient w.r.t. the input pair."""

    h0, a1, h1, a2, h2 = cache
    grads["mlp_W3"] += dy[None, :] @ h2
    grads["mlp_b3"] += dy.sum()
    da2 = (dy[:, None] @ p["mlp_W3"]) * leaky_relu_grad(a2)
    grads["mlp_W2"] += da2.T @ h1
    grads["mlp_b2"] += da2.sum(axis=0)
    da1 = (da2 @ p["mlp_W2"]) * leaky_relu_grad(a1)
    grads["mlp_W1"] += da1.T @ h0
    grads["mlp_b1"] += da1.sum(axis=0)
    dh0 = da1 @ p["mlp_W1"]
    d = h0.shape[1] // 2
    return dh0[:, :d], dh0[:, d:]


def zero_grads(model):
    return {name: np.zeros_like(table) for name, table in model.params.items()}


def softplus(x):
    """log(1 + e^x) without overflow."""

    return np.logaddexp(0.0, x)


def bpr_loss(batch, model, grads=None, scale=1.0):
    """Mean of -log sigmoid(pos - neg) over the batch, i.e. softplus(neg - pos).

    User-item batches score with the backbone; item-tag batches score with the
    inner product of raw item and tag rows. Gradients (times `scale`) are added
    into `grads`, which is created when not given.
    """

    if len(batch) == 0:
        raise ValueError("empty batch")
    if grads is None:
        grads = zero_grads(model)

    p = model.params
    anchors, pos, neg = batch.anchors, batch.positives, batch.negatives
    n = len(anchors)

    if batch.mode == "item-tag":
        A, T = p["item"], p["tag"]
        diff = np.einsum("bd,bd->b", A[anchors], T[pos] - T[neg])
        loss = float(np.mean(softplus(-diff)))
        g = (-expit(-diff) / n * scale)[:, None].astype(A.dtype)
        np.add.at(grads["item"], anchors, g * (T[pos] - T[neg]))
        np.add.at(grads["tag"], pos, g * A[anchors])
        np.add.at(grads["tag"], neg, -g * A[anchors])
        return loss, grads

    U, V = model.vectors()
    backbone = model.dims.backbone

    if backbone == NEUMF:
        y_pos, cache_pos = _mlp_forward(p, U[anchors], V[pos])
        y_neg, cache_neg = _mlp_forward(p, U[anchors], V[neg])
        diff = y_pos - y_neg
        loss = float(np.mean(softplus(-diff)))
        g = (-expit(-diff) / n * scale).astype(U.dtype)
        du_pos, dv_pos = _mlp_backward(p, g, cache_pos, grads)
        du_neg, dv_neg = _mlp_backward(p, -g, cache_neg, grads)
        np.add.at(grads["user"], anchors, du_pos + du_neg)
        np.add.at(grads["item"], pos, dv_pos)
        np.add.at(grads["item"], neg, dv_neg)
        return loss, grads

    diff = np.einsum("bd,bd->b", U[anchors], V[pos] - V[neg])
    loss = float(np.mean(softplus(-diff)))
    g = (-expit(-diff) / n * scale)[:, None].astype(U.dtype)

    if backbone == BPRMF:
        np.add.at(grads["user"], anchors, g * (V[pos] - V[neg]))
        np.add.at(grads["item"], pos, g * U[anchors])
        np.add.at(grads["item"], neg, -g * U[anchors])
        return loss, grads

    grad_users = np.zeros_like(U)
    grad_items = np.zeros_like(V)
    np.add.at(grad_users, anchors, g * (V[pos] - V[neg]))
    np.add.at(grad_items, pos, g * U[anchors])
    np.add.at(grad_items, neg, -g * U[anchors])
    raw_users, raw_items = model.propagate_grad(grad_users, grad_items)
    grads["user"] += raw_users.astype(U.dtype)
    grads["item"] += raw_items.astype(U.dtype)
    return loss, grads


##############################################################################
# Checkpoints


def _ordered_names(model):
    names = list(EMBEDDING_PARAMS + CLUSTER_PARAMS + HEAD_PARAMS)
    if model.dims.backbone == NEUMF:
        names += MLP_PARAMS
    return names


def save_checkpoint(model, path):
    """Header then float32 little-endian tables in fixed order."""

    dims = model.dims
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(_CHECKPOINT_HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, dims.n_users, dims.n_items, dims.n_tags,
            dims.d, dims.K, dims.backbone.encode("ascii"), dims.n_layers))
        for name in _ordered_names(model):
            handle.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_checkpoint(path, adjacency=None, dtype=np.float32):
    """Rebuild a Model from `save_checkpoint` output."""

    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _CHECKPOINT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")

    (magic, version, n_users, n_items, n_tags, d, K, tag,
     n_layers) = _CHECKPOINT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    dims = ModelDims(n_users, n_items, n_tags, d, K, tag.rstrip(b"\0").decode("ascii"), n_layers)
    template = init_parameters(dims, seed=0, dtype=dtype)

    offset = _CHECKPOINT_HEADER.size
    params = {}
    for name in _ordered_names(template):
        shape = template.params[name].shape
        count = int(np.prod(shape))
        if offset + 4 * count > len(blob):
            raise CheckpointError(f"{path}: truncated at table {name}")
        table = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        params[name] = table.reshape(shape).astype(dtype)
        offset += 4 * count
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    model = Model(dims, params, adjacency)
    if adjacency is not None:
        model.propagate()
    return model


def check_compatible(model, dataset, d=None):
    """Raise DimMismatch unless the model's tables fit `dataset` (and `d`)."""

    if d is not None and d != model.dims.d:
        raise DimMismatch(f"checkpoint has d={model.dims.d}, expected d={d}")

    expected = (dataset.n_users, dataset.n_items, dataset.n_tags)
    found = (model.dims.n_users, model.dims.n_items, model.dims.n_tags)
    if expected != found:
        raise DimMismatch(f"checkpoint has (users, items, tags)={found}, "
                          f"dataset has {expected}")
