"""Joint objective, optimizer and training schedule."""

import copy
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict, fields

import numpy as np
import scipy.sparse as sp
from tqdm import tqdm

import alignment
import clustering
from dataset import BprSampler, Dataset, IdMap, USER_ITEM, ITEM_TAG
from errors import CheckFailed, NonFiniteLoss
from evaluation import evaluate_split
from models import (BIAS_PARAMS, LIGHTGCN, ModelDims, build_adjacency, bpr_loss,
                    init_parameters, load_checkpoint, save_checkpoint, zero_grads)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PRETRAIN_PARAMS = ("user", "item", "tag", "mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2",
                   "mlp_W3", "mlp_b3")

GRID = {
    "alpha": (1e-3, 1e-2, 1e-1, 1, 5, 10),
    "beta": (1e-3, 1e-2, 1e-1, 1, 5, 10),
    "gamma": (1e-3, 1e-2, 1e-1, 1, 5, 10),
    "delta": (0.1, 0.3, 0.5, 0.7, 0.9),
    "K": (1, 2, 4, 8, 16),
}

CHUNK_SAMPLE_ROWS = 16


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run.

    Loss weights follow L = L_UV + alpha L_VT + beta L_CA* + gamma L_KL
    + lambda_ind * independence. The `no_*` switches remove alignment pieces
    for ablations.
    """

    d: int = 64
    K: int = 4
    backbone: str = "bprmf"
    n_layers: int = 2
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-3
    eta: float = 1.0
    tau: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    delta: float = 0.7
    lambda_ind: float = 1e-2
    p_max: int = 4
    max_epochs: int = 3000
    patience: int = 100
    pretrain_epochs: int = 500
    cluster_update_every: int = 10
    topn: int = 20
    seed: int = 0
    deterministic: bool = True
    debug: bool = False
    propagate_every_step: bool = False
    propagated_alignment: bool = False
    independence_target: str = "centers"
    no_ui: bool = False
    no_ut: bool = False
    no_uit: bool = False
    no_nlt: bool = False
    no_isa: bool = False

    @classmethod
    def from_mapping(cls, values):
        names = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in names})

    def alignment_options(self):
        return alignment.AlignmentOptions(
            tau=self.tau,
            p_max=self.p_max,
            use_isa=not self.no_isa,
            use_item=not self.no_ui,
            use_tags=not self.no_ut,
            use_projection=not self.no_nlt,
            propagated=self.propagated_alignment,
        )

    def seeds(self):
        """(init, sampler, alignment, clustering) seeds.

        Outside deterministic mode they come from OS entropy.
        """

        base = self.seed if self.deterministic else int(np.random.SeedSequence().entropy % 2 ** 31)
        return base, base, base + 1, base + 2


@dataclass(eq=False)
class TrainState:
    epoch: int = 0
    iteration: int = 0
    adam_t: int = 0
    best_recall: float = -1.0
    best_epoch: int = 0
    active: bool = False
    moments: dict = field(default_factory=dict)
    sampler_rng: dict = None
    align_rng: dict = None
    cluster: clustering.ClusterState = None


@dataclass(eq=False)
class TrainResult:
    model: object
    best_model: object
    state: TrainState
    history: list


@dataclass
class GradCheckReport:
    loss: str
    max_rel_error: dict
    tolerance: float
    failed: set = field(default_factory=set)

    @property
    def ok(self):
        return not self.failed

    def to_dict(self):
        return {"loss": self.loss, "tolerance": self.tolerance,
                "max_rel_error": self.max_rel_error, "failed": sorted(self.failed)}


##############################################################################
# Regularizer and optimizer


def _distance_matrix(x):
    return np.abs(x[:, None] - x[None, :])


def _double_center(a):
    return a - a.mean(axis=0, keepdims=True) - a.mean(axis=1, keepdims=True) + a.mean()


def distance_correlation(x, y):
    """dCor of two equally long samples, with gradients w.r.t. x and y.

    Zero (and zero gradient) when either sample has no distance variance.
    """

    n = len(x)
    A = _double_center(_distance_matrix(x))
    B = _double_center(_distance_matrix(y))
    s_xy = np.sum(A * B) / n ** 2
    s_xx = np.sum(A * A) / n ** 2
    s_yy = np.sum(B * B) / n ** 2

    tiny = 1e-20
    if s_xx <= tiny or s_yy <= tiny or s_xy <= tiny:
        return 0.0, np.zeros_like(x), np.zeros_like(y)

    value = math.sqrt(s_xy) / (s_xx * s_yy) ** 0.25
    d_xy = value / (2 * s_xy)
    G_x = (d_xy * B - value / (2 * s_xx) * A) / n ** 2
    G_y = (d_xy * A - value / (2 * s_yy) * B) / n ** 2
    sign_x = np.sign(x[:, None] - x[None, :])
    sign_y = np.sign(y[:, None] - y[None, :])
    grad_x = 2 * np.sum(G_x * sign_x, axis=1)
    grad_y = 2 * np.sum(G_y * sign_y, axis=1)
    return float(min(value, 1.0)), grad_x, grad_y


def independence_penalty(vectors):
    """Mean distance correlation over unordered pairs of rows.

    Rows are intent vectors (cluster centers by default); each coordinate is
    one sample. Returns (value, gradient with the shape of `vectors`).
    """

    vectors = np.asarray(vectors)
    K = vectors.shape[0]
    grad = np.zeros_like(vectors, dtype=np.float64)
    if K < 2:
        return 0.0, grad

    pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]
    total = 0.0
    for a, b in pairs:
        value, grad_a, grad_b = distance_correlation(vectors[a].astype(np.float64),
                                                     vectors[b].astype(np.float64))
        total += value
        grad[a] += grad_a
        grad[b] += grad_b
    return total / len(pairs), grad / len(pairs)


def _independence_term(model, config, rng, grads, scale):
    K = model.dims.K
    if K < 2 or config.lambda_ind == 0:
        return 0.0

    if config.independence_target == "chunks":
        c = model.dims.chunk_dim
        items = model.params["item"]
        rows = rng.choice(items.shape[0], size=min(CHUNK_SAMPLE_ROWS, items.shape[0]),
                          replace=False)
        vectors = np.stack([items[rows, k * c:(k + 1) * c].ravel() for k in range(K)])
        value, grad = independence_penalty(vectors)
        if grads is not None:
            for k in range(K):
                grads["item"][rows, k * c:(k + 1) * c] += (
                    scale * grad[k].reshape(len(rows), c)).astype(items.dtype)
        return value

    value, grad = independence_penalty(model.params["centers"])
    if grads is not None:
        grads["centers"] += (scale * grad).astype(grads["centers"].dtype)
    return value


def adam_step(params, grads, moments, lr, weight_decay, t, names=None):
    """In-place Adam update with bias correction and decoupled weight decay.

    Decay multiplies every non-bias table by (1 - lr * weight_decay).
    """

    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    names = params.keys() if names is None else names
    for name in names:
        param, grad = params[name], grads[name]
        if name not in moments:
            moments[name] = (np.zeros_like(param), np.zeros_like(param))
        m, v = moments[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * grad * grad
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        if weight_decay and name not in BIAS_PARAMS:
            param *= 1 - lr * weight_decay
        param -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(param.dtype)
    return params


##############################################################################
# Objective


@dataclass(eq=False)
class TrainContext:
    """Everything besides parameters that a step reads."""

    dataset: Dataset
    config: TrainConfig
    cluster: clustering.ClusterState = None
    cache: alignment.AlignmentCache = None
    align_rng: np.random.Generator = None
    active: bool = False


def joint_loss(batches, model, context, grads=None):
    """L_UV + alpha L_VT (+ beta L_CA* + gamma L_KL + lambda_ind L_ind once active).

    `batches` is (user-item batch, item-tag batch, alignment anchors). Returns
    (total, per-term values, grads).
    """

    config = context.config
    ui_batch, it_batch, anchors = batches
    if grads is None:
        grads = zero_grads(model)

    terms = {"uv": 0.0, "vt": 0.0, "ca": 0.0, "kl": 0.0, "ind": 0.0}
    terms["uv"], _ = bpr_loss(ui_batch, model, grads)
    if config.alpha:
        terms["vt"], _ = bpr_loss(it_batch, model, grads, scale=config.alpha)

    if context.active:
        if config.beta and not config.no_uit:
            terms["ca"], _ = alignment.alignment_loss(
                model, context.cache, context.cluster.M, anchors,
                config.alignment_options(), context.align_rng, grads, scale=config.beta)
        if config.gamma:
            terms["kl"], _ = clustering.clustering_loss(
                context.cluster.Q_hat, model, config.eta, grads, scale=config.gamma)
        if config.lambda_ind:
            terms["ind"] = _independence_term(model, config, context.align_rng, grads,
                                              config.lambda_ind)

    total = (terms["uv"] + config.alpha * terms["vt"] + config.beta * terms["ca"]
             + config.gamma * terms["kl"] + config.lambda_ind * terms["ind"])
    return total, terms, grads


##############################################################################
# Schedule


def model_dims(dataset, config):
    return ModelDims(dataset.n_users, dataset.n_items, dataset.n_tags, config.d, config.K,
                     config.backbone, config.n_layers)


def refresh_clusters(model, context):
    """Stop-the-world recompute of Q, Q_hat, hard map, M and similar sets."""

    config = context.config
    previous = context.cluster.hard_assign if context.cluster is not None else None
    context.cluster = clustering.refresh(model, context.dataset.it_labels, config.eta)
    if previous is None or context.cache is None or not np.array_equal(
            previous, context.cluster.hard_assign):
        context.cache = alignment.build_alignment_cache(
            context.dataset.ui_train, context.dataset.it_labels, context.cluster.hard_assign,
            config.K, None if config.no_isa else config.delta)


def activate_clustering(model, context, state, seed):
    """Seed centers from the pre-trained tag table and switch the joint terms on."""

    centers = clustering.init_centers_kmeanspp(model.params["tag"], context.config.K, seed)
    model.params["centers"][...] = centers
    state.moments.pop("centers", None)
    context.active = True
    state.active = True
    refresh_clusters(model, context)
    logger.info("clustering active from epoch %d (iteration %d)", state.epoch, state.iteration)


def _trainable(model, active):
    if active:
        return list(model.params)
    return [name for name in PRETRAIN_PARAMS if name in model.params]


def _dump_nonfinite(run_dir, diagnostics):
    if run_dir:
        with open(os.path.join(run_dir, "nonfinite.json"), "w") as handle:
            json.dump(diagnostics, handle, indent=2, default=str)


def _save_state(path, state):
    arrays = {}
    for name, (m, v) in state.moments.items():
        arrays[f"m/{name}"] = m
        arrays[f"v/{name}"] = v
    if state.cluster is not None:
        arrays["cluster/Q"] = state.cluster.Q
        arrays["cluster/Q_hat"] = state.cluster.Q_hat
        arrays["cluster/hard_assign"] = state.cluster.hard_assign
        arrays["cluster/M"] = state.cluster.M
        arrays["cluster/tag_counts"] = state.cluster.tag_counts
        arrays["cluster/centers"] = state.cluster.centers
    meta = {
        "epoch": state.epoch, "iteration": state.iteration, "adam_t": state.adam_t,
        "best_recall": state.best_recall, "best_epoch": state.best_epoch,
        "active": state.active, "sampler_rng": state.sampler_rng, "align_rng": state.align_rng,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)


def load_state(path, eta=1.0):
    """TrainState saved next to a checkpoint."""

    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        state = TrainState(**{key: meta[key] for key in (
            "epoch", "iteration", "adam_t", "best_recall", "best_epoch", "active",
            "sampler_rng", "align_rng")})
        for key in archive.files:
            if key.startswith("m/"):
                name = key[2:]
                state.moments[name] = (archive[key].copy(), archive[f"v/{name}"].copy())
        if "cluster/Q" in archive.files:
            state.cluster = clustering.ClusterState(
                centers=archive["cluster/centers"].copy(), Q=archive["cluster/Q"].copy(),
                Q_hat=archive["cluster/Q_hat"].copy(),
                hard_assign=archive["cluster/hard_assign"].copy(), eta=eta,
                M=archive["cluster/M"].copy(), tag_counts=archive["cluster/tag_counts"].copy())
    return state


def state_path(checkpoint_path):
    return checkpoint_path + ".state.npz"


def train(dataset, config, run_dir=None, resume=None, progress=False):
    """Pre-train, activate clustering, early-stop on validation Recall@topn.

    With `run_dir`, writes history.jsonl, ckpt_last.imck and ckpt_best.imck.
    `resume` is a checkpoint path saved by an earlier call.
    """

    adjacency = build_adjacency(dataset.ui_train) if config.backbone == LIGHTGCN else None
    init_seed, sampler_seed, align_seed, cluster_seed = config.seeds()
    sampler = BprSampler(dataset, seed=sampler_seed)
    context = TrainContext(dataset, config, align_rng=np.random.default_rng(align_seed))

    if resume:
        model = load_checkpoint(resume, adjacency)
        state = load_state(state_path(resume), config.eta)
        sampler.rng.bit_generator.state = state.sampler_rng
        context.align_rng.bit_generator.state = state.align_rng
        context.active = state.active
        if state.cluster is not None:
            context.cluster = state.cluster
            context.cache = alignment.build_alignment_cache(
                dataset.ui_train, dataset.it_labels, state.cluster.hard_assign, config.K,
                None if config.no_isa else config.delta)
        logger.info("resuming from %s at epoch %d", resume, state.epoch)
    else:
        model = init_parameters(model_dims(dataset, config), seed=init_seed, adjacency=adjacency)
        state = TrainState()

    best_params = copy.deepcopy(model.params)
    if resume and run_dir and os.path.exists(os.path.join(run_dir, "ckpt_best.imck")):
        best_params = load_checkpoint(os.path.join(run_dir, "ckpt_best.imck")).params

    history = []
    history_path = os.path.join(run_dir, "history.jsonl") if run_dir else None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        if not resume and os.path.exists(history_path):
            os.remove(history_path)

    n_items = dataset.n_items
    anchors_per_step = min(config.batch_size, n_items)
    epochs = range(state.epoch + 1, config.max_epochs + 1)

    for epoch in tqdm(epochs, desc="epochs", disable=not progress):
        state.epoch = epoch
        started = time.perf_counter()

        if not context.active and epoch > config.pretrain_epochs:
            activate_clustering(model, context, state, cluster_seed)

        model.propagate()
        sums = {"uv": 0.0, "vt": 0.0, "ca": 0.0, "kl": 0.0, "ind": 0.0, "total": 0.0}
        steps = 0
        for ui_batch, it_batch in sampler.epoch(config.batch_size):
            if context.active and state.iteration % config.cluster_update_every == 0:
                refresh_clusters(model, context)
            anchors = context.align_rng.choice(n_items, size=anchors_per_step, replace=False)

            total, terms, grads = joint_loss((ui_batch, it_batch, anchors), model, context)
            if not math.isfinite(total):
                diagnostics = {"epoch": epoch, "iteration": state.iteration, "terms": terms,
                               "nonfinite_params": model.check_finite()}
                _dump_nonfinite(run_dir, diagnostics)
                raise NonFiniteLoss(diagnostics)

            state.adam_t += 1
            adam_step(model.params, grads, state.moments, config.lr, config.weight_decay,
                      state.adam_t, _trainable(model, context.active))
            state.iteration += 1

            if config.propagate_every_step:
                model.propagate()
            if config.debug:
                broken = model.check_finite()
                if broken:
                    diagnostics = {"epoch": epoch, "iteration": state.iteration,
                                   "terms": terms, "nonfinite_params": broken}
                    _dump_nonfinite(run_dir, diagnostics)
                    raise NonFiniteLoss(diagnostics)

            for key, value in terms.items():
                sums[key] += value
            sums["total"] += total
            steps += 1

        model.propagate()
        metrics = evaluate_split(model, dataset, "valid", (config.topn,))
        recall = metrics[f"recall@{config.topn}"]
        record = {"epoch": epoch, **{f"loss_{k}": v / max(steps, 1) for k, v in sums.items()},
                  f"valid_recall@{config.topn}": recall,
                  f"valid_ndcg@{config.topn}": metrics[f"ndcg@{config.topn}"],
                  "seconds": time.perf_counter() - started}
        history.append(record)
        logger.debug("epoch %d: %s", epoch, record)

        if recall > state.best_recall:
            state.best_recall = recall
            state.best_epoch = epoch
            best_params = copy.deepcopy(model.params)
            if run_dir:
                save_checkpoint(model, os.path.join(run_dir, "ckpt_best.imck"))

        state.sampler_rng = sampler.rng.bit_generator.state
        state.align_rng = context.align_rng.bit_generator.state
        state.cluster = context.cluster
        if run_dir:
            with open(history_path, "a") as handle:
                handle.write(json.dumps(record) + "\n")
            last = os.path.join(run_dir, "ckpt_last.imck")
            save_checkpoint(model, last)
            _save_state(state_path(last), state)

        if epoch - state.best_epoch >= config.patience:
            logger.info("early stop at epoch %d; best valid recall %.4f at epoch %d",
                        epoch, state.best_recall, state.best_epoch)
            break

    best_model = init_parameters(model.dims, seed=0, adjacency=adjacency)
    for name, table in best_params.items():
        best_model.params[name][...] = table
    best_model.propagate()
    return TrainResult(model=model, best_model=best_model, state=state, history=history)


##############################################################################
# Gradient checking


LOSSES = ("uv", "vt", "kl", "ca", "ca_star", "ind")


def tiny_problem(seed=0, n_users=6, n_items=7, n_tags=8, density=0.4):
    """Random small split dataset where every row has a positive and a negative."""

    rng = np.random.default_rng(seed)

    def incidence(n_rows, n_cols):
        table = rng.random((n_rows, n_cols)) < density
        for row in range(n_rows):
            table[row, rng.integers(n_cols)] = True
            if table[row].all():
                table[row, rng.integers(n_cols)] = False
        return sp.csr_matrix(table.astype(np.float32))

    ui = incidence(n_users, n_items)
    empty = sp.csr_matrix((n_users, n_items), dtype=np.float32)
    return Dataset(
        ui_train=ui, ui_valid=empty, ui_test=empty,
        it_labels=incidence(n_items, n_tags),
        users=IdMap(f"u{i}" for i in range(n_users)),
        items=IdMap(f"i{i}" for i in range(n_items)),
        tags=IdMap(f"t{i}" for i in range(n_tags)),
    )


def _loss_closure(loss_name, model, dataset, config, seed):
    """f(grads) -> loss for one selected term at the model's current params."""

    sampler = BprSampler(dataset, seed=seed)
    ui_batch = sampler.sample(USER_ITEM, 8)
    it_batch = sampler.sample(ITEM_TAG, 8)
    # every intent holds tags, and W0 t + b0 is never the zero row, where the
    # normalization is not differentiable
    model.params["centers"][...] = clustering.init_centers_kmeanspp(
        model.params["tag"], config.K, seed)
    model.params["b0"][...] = np.random.default_rng(seed).normal(
        scale=0.1, size=model.params["b0"].shape)
    cluster = clustering.refresh(model, dataset.it_labels, config.eta)
    delta = None if loss_name == "ca" else config.delta
    cache = alignment.build_alignment_cache(dataset.ui_train, dataset.it_labels,
                                            cluster.hard_assign, config.K, delta)
    anchors = np.arange(min(dataset.n_items, 6))
    options = config.alignment_options()
    if loss_name == "ca":
        options = alignment.AlignmentOptions(**{**asdict(options), "use_isa": False})

    def evaluate(grads):
        model.propagate()
        if loss_name == "uv":
            return bpr_loss(ui_batch, model, grads)[0]
        if loss_name == "vt":
            return bpr_loss(it_batch, model, grads)[0]
        if loss_name == "kl":
            return clustering.clustering_loss(cluster.Q_hat, model, config.eta, grads)[0]
        if loss_name in ("ca", "ca_star"):
            rng = np.random.default_rng(seed)
            return alignment.alignment_loss(model, cache, cluster.M, anchors, options, rng,
                                            grads)[0]
        if loss_name == "ind":
            rng = np.random.default_rng(seed)
            return _independence_term(model, config, rng, grads, 1.0)
        raise ValueError(f"unknown loss {loss_name!r}")

    return evaluate


def grad_check(model, dataset, loss_name, config=None, tolerance=1e-4, eps=1e-6, seed=0,
               abs_floor=1e-5):
    """Central differences against analytic gradients for one loss term.

    Every entry of every parameter table is perturbed, so keep the instance
    tiny and the model float64.

    Centers are re-seeded with k-means++ and b0 is drawn off zero first, the
    same state the alignment terms see once clustering is active.
    """

    if loss_name not in LOSSES:
        raise ValueError(f"unknown loss {loss_name!r}; choose from {LOSSES}")
    config = config or TrainConfig(d=model.dims.d, K=model.dims.K, backbone=model.dims.backbone)
    evaluate = _loss_closure(loss_name, model, dataset, config, seed)

    analytic = zero_grads(model)
    evaluate(analytic)

    report = GradCheckReport(loss=loss_name, max_rel_error={}, tolerance=tolerance)
    for name, table in model.params.items():
        worst = 0.0
        flat = table.reshape(-1)
        flat_grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = evaluate(None)
            flat[i] = original - eps
            minus = evaluate(None)
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            error = abs(numeric - flat_grad[i]) / max(abs(numeric), abs(flat_grad[i]), abs_floor)
            worst = max(worst, error)
        model.propagate()
        report.max_rel_error[name] = worst
        if worst > tolerance:
            report.failed.add(name)

    if report.failed:
        raise CheckFailed(report)
    return report
