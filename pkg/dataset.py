"""Interaction and tag data: ingestion, filtering, splitting and sampling."""

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, asdict
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp

from errors import (BundleError, EmptyAfterFilter, MissingFile,
                    NoNegativeAvailable, ParseError)

logger = logging.getLogger(__name__)

UI_SCHEMA = ("user", "item")
UI_RATED_SCHEMA = ("user", "item", "rating")
UI_FULL_SCHEMA = ("user", "item", "rating", "timestamp")
IT_SCHEMA = ("item", "tag")

RATING_RANGE = (0.0, 5.0)

BUNDLE_MAGIC = b"IMCT"
BUNDLE_VERSION = 1
_BUNDLE_HEADER = struct.Struct("<4sIQQ")

USER_ITEM = "user-item"
ITEM_TAG = "item-tag"
MODES = (USER_ITEM, ITEM_TAG)


@dataclass(frozen=True)
class RawInteraction:
    """One user-item line before binarization."""

    user_ref: str
    item_ref: str
    rating: Optional[float] = None
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class RawLabel:
    """One item-tag line."""

    item_ref: str
    tag_ref: str


class IdMap:
    """Bijection between external references and dense ids 0..n-1."""

    def __init__(self, externals):
        self.externals = tuple(str(ref) for ref in externals)
        self._dense = {ref: i for i, ref in enumerate(self.externals)}
        if len(self._dense) != len(self.externals):
            raise ValueError("duplicate external ids")

    def __len__(self):
        return len(self.externals)

    def __eq__(self, other):
        return isinstance(other, IdMap) and self.externals == other.externals

    def __repr__(self):
        return f"<IdMap n={len(self)}>"

    def encode(self, ref):
        return self._dense[str(ref)]

    def decode(self, dense_id):
        return self.externals[dense_id]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary incidence tables with dense ids.

    Before `split_dataset` every interaction lives in `ui_train` and the
    valid/test tables are empty. Item-tag labels are never split.
    """

    ui_train: sp.csr_matrix
    ui_valid: sp.csr_matrix
    ui_test: sp.csr_matrix
    it_labels: sp.csr_matrix
    users: IdMap
    items: IdMap
    tags: IdMap

    def __repr__(self):
        return (f"<Dataset users={self.n_users} items={self.n_items} "
                f"tags={self.n_tags} train={self.ui_train.nnz} "
                f"valid={self.ui_valid.nnz} test={self.ui_test.nnz}>")

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_tags(self):
        return len(self.tags)

    @property
    def is_split(self):
        return self.ui_valid.nnz + self.ui_test.nnz > 0

    def ui_all(self):
        """Union of the three splits as one binary table."""

        merged = (self.ui_train + self.ui_valid + self.ui_test).tocsr()
        merged.data[:] = 1.0
        return merged

    def train_items(self, user):
        row = self.ui_train
        return row.indices[row.indptr[user]:row.indptr[user + 1]]

    def test_items(self, user):
        row = self.ui_test
        return row.indices[row.indptr[user]:row.indptr[user + 1]]

    def item_degrees(self):
        """Training degree of every item."""

        return np.asarray(self.ui_train.sum(axis=0)).ravel().astype(np.int64)


class BprTriplet(NamedTuple):
    anchor: int
    positive: int
    negative: int
    mode: str


@dataclass(frozen=True, eq=False)
class BprBatch:
    """Column-wise triplets; `triplets()` gives the row view."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    mode: str

    def __len__(self):
        return len(self.anchors)

    def triplets(self):
        for a, p, n in zip(self.anchors, self.positives, self.negatives):
            yield BprTriplet(int(a), int(p), int(n), self.mode)


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_tags: int
    ui_pairs: int
    ui_density: float
    ui_avg_degree: float
    it_pairs: int
    it_density: float
    it_avg_degree: float

    def to_dict(self):
        return asdict(self)


##############################################################################
# Ingestion


def _read_rows(path, schema, header):
    """Yield (line number, {column: text}) for every non-blank line."""

    if not os.path.exists(path):
        raise MissingFile(path)

    with open(path, "rb") as handle:
        for lineno, raw in enumerate(handle, start=1):
            if header and lineno == 1:
                continue
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError:
                raise ParseError(lineno, "invalid UTF-8") from None
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != len(schema):
                raise ParseError(lineno, f"expected {len(schema)} columns "
                                         f"{list(schema)}, got {len(fields)}")
            row = {name: value.strip() for name, value in zip(schema, fields) if name != "_"}
            for name, value in row.items():
                if not value:
                    raise ParseError(lineno, f"empty {name} column")
            yield lineno, row


def _parse_rating(lineno, text):
    try:
        rating = float(text)
    except ValueError:
        raise ParseError(lineno, f"rating {text!r} is not a number") from None

    low, high = RATING_RANGE
    if not math.isfinite(rating) or not low <= rating <= high:
        raise ParseError(lineno, f"rating {rating} outside [{low}, {high}]")
    return rating


def _parse_timestamp(lineno, text):
    try:
        return int(text)
    except ValueError:
        raise ParseError(lineno, f"timestamp {text!r} is not an integer") from None


def load_interactions(path, schema=UI_SCHEMA, header=False):
    """Parse a tab-separated user-item file.

    `schema` names the columns in order; "user" and "item" are required,
    "rating" and "timestamp" optional, "_" marks a column to ignore.
    """

    if "user" not in schema or "item" not in schema:
        raise ValueError(f"schema {schema} needs user and item columns")

    interactions = []
    for lineno, row in _read_rows(path, schema, header):
        rating = _parse_rating(lineno, row["rating"]) if "rating" in row else None
        timestamp = _parse_timestamp(lineno, row["timestamp"]) if "timestamp" in row else None
        interactions.append(RawInteraction(row["user"], row["item"], rating, timestamp))

    logger.debug("read %d interactions from %s", len(interactions), path)
    return interactions


def load_labels(path, schema=IT_SCHEMA, header=False):
    """Parse a tab-separated item-tag file."""

    if "item" not in schema or "tag" not in schema:
        raise ValueError(f"schema {schema} needs item and tag columns")

    labels = [RawLabel(row["item"], row["tag"]) for _, row in _read_rows(path, schema, header)]
    logger.debug("read %d labels from %s", len(labels), path)
    return labels


##############################################################################
# Filtering and splitting


def _incidence(rows, cols, shape):
    matrix = sp.csr_matrix((np.ones(len(rows), dtype=np.float32), (rows, cols)), shape=shape)
    matrix.sum_duplicates()
    matrix.data[:] = 1.0
    matrix.sort_indices()
    return matrix


def _empty(shape):
    return sp.csr_matrix(shape, dtype=np.float32)


def apply_filters(raw_ui, raw_it, rating_threshold=4.0, min_user=10, min_item=10, min_tag=5):
    """Binarize ratings and filter degrees until every constraint holds at once.

    Returns an unsplit Dataset whose dense ids follow first appearance in the
    surviving data.
    """

    if not raw_ui or not raw_it:
        raise EmptyAfterFilter("no interactions or no labels to filter")

    ui = pd.DataFrame([(r.user_ref, r.item_ref, r.rating) for r in raw_ui],
                      columns=["user", "item", "rating"])
    ui["rating"] = pd.to_numeric(ui["rating"])
    if ui["rating"].notna().any():
        ui = ui[ui["rating"].isna() | (ui["rating"] >= rating_threshold)]
    ui = ui.drop_duplicates(["user", "item"])[["user", "item"]]

    it = pd.DataFrame([(r.item_ref, r.tag_ref) for r in raw_it], columns=["item", "tag"])
    it = it.drop_duplicates()

    passes = 0
    while True:
        passes += 1
        before = (len(ui), len(it))

        ui = ui[ui.groupby("user")["item"].transform("size") >= min_user]
        ui = ui[ui.groupby("item")["user"].transform("size") >= min_item]
        it = it[it["item"].isin(ui["item"])]
        it = it[it.groupby("tag")["item"].transform("size") >= min_tag]

        logger.info("filter pass %d: %d -> %d interactions, %d -> %d labels",
                    passes, before[0], len(ui), before[1], len(it))
        if ui.empty or it.empty:
            raise EmptyAfterFilter(f"nothing left after filter pass {passes}")
        if (len(ui), len(it)) == before:
            break

    user_codes, user_refs = pd.factorize(ui["user"], sort=False)
    item_codes, item_refs = pd.factorize(ui["item"], sort=False)
    tag_codes, tag_refs = pd.factorize(it["tag"], sort=False)
    label_items = pd.Index(item_refs).get_indexer(it["item"])

    users, items, tags = IdMap(user_refs), IdMap(item_refs), IdMap(tag_refs)
    shape = (len(users), len(items))
    logger.info("filtered to %d users, %d items, %d tags after %d passes",
                len(users), len(items), len(tags), passes)

    return Dataset(
        ui_train=_incidence(user_codes, item_codes, shape),
        ui_valid=_empty(shape),
        ui_test=_empty(shape),
        it_labels=_incidence(label_items, tag_codes, (len(items), len(tags))),
        users=users,
        items=items,
        tags=tags,
    )


def split_sizes(n, ratios=(0.7, 0.1, 0.2)):
    """Per-user (train, valid, test) counts.

    Valid and test get the floor of their share with a minimum of one each;
    train takes the remainder.
    """

    n_test = min(n, max(1, math.floor(ratios[2] * n + 1e-9)))
    n_valid = min(n - n_test, max(1, math.floor(ratios[1] * n + 1e-9)))
    return n - n_valid - n_test, n_valid, n_test


def split_dataset(dataset, ratios=(0.7, 0.1, 0.2), seed=0):
    """Randomly partition every user's interactions into train/valid/test."""

    rng = np.random.default_rng(seed)
    everything = dataset.ui_all()
    parts = {"train": ([], []), "valid": ([], []), "test": ([], [])}

    for user in range(dataset.n_users):
        items = everything.indices[everything.indptr[user]:everything.indptr[user + 1]]
        _, n_valid, n_test = split_sizes(len(items), ratios)
        shuffled = rng.permutation(items)
        chunks = {
            "valid": shuffled[:n_valid],
            "test": shuffled[n_valid:n_valid + n_test],
            "train": shuffled[n_valid + n_test:],
        }
        for name, chunk in chunks.items():
            parts[name][0].append(np.full(len(chunk), user, dtype=np.int64))
            parts[name][1].append(chunk)

    shape = (dataset.n_users, dataset.n_items)
    tables = {name: _incidence(np.concatenate(rows), np.concatenate(cols), shape)
              for name, (rows, cols) in parts.items()}

    return Dataset(
        ui_train=tables["train"],
        ui_valid=tables["valid"],
        ui_test=tables["test"],
        it_labels=dataset.it_labels,
        users=dataset.users,
        items=dataset.items,
        tags=dataset.tags,
    )


def sparsify_users(dataset, threshold=10, seed=0):
    """Sub-sample train rows so every user keeps fewer than `threshold` items.

    Valid and test are untouched; this builds the sparse-user evaluation set.
    """

    rng = np.random.default_rng(seed)
    train = dataset.ui_train
    rows, cols = [], []
    for user in range(dataset.n_users):
        items = train.indices[train.indptr[user]:train.indptr[user + 1]]
        if len(items) >= threshold:
            items = np.sort(rng.choice(items, size=threshold - 1, replace=False))
        rows.append(np.full(len(items), user, dtype=np.int64))
        cols.append(items)

    sparse_train = _incidence(np.concatenate(rows), np.concatenate(cols), train.shape)
    return Dataset(
        ui_train=sparse_train,
        ui_valid=dataset.ui_valid,
        ui_test=dataset.ui_test,
        it_labels=dataset.it_labels,
        users=dataset.users,
        items=dataset.items,
        tags=dataset.tags,
    )


def compute_stats(dataset):
    """Counts, densities and mean degrees over all interactions."""

    ui_pairs = int(dataset.ui_all().nnz)
    it_pairs = int(dataset.it_labels.nnz)
    return DatasetStats(
        n_users=dataset.n_users,
        n_items=dataset.n_items,
        n_tags=dataset.n_tags,
        ui_pairs=ui_pairs,
        ui_density=ui_pairs / (dataset.n_users * dataset.n_items),
        ui_avg_degree=ui_pairs / dataset.n_users,
        it_pairs=it_pairs,
        it_density=it_pairs / (dataset.n_items * dataset.n_tags),
        it_avg_degree=it_pairs / dataset.n_items,
    )


##############################################################################
# Negative sampling


class BprSampler:
    """Uniform positive-pair sampler with rejection-sampled negatives.

    Owns its random generator; do not share one sampler between workers.
    """

    def __init__(self, dataset, seed=0, max_retries=100):
        self.dataset = dataset
        self.rng = np.random.default_rng(seed)
        self.max_retries = max_retries
        self._tables = {USER_ITEM: dataset.ui_train, ITEM_TAG: dataset.it_labels}
        self._pair_rows = {mode: np.repeat(np.arange(table.shape[0]), np.diff(table.indptr))
                           for mode, table in self._tables.items()}
        self._keys = {mode: self._pair_rows[mode].astype(np.int64) * table.shape[1]
                      + table.indices.astype(np.int64)
                      for mode, table in self._tables.items()}

    def _observed(self, mode, rows, cols):
        keys = self._keys[mode]
        wanted = rows.astype(np.int64) * self._tables[mode].shape[1] + cols
        pos = np.searchsorted(keys, wanted)
        pos = np.minimum(pos, len(keys) - 1)
        return keys[pos] == wanted

    def _complement(self, mode, row):
        table = self._tables[mode]
        taken = table.indices[table.indptr[row]:table.indptr[row + 1]]
        return np.setdiff1d(np.arange(table.shape[1]), taken, assume_unique=True)

    def sample(self, mode=USER_ITEM, batch_size=1024):
        """Draw `batch_size` triplets for `mode`."""

        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        table = self._tables[mode]
        if table.nnz == 0:
            raise NoNegativeAvailable(f"no {mode} training pairs")
        n_cols = table.shape[1]
        degrees = np.diff(table.indptr)
        if np.all(degrees[degrees > 0] >= n_cols):
            raise NoNegativeAvailable(f"every {mode} row is fully observed")

        picks = self.rng.integers(0, table.nnz, size=batch_size)
        anchors = self._pair_rows[mode][picks]
        positives = table.indices[picks].astype(np.int64)

        # Dense rows have no negative at all: redraw the pair.
        dense = degrees[anchors] >= n_cols
        while dense.any():
            logger.debug("resampling %d anchors with fully observed rows", dense.sum())
            picks = self.rng.integers(0, table.nnz, size=int(dense.sum()))
            anchors[dense] = self._pair_rows[mode][picks]
            positives[dense] = table.indices[picks]
            dense = degrees[anchors] >= n_cols

        negatives = self.rng.integers(0, n_cols, size=batch_size)
        pending = self._observed(mode, anchors, negatives)
        retries = 0
        while pending.any() and retries < self.max_retries:
            negatives[pending] = self.rng.integers(0, n_cols, size=int(pending.sum()))
            pending[pending] = self._observed(mode, anchors[pending], negatives[pending])
            retries += 1

        for slot in np.flatnonzero(pending):
            free = self._complement(mode, anchors[slot])
            negatives[slot] = free[self.rng.integers(0, len(free))]

        return BprBatch(anchors.astype(np.int64), positives, negatives.astype(np.int64), mode)

    def epoch(self, batch_size=1024):
        """Yield (user-item batch, item-tag batch) pairs for one epoch."""

        steps = math.ceil(self.dataset.ui_train.nnz / batch_size)
        for _ in range(steps):
            yield self.sample(USER_ITEM, batch_size), self.sample(ITEM_TAG, batch_size)


def sample_bpr_batch(dataset, mode=USER_ITEM, batch_size=1024, rng=None):
    """One batch of triplets; `rng` is a seed or a BprSampler to reuse."""

    sampler = rng if isinstance(rng, BprSampler) else BprSampler(dataset, seed=rng)
    return sampler.sample(mode, batch_size)


##############################################################################
# Bundles


def _write_csr(path, matrix):
    matrix = matrix.tocsr()
    matrix.sort_indices()
    with open(path, "wb") as handle:
        handle.write(_BUNDLE_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, *matrix.shape))
        handle.write(matrix.indptr.astype("<u8").tobytes())
        handle.write(matrix.indices.astype("<u4").tobytes())


def _read_csr(path):
    if not os.path.exists(path):
        raise BundleError(f"bundle file missing: {path}")

    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _BUNDLE_HEADER.size:
        raise BundleError(f"{path}: truncated header")
    magic, version, n_rows, n_cols = _BUNDLE_HEADER.unpack_from(blob)
    if magic != BUNDLE_MAGIC:
        raise BundleError(f"{path}: bad magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise BundleError(f"{path}: unsupported version {version}")

    offset = _BUNDLE_HEADER.size
    indptr = np.frombuffer(blob, dtype="<u8", count=n_rows + 1, offset=offset)
    offset += 8 * (n_rows + 1)
    nnz = int(indptr[-1])
    if len(blob) != offset + 4 * nnz:
        raise BundleError(f"{path}: body size does not match header")
    indices = np.frombuffer(blob, dtype="<u4", count=nnz, offset=offset)
    data = np.ones(nnz, dtype=np.float32)
    return sp.csr_matrix((data, indices.astype(np.int32), indptr.astype(np.int64)),
                         shape=(n_rows, n_cols))


def _write_ids(path, id_map):
    frame = pd.DataFrame({"dense_id": range(len(id_map)), "external_id": id_map.externals})
    frame.to_csv(path, sep="\t", header=False, index=False)


def _read_ids(path):
    if not os.path.exists(path):
        raise BundleError(f"bundle file missing: {path}")
    frame = pd.read_csv(path, sep="\t", header=None, names=["dense_id", "external_id"],
                        dtype={"external_id": str}, keep_default_na=False)
    if list(frame["dense_id"]) != list(range(len(frame))):
        raise BundleError(f"{path}: dense ids are not contiguous")
    return IdMap(frame["external_id"])


def save_bundle(dataset, out_dir):
    """Write the binary tables, id maps and stats.json into `out_dir`."""

    os.makedirs(out_dir, exist_ok=True)
    for name in ("ui_train", "ui_valid", "ui_test", "it_labels"):
        _write_csr(os.path.join(out_dir, f"{name}.bin"), getattr(dataset, name))
    for name in ("users", "items", "tags"):
        _write_ids(os.path.join(out_dir, f"{name}.tsv"), getattr(dataset, name))

    stats = compute_stats(dataset)
    with open(os.path.join(out_dir, "stats.json"), "w") as handle:
        json.dump(stats.to_dict(), handle, indent=2)
    return stats


def load_bundle(bundle_dir):
    """Read a bundle written by `save_bundle`."""

    if not os.path.isdir(bundle_dir):
        raise BundleError(f"no bundle directory at {bundle_dir}")

    tables = {name: _read_csr(os.path.join(bundle_dir, f"{name}.bin"))
              for name in ("ui_train", "ui_valid", "ui_test", "it_labels")}
    ids = {name: _read_ids(os.path.join(bundle_dir, f"{name}.tsv"))
           for name in ("users", "items", "tags")}

    expected = {
        "ui_train": (len(ids["users"]), len(ids["items"])),
        "ui_valid": (len(ids["users"]), len(ids["items"])),
        "ui_test": (len(ids["users"]), len(ids["items"])),
        "it_labels": (len(ids["items"]), len(ids["tags"])),
    }
    for name, shape in expected.items():
        if tables[name].shape != shape:
            raise BundleError(f"{name} has shape {tables[name].shape}, id maps say {shape}")

    return Dataset(**tables, **ids)
