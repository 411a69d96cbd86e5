"""Interaction data: loading, k-core filtering, temporal splitting, graph and
mask construction, and the binary embedding file format.

The pipeline is ingest -> filter -> split -> index.  Integer user/item ids are
assigned only after the split so that row `r` of a text-embedding matrix can be
defined as "the r-th training interaction in input-file order" and stay stable
across reloads.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

EMBED_MAGIC = b"SYMC"
EMBED_VERSION = 1
# magic, format version, row count, dimension
_EMBED_HEADER = struct.Struct("<4sIQI")


class DataError(Exception):
    """Raised for unreadable, malformed, or inconsistent input data."""


@dataclass(frozen=True)
class InteractionRecord:
    """One (user, item, time, review) event as read from disk.

    Keys are the raw string identifiers from the input file; integer indices
    are assigned later by `temporal_split`.  `review_text` is None when the
    input line carried no fourth field or an empty one.
    """

    user_key: str
    item_key: str
    timestamp: int
    review_text: str | None = None

    def __post_init__(self):
        if not self.user_key:
            raise DataError("empty user key")
        if not self.item_key:
            raise DataError("empty item key")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


def load_interactions(path: str | Path) -> list[InteractionRecord]:
    """Read a tab-separated interactions file.

    Expected columns: user_key, item_key, unix_timestamp[, review_text].
    A first line whose timestamp column does not parse is treated as a header
    and skipped.  Any later malformed line is counted and reported via a
    warning; it is never dropped silently.

    Raises DataError if the file is unreadable or contains no valid record.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read interactions file {path}: {exc}") from exc

    records: list[InteractionRecord] = []
    malformed = 0
    for lineno, line in enumerate(raw.splitlines()):
        if not line.strip():
            continue
        parts = line.split("\t", 3)
        ok = len(parts) >= 3
        ts = -1
        if ok:
            try:
                ts = int(parts[2])
            except ValueError:
                ok = False
        if ok and ts >= 0 and parts[0] and parts[1]:
            review = parts[3] if len(parts) > 3 and parts[3] != "" else None
            records.append(InteractionRecord(parts[0], parts[1], ts, review))
        elif lineno == 0 and not records:
            # optional header line
            continue
        else:
            malformed += 1
    if malformed:
        log.warning("%s: skipped %d malformed line(s)", path, malformed)
    if not records:
        raise DataError(f"{path}: no valid interaction records")
    return records


def k_core_filter(records: list[InteractionRecord], k: int) -> list[InteractionRecord]:
    """Iteratively drop users and items with fewer than k distinct partners.

    Degrees count distinct (user, item) pairs, so duplicate interactions do
    not inflate them.  Runs to a fixed point; the surviving records keep their
    input order.  May return an empty list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    alive = list(records)
    while True:
        pairs = {(r.user_key, r.item_key) for r in alive}
        udeg = Counter(u for u, _ in pairs)
        ideg = Counter(i for _, i in pairs)
        kept = [r for r in alive if udeg[r.user_key] >= k and ideg[r.item_key] >= k]
        if len(kept) == len(alive):
            return kept
        alive = kept


@dataclass
class TrainData:
    """The training partition only.

    This is the sole view the trainer accepts; it structurally cannot leak
    test interactions because it does not carry them.
    """

    num_users: int
    num_items: int
    users: np.ndarray  # (n_train,) int64 user indices
    items: np.ndarray  # (n_train,) int64 item indices
    timestamps: np.ndarray  # (n_train,) int64
    user_train_items: list[frozenset[int]]  # per user, item indices seen in training

    @property
    def n_train(self) -> int:
        return int(self.users.shape[0])


@dataclass
class InteractionSet:
    """A filtered, split, and integer-indexed dataset.

    Index contracts:
      * user indices are dense in [0, num_users); item indices in [0, num_items)
      * every user appears in the training partition
      * items may be test-only (cold start); they get indices after all
        training items
      * training row r corresponds to the r-th training interaction in input
        order, which is also row r of any aligned text-embedding matrix
    """

    num_users: int
    num_items: int
    train_users: np.ndarray
    train_items: np.ndarray
    train_timestamps: np.ndarray
    test_users: np.ndarray
    test_items: np.ndarray
    test_timestamps: np.ndarray
    user_train_items: list[frozenset[int]]
    user_keys: list[str]
    item_keys: list[str]
    # positions into the post-filter record list, for writers that need the
    # original review text
    train_source: np.ndarray = field(repr=False, default=None)
    test_source: np.ndarray = field(repr=False, default=None)

    @property
    def n_train(self) -> int:
        return int(self.train_users.shape[0])

    @property
    def n_test(self) -> int:
        return int(self.test_users.shape[0])

    def train_view(self) -> TrainData:
        return TrainData(
            num_users=self.num_users,
            num_items=self.num_items,
            users=self.train_users.copy(),
            items=self.train_items.copy(),
            timestamps=self.train_timestamps.copy(),
            user_train_items=[frozenset(s) for s in self.user_train_items],
        )

    def user_test_items(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_users)]
        for u, v in zip(self.test_users.tolist(), self.test_items.tolist()):
            out[u].append(v)
        return out

    def validate(self) -> None:
        if self.n_train == 0:
            raise DataError("empty training partition")
        for name, arr, bound in (
            ("train_users", self.train_users, self.num_users),
            ("test_users", self.test_users, self.num_users),
            ("train_items", self.train_items, self.num_items),
            ("test_items", self.test_items, self.num_items),
        ):
            if arr.size and (arr.min() < 0 or arr.max() >= bound):
                raise DataError(f"{name}: index out of range")
        if len(set(self.train_users.tolist())) != self.num_users:
            raise DataError("some user has no training interaction")


def temporal_split(records: list[InteractionRecord], train_fraction: float) -> InteractionSet:
    """Split each user's history chronologically into train and test.

    Per user, interactions are ordered by (timestamp, input position); the
    earliest ceil(n * train_fraction) go to training, capped at n - 1 so every
    user with n >= 2 keeps at least one test interaction.  A user with a
    single interaction keeps it in training and is skipped at evaluation.

    Integer indices are assigned by first appearance in the training
    partition (input order), then test-only items are appended in test order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not records:
        raise DataError("no records to split")

    per_user: dict[str, list[int]] = {}
    for pos, rec in enumerate(records):
        per_user.setdefault(rec.user_key, []).append(pos)

    is_train = np.zeros(len(records), dtype=bool)
    for positions in per_user.values():
        ordered = sorted(positions, key=lambda p: (records[p].timestamp, p))
        n = len(ordered)
        if n == 1:
            n_train = 1
        else:
            n_train = min(int(np.ceil(n * train_fraction)), n - 1)
            n_train = max(n_train, 1)
        for p in ordered[:n_train]:
            is_train[p] = True

    train_pos = [p for p in range(len(records)) if is_train[p]]
    test_pos = [p for p in range(len(records)) if not is_train[p]]

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for p in train_pos:
        user_index.setdefault(records[p].user_key, len(user_index))
        item_index.setdefault(records[p].item_key, len(item_index))
    for p in test_pos:
        # users always hold a training interaction, so only items can be new
        item_index.setdefault(records[p].item_key, len(item_index))

    def pack(positions: list[int]):
        users = np.array([user_index[records[p].user_key] for p in positions], dtype=np.int64)
        items = np.array([item_index[records[p].item_key] for p in positions], dtype=np.int64)
        ts = np.array([records[p].timestamp for p in positions], dtype=np.int64)
        return users, items, ts

    train_users, train_items, train_ts = pack(train_pos)
    test_users, test_items, test_ts = pack(test_pos)

    num_users = len(user_index)
    seen: list[set[int]] = [set() for _ in range(num_users)]
    for u, v in zip(train_users.tolist(), train_items.tolist()):
        seen[u].add(v)

    user_keys = [None] * num_users
    for key, idx in user_index.items():
        user_keys[idx] = key
    item_keys = [None] * len(item_index)
    for key, idx in item_index.items():
        item_keys[idx] = key

    out = InteractionSet(
        num_users=num_users,
        num_items=len(item_index),
        train_users=train_users,
        train_items=train_items,
        train_timestamps=train_ts,
        test_users=test_users,
        test_items=test_items,
        test_timestamps=test_ts,
        user_train_items=[frozenset(s) for s in seen],
        user_keys=user_keys,
        item_keys=item_keys,
        train_source=np.array(train_pos, dtype=np.int64),
        test_source=np.array(test_pos, dtype=np.int64),
    )
    out.validate()
    return out


@dataclass
class NormalizedAdjacency:
    """Symmetrically normalized bipartite adjacency in CSR form.

    Node ids: users occupy rows [0, num_users), items rows
    [num_users, num_users + num_items).  Edge (u, i) carries weight
    1 / sqrt(deg(u) * deg(i)) where degrees count distinct interaction
    partners.  The matrix is symmetric, so it is its own transpose in
    backward passes.
    """

    num_users: int
    num_items: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray  # float64

    @property
    def size(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return int(self.indices.shape[0]) // 2

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.weights, self.indices, self.indptr), shape=(self.size, self.size)
        )

    def matmul(self, x: np.ndarray) -> np.ndarray:
        """Sparse product A @ x with 64-bit accumulation."""
        if x.shape[0] != self.size:
            raise ValueError(f"operand has {x.shape[0]} rows, adjacency has {self.size}")
        return self.to_csr() @ np.asarray(x, dtype=np.float64)

    def undirected_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(user_idx, item_idx) arrays, one entry per undirected edge."""
        counts = np.diff(self.indptr[: self.num_users + 1]).astype(np.int64)
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), counts)
        items = self.indices[: counts.sum()].astype(np.int64) - self.num_users
        return users, items


def adjacency_from_edges(
    num_users: int, num_items: int, edge_users: np.ndarray, edge_items: np.ndarray
) -> NormalizedAdjacency:
    """Normalized adjacency from explicit (user, item) edges.

    Duplicate pairs collapse to a single edge; weights come from the degrees
    of the given edge set.  Isolated nodes simply keep empty rows.
    """
    edge_users = np.asarray(edge_users, dtype=np.int64)
    edge_items = np.asarray(edge_items, dtype=np.int64)
    if edge_users.shape != edge_items.shape:
        raise ValueError("edge arrays must have matching shapes")
    if edge_users.size:
        pairs = np.unique(np.stack([edge_users, edge_items], axis=1), axis=0)
        edge_users, edge_items = pairs[:, 0], pairs[:, 1]
        if edge_users.min() < 0 or edge_users.max() >= num_users:
            raise ValueError("user index out of range")
        if edge_items.min() < 0 or edge_items.max() >= num_items:
            raise ValueError("item index out of range")

    nu, ni = num_users, num_items
    size = nu + ni
    udeg = np.bincount(edge_users, minlength=nu).astype(np.float64)
    ideg = np.bincount(edge_items, minlength=ni).astype(np.float64)
    w = 1.0 / np.sqrt(udeg[edge_users] * ideg[edge_items])

    rows = np.concatenate([edge_users, edge_items + nu])
    cols = np.concatenate([edge_items + nu, edge_users])
    vals = np.concatenate([w, w])
    csr = sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()
    csr.sort_indices()
    return NormalizedAdjacency(
        num_users=nu,
        num_items=ni,
        indptr=csr.indptr.copy(),
        indices=csr.indices.copy(),
        weights=csr.data.astype(np.float64),
    )


def build_adjacency(train: TrainData | InteractionSet) -> NormalizedAdjacency:
    """Normalized adjacency of the training interaction graph."""
    if isinstance(train, InteractionSet):
        train = train.train_view()
    return adjacency_from_edges(train.num_users, train.num_items, train.users, train.items)


@dataclass
class ContrastiveBatch:
    """A batch of training rows plus its within-batch negative mask.

    mask[i, j] is True when row j's item is a usable negative for row i's
    anchor: j != i and row i's user has never interacted with row j's item in
    training.  The diagonal is always False.
    """

    rows: np.ndarray  # (B,) training-row indices
    users: np.ndarray  # (B,)
    items: np.ndarray  # (B,)
    mask: np.ndarray  # (B, B) bool


def interaction_matrix(train: TrainData | InteractionSet) -> sp.csr_matrix:
    """Boolean user x item matrix of training interactions (distinct pairs)."""
    if isinstance(train, InteractionSet):
        train = train.train_view()
    ones = np.ones(train.users.shape[0], dtype=np.int8)
    mat = sp.coo_matrix(
        (ones, (train.users, train.items)), shape=(train.num_users, train.num_items)
    ).tocsr()
    return mat.astype(bool)


def build_negative_mask(
    train: TrainData, rows: np.ndarray, interactions: sp.csr_matrix | None = None
) -> ContrastiveBatch:
    """Mark which within-batch pairs are true negatives for one another.

    A same-user row elsewhere in the batch is excluded via the interaction
    test (its item is in that user's training set), as is any other row whose
    item the anchor's user has consumed.  Passing the precomputed interaction
    matrix replaces the per-pair set lookups with a sparse slice; the result
    is identical.
    """
    rows = np.asarray(rows, dtype=np.int64)
    users = train.users[rows]
    items = train.items[rows]
    b = rows.shape[0]
    if interactions is not None:
        consumed = interactions[users][:, items].toarray().astype(bool)
        mask = ~consumed
        np.fill_diagonal(mask, False)
    else:
        mask = np.zeros((b, b), dtype=bool)
        for i in range(b):
            seen = train.user_train_items[users[i]]
            for j in range(b):
                if j != i and int(items[j]) not in seen:
                    mask[i, j] = True
    return ContrastiveBatch(rows=rows, users=users, items=items, mask=mask)


def write_embedding_file(path: str | Path, rows: np.ndarray) -> None:
    """Write a dense float32 embedding matrix in the binary row-major format.

    Header: magic 'SYMC', u32 version, u64 row count, u32 dimension, all
    little-endian, then count*dim float32 values.  Refuses non-finite input.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {rows.shape}")
    if not np.isfinite(rows).all():
        raise DataError("embedding matrix contains non-finite values")
    header = _EMBED_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, rows.shape[0], rows.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes(order="C"))


def read_embedding_file(path: str | Path) -> np.ndarray:
    """Read a matrix written by `write_embedding_file`, validating the header
    and the exact payload length."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read embedding file {path}: {exc}") from exc
    if len(blob) < _EMBED_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, count, dim = _EMBED_HEADER.unpack_from(blob)
    if magic != EMBED_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != EMBED_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = _EMBED_HEADER.size + count * dim * 4
    if len(blob) != expected:
        raise DataError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    mat = np.frombuffer(blob, dtype="<f4", offset=_EMBED_HEADER.size).reshape(count, dim)
    if not np.isfinite(mat).all():
        raise DataError(f"{path}: non-finite values in payload")
    return mat.copy()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sanitize(text: str) -> str:
    """Make review text safe for a tab-separated single-line field."""
    return text.replace("\t", " ").replace("\n", " ").replace("\r", " ")


def write_prepared(
    out_dir: str | Path,
    dataset: InteractionSet,
    records: list[InteractionRecord] | None = None,
    extra_manifest: dict | None = None,
) -> dict:
    """Write train.tsv, test.tsv and manifest.json for a split dataset.

    train.tsv line r is training row r (user_key, item_key, timestamp,
    review); row-aligned consumers index it by line number.  test.tsv omits
    review text: nothing downstream may read post-split reviews.  Returns the
    manifest dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if records is None and dataset.train_source is None:
        raise ValueError("need source records or a dataset that tracks them")

    def review_for(pos: int) -> str:
        if records is None:
            return ""
        text = records[pos].review_text
        return _sanitize(text) if text else ""

    train_path = out_dir / "train.tsv"
    with open(train_path, "w", encoding="utf-8") as fh:
        for r in range(dataset.n_train):
            pos = int(dataset.train_source[r])
            u = dataset.user_keys[dataset.train_users[r]]
            i = dataset.item_keys[dataset.train_items[r]]
            fh.write(f"{u}\t{i}\t{dataset.train_timestamps[r]}\t{review_for(pos)}\n")

    test_path = out_dir / "test.tsv"
    with open(test_path, "w", encoding="utf-8") as fh:
        for r in range(dataset.n_test):
            u = dataset.user_keys[dataset.test_users[r]]
            i = dataset.item_keys[dataset.test_items[r]]
            fh.write(f"{u}\t{i}\t{dataset.test_timestamps[r]}\n")

    manifest = {
        "format": "symcere-prepared",
        "version": 1,
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_train": dataset.n_train,
        "num_test": dataset.n_test,
        "train_sha256": file_sha256(train_path),
        "test_sha256": file_sha256(test_path),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_prepared(prepared_dir: str | Path) -> InteractionSet:
    """Reload a prepared directory into the identical InteractionSet.

    Indices are re-derived by first appearance, which reproduces the original
    assignment because the files preserve partition order.  Verifies file
    hashes against the manifest.
    """
    prepared_dir = Path(prepared_dir)
    manifest_path = prepared_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON: {exc}") from exc

    for stem in ("train", "test"):
        want = manifest.get(f"{stem}_sha256")
        got = file_sha256(prepared_dir / f"{stem}.tsv")
        if want is not None and want != got:
            raise DataError(f"{stem}.tsv does not match manifest hash")

    def read_rows(path: Path, with_review: bool):
        rows = []
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        for line in text.splitlines():
            if not line:
                continue
            parts = line.split("\t", 3 if with_review else 2)
            if len(parts) < 3:
                raise DataError(f"{path}: malformed line {line!r}")
            rows.append((parts[0], parts[1], int(parts[2])))
        return rows

    train_rows = read_rows(prepared_dir / "train.tsv", with_review=True)
    test_rows = read_rows(prepared_dir / "test.tsv", with_review=False)

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for u, i, _ in train_rows:
        user_index.setdefault(u, len(user_index))
        item_index.setdefault(i, len(item_index))
    for u, i, _ in test_rows:
        if u not in user_index:
            raise DataError(f"test user {u!r} absent from training partition")
        item_index.setdefault(i, len(item_index))

    def pack(rows):
        users = np.array([user_index[u] for u, _, _ in rows], dtype=np.int64)
        items = np.array([item_index[i] for _, i, _ in rows], dtype=np.int64)
        ts = np.array([t for _, _, t in rows], dtype=np.int64)
        return users, items, ts

    train_users, train_items, train_ts = pack(train_rows)
    test_users, test_items, test_ts = pack(test_rows)

    num_users = len(user_index)
    seen: list[set[int]] = [set() for _ in range(num_users)]
    for u, v in zip(train_users.tolist(), train_items.tolist()):
        seen[u].add(v)
    user_keys = [None] * num_users
    for key, idx in user_index.items():
        user_keys[idx] = key
    item_keys = [None] * len(item_index)
    for key, idx in item_index.items():
        item_keys[idx] = key

    out = InteractionSet(
        num_users=num_users,
        num_items=len(item_index),
        train_users=train_users,
        train_items=train_items,
        train_timestamps=train_ts,
        test_users=test_users,
        test_items=test_items,
        test_timestamps=test_ts,
        user_train_items=[frozenset(s) for s in seen],
        user_keys=user_keys,
        item_keys=item_keys,
        train_source=np.arange(len(train_rows), dtype=np.int64),
        test_source=np.arange(len(test_rows), dtype=np.int64),
    )
    if out.num_users != manifest.get("num_users", out.num_users):
        raise DataError("manifest user count disagrees with train.tsv")
    if out.num_items != manifest.get("num_items", out.num_items):
        raise DataError("manifest item count disagrees with data")
    out.validate()
    return out


def load_train_reviews(prepared_dir: str | Path) -> list[str]:
    """Review text per training row, empty string where none was recorded."""
    path = Path(prepared_dir) / "train.tsv"
    reviews = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        parts = line.split("\t", 3)
        reviews.append(parts[3] if len(parts) > 3 else "")
    return reviews
