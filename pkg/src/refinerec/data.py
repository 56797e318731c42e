"""Interaction-log ingestion, filtering, splits, batching, and synthetic corpora.

Input format: UTF-8 text, one record per line, ``user<TAB>item<TAB>timestamp``;
lines starting with ``#`` are ignored. Category files map
``item<TAB>cat1,cat2,...``.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .numerics import RngHub

PAD_ID = 0


@dataclass
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class Dataset:
    """Filtered, indexed interaction corpus with per-user time-sorted sequences.

    Dense ids are contiguous from 1; id 0 is reserved for padding. ``splits``
    is empty until ``split_users`` runs.
    """

    user_tokens: list  # dense uid - 1 -> token
    item_tokens: list  # dense iid - 1 -> token
    user_index: dict   # token -> dense uid
    item_index: dict   # token -> dense iid
    sequences: dict    # dense uid -> list of dense item ids, time-ascending
    max_seq_len: int
    filter_min: int
    n_interactions: int
    splits: dict = field(default_factory=dict)  # dense uid -> "train"|"valid"|"test"

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    def users_in(self, split: str) -> list:
        return sorted(u for u, s in self.splits.items() if s == split)

    def digest(self) -> str:
        h = hashlib.sha256()
        for tok in self.user_tokens:
            h.update(tok.encode())
            h.update(b"\x00")
        h.update(b"\x01")
        for tok in self.item_tokens:
            h.update(tok.encode())
            h.update(b"\x00")
        return h.hexdigest()


@dataclass
class Batch:
    histories: np.ndarray  # (B, T) int64, right-aligned, 0-padded
    mask: np.ndarray       # (B, T) float, 1.0 where real
    lengths: np.ndarray    # (B,) int64 real lengths
    targets: np.ndarray    # (B,) int64 dense item ids
    negatives: np.ndarray  # (n_neg,) int64, shared across the batch

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.histories.tobytes())
        h.update(self.targets.tobytes())
        h.update(self.negatives.tobytes())
        return h.hexdigest()[:12]


@dataclass
class CategoryMap:
    item_cats: dict          # dense item id -> frozenset of dense category ids
    cat_tokens: list         # dense cat id -> token
    unknown_item_warnings: int = 0

    @property
    def n_categories(self) -> int:
        return len(self.cat_tokens)

    def cats_of(self, item_id: int) -> frozenset:
        return self.item_cats.get(item_id, frozenset())


def parse_interactions(path: str):
    """Read raw interaction records; malformed lines raise with their line number."""
    records = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read interaction log {path!r}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected user<TAB>item<TAB>timestamp")
            try:
                ts = int(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from exc
            records.append((parts[0], parts[1], ts))
    return records


def _filter_fixpoint(records, filter_min: int):
    """Alternate item/user frequency passes until no record is removed.

    Users additionally need >= 2 interactions so a (history, target) pair exists.
    """
    user_min = max(filter_min, 2)
    while True:
        item_counts = Counter(r[1] for r in records)
        keep_items = {it for it, c in item_counts.items() if c >= filter_min}
        records = [r for r in records if r[1] in keep_items]
        user_counts = Counter(r[0] for r in records)
        keep_users = {u for u, c in user_counts.items() if c >= user_min}
        filtered = [r for r in records if r[0] in keep_users]
        if len(filtered) == len(records):
            return filtered
        records = filtered


def ingest(path: str, filter_min: int = 5, max_seq_len: int = 20,
           dedupe: bool = False) -> Dataset:
    """Build a Dataset from a raw log: fixpoint filtering, dense ids, sorted sequences."""
    records = parse_interactions(path)
    return build_dataset(records, filter_min=filter_min, max_seq_len=max_seq_len,
                         dedupe=dedupe, source=path)


def build_dataset(records, filter_min: int = 5, max_seq_len: int = 20,
                  dedupe: bool = False, source: str = "<records>") -> Dataset:
    records = _filter_fixpoint(list(records), filter_min)
    if not records:
        raise DataError(f"{source}: dataset empty after filtering (filter_min={filter_min})")

    user_index, item_index = {}, {}
    user_tokens, item_tokens = [], []
    for u, it, _ in records:  # dense ids by first occurrence in file order
        if u not in user_index:
            user_tokens.append(u)
            user_index[u] = len(user_tokens)
        if it not in item_index:
            item_tokens.append(it)
            item_index[it] = len(item_tokens)

    per_user = {}
    for order, (u, it, ts) in enumerate(records):
        per_user.setdefault(user_index[u], []).append((ts, order, item_index[it]))

    sequences = {}
    n_inter = 0
    for uid, rows in per_user.items():
        rows.sort()  # by timestamp, ties by file order
        seq = [iid for _, _, iid in rows]
        if dedupe:
            seq = [iid for i, iid in enumerate(seq) if i == 0 or iid != seq[i - 1]]
        if len(seq) >= 2:
            sequences[uid] = seq
            n_inter += len(seq)

    return Dataset(
        user_tokens=user_tokens,
        item_tokens=item_tokens,
        user_index=user_index,
        item_index=item_index,
        sequences=sequences,
        max_seq_len=max_seq_len,
        filter_min=filter_min,
        n_interactions=n_inter,
    )


def split_users(ds: Dataset, seed: int) -> Dataset:
    """Assign each user to train/valid/test by a seeded shuffle, ~8:1:1."""
    uids = sorted(ds.sequences.keys())
    n = len(uids)
    if n < 10:
        raise ConfigError(f"need at least 10 users to split, have {n}")
    perm = RngHub(seed).stream("split").permutation(n)
    shuffled = [uids[i] for i in perm]
    n_train = int(0.8 * n)
    n_valid = int(0.1 * n)
    ds.splits = {}
    for i, uid in enumerate(shuffled):
        if i < n_train:
            ds.splits[uid] = "train"
        elif i < n_train + n_valid:
            ds.splits[uid] = "valid"
        else:
            ds.splits[uid] = "test"
    return ds


def history_window(seq, end: int, max_seq_len: int):
    """Right-aligned window of the at most max_seq_len items strictly before ``end``."""
    items = seq[max(0, end - max_seq_len):end]
    n = len(items)
    row = np.zeros(max_seq_len, dtype=np.int64)
    if n:
        row[max_seq_len - n:] = items
    mask = np.zeros(max_seq_len, dtype=np.float64)
    mask[max_seq_len - n:] = 1.0
    return row, mask, n


def next_train_batch(ds: Dataset, batch_size: int, n_neg: int,
                     rng: np.random.Generator, target_policy: str = "uniform") -> Batch:
    """Sample one training batch: per-user target position plus shared negatives."""
    train_users = ds.users_in("train")
    if not train_users:
        raise ConfigError("train split is empty (run split_users first)")
    T = ds.max_seq_len
    picks = rng.integers(0, len(train_users), size=batch_size)
    pos_draws = rng.random(batch_size)
    histories = np.zeros((batch_size, T), dtype=np.int64)
    mask = np.zeros((batch_size, T), dtype=np.float64)
    lengths = np.zeros(batch_size, dtype=np.int64)
    targets = np.zeros(batch_size, dtype=np.int64)
    for b in range(batch_size):
        seq = ds.sequences[train_users[picks[b]]]
        L = len(seq)
        if target_policy == "last":
            pos = L  # 1-based target position
        else:
            pos = 2 + int(pos_draws[b] * (L - 1))  # uniform over positions 2..L
        targets[b] = seq[pos - 1]
        histories[b], mask[b], lengths[b] = history_window(seq, pos - 1, T)
    negatives = rng.integers(1, ds.n_items + 1, size=n_neg)
    return Batch(histories=histories, mask=mask, lengths=lengths,
                 targets=targets, negatives=negatives)


def eval_examples(ds: Dataset, split: str):
    """Yield (uid, history window row, mask, real length, target id set) per held-out user.

    History is the first 80% of the full sequence (most recent max_seq_len of it);
    targets are the remaining, strictly later, occurrences.
    """
    for uid in ds.users_in(split):
        seq = ds.sequences[uid]
        h = int(0.8 * len(seq))
        if h < 1 or h >= len(seq):
            continue
        row, mask, n = history_window(seq, h, ds.max_seq_len)
        yield uid, row, mask, n, set(seq[h:])


@dataclass
class SynthTruth:
    """Ground truth for a synthetic corpus, used by metric and retrieval oracles."""

    item_cluster: np.ndarray     # (n_items + 1,) int, [0] unused
    user_clusters: dict          # uid -> list of preferred cluster ids
    user_pool: dict              # uid -> list of the user's personal item ids
    item_vectors: np.ndarray     # (n_items + 1, n_clusters + noise_dims) planted latents
    n_clusters: int
    noise_dims: int


def synth_generate(n_users: int, n_items: int, n_clusters: int, noise_dims: int,
                   seed: int, pref_range=(2, 4), pool_range=(12, 24),
                   len_range=(40, 80), distractor_frac: float = 0.1,
                   max_seq_len: int = 20):
    """Clustered synthetic corpus with repeat interactions and known structure.

    Items are partitioned into clusters; each user repeatedly interacts with a
    personal pool drawn from their preferred clusters, with a uniform distractor
    mixed in. Returns (Dataset, SynthTruth).
    """
    if n_clusters < 2:
        raise ConfigError(f"need at least 2 clusters, got {n_clusters}")
    if n_items < n_clusters:
        raise ConfigError(f"{n_items} items cannot form {n_clusters} clusters")
    rng = RngHub(seed).stream("synth")

    item_cluster = np.zeros(n_items + 1, dtype=np.int64)
    cluster_items = [[] for _ in range(n_clusters)]
    for iid in range(1, n_items + 1):
        c = (iid - 1) % n_clusters
        item_cluster[iid] = c
        cluster_items[c].append(iid)

    item_vectors = np.zeros((n_items + 1, n_clusters + noise_dims), dtype=np.float32)
    for iid in range(1, n_items + 1):
        item_vectors[iid, item_cluster[iid]] = 1.0
    if noise_dims:
        item_vectors[1:, n_clusters:] = 0.05 * rng.standard_normal(
            (n_items, noise_dims)).astype(np.float32)

    sequences, user_clusters, user_pool = {}, {}, {}
    for uid in range(1, n_users + 1):
        n_pref = min(int(rng.integers(pref_range[0], pref_range[1] + 1)), n_clusters)
        prefs = sorted(rng.choice(n_clusters, size=n_pref, replace=False).tolist())
        weights = rng.dirichlet(np.ones(n_pref))
        m = int(rng.integers(pool_range[0], pool_range[1] + 1))
        counts = rng.multinomial(m, weights)
        pool = []
        for c, cnt in zip(prefs, counts):
            avail = cluster_items[c]
            cnt = min(max(int(cnt), 1), len(avail))
            pool.extend(int(avail[j]) for j in rng.choice(len(avail), size=cnt, replace=False))
        L = int(rng.integers(len_range[0], len_range[1] + 1))
        seq = []
        for _ in range(L):
            if rng.random() < distractor_frac:
                seq.append(int(rng.integers(1, n_items + 1)))
            else:
                seq.append(pool[int(rng.integers(0, len(pool)))])
        sequences[uid] = seq
        user_clusters[uid] = prefs
        user_pool[uid] = pool

    user_tokens = [f"u{u:05d}" for u in range(1, n_users + 1)]
    item_tokens = [f"i{i:05d}" for i in range(1, n_items + 1)]
    ds = Dataset(
        user_tokens=user_tokens,
        item_tokens=item_tokens,
        user_index={t: i + 1 for i, t in enumerate(user_tokens)},
        item_index={t: i + 1 for i, t in enumerate(item_tokens)},
        sequences=sequences,
        max_seq_len=max_seq_len,
        filter_min=1,
        n_interactions=sum(len(s) for s in sequences.values()),
    )
    truth = SynthTruth(item_cluster=item_cluster, user_clusters=user_clusters,
                       user_pool=user_pool, item_vectors=item_vectors,
                       n_clusters=n_clusters, noise_dims=noise_dims)
    return ds, truth


def load_categories(path: str, ds: Dataset) -> CategoryMap:
    """Parse an item->categories file against an indexed dataset.

    Items absent from the index are skipped (counted); empty category fields
    give the empty set.
    """
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read category file {path!r}: {exc}") from exc
    item_cats, cat_index, cat_tokens = {}, {}, []
    warnings = 0
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected item<TAB>cat1,cat2,...")
            token, cats = parts
            iid = ds.item_index.get(token)
            if iid is None:
                warnings += 1
                continue
            ids = set()
            for cat in cats.split(","):
                cat = cat.strip()
                if not cat:
                    continue
                if cat not in cat_index:
                    cat_tokens.append(cat)
                    cat_index[cat] = len(cat_tokens) - 1
                ids.add(cat_index[cat])
            item_cats[iid] = frozenset(ids)
    return CategoryMap(item_cats=item_cats, cat_tokens=cat_tokens,
                       unknown_item_warnings=warnings)


def categories_from_clusters(truth: SynthTruth) -> CategoryMap:
    """CategoryMap with one category per planted cluster (category id == cluster id)."""
    item_cats = {iid: frozenset({int(truth.item_cluster[iid])})
                 for iid in range(1, len(truth.item_cluster))}
    return CategoryMap(item_cats=item_cats,
                       cat_tokens=[f"c{c}" for c in range(truth.n_clusters)])


def write_interactions(ds: Dataset, path: str) -> None:
    """Write the dataset back out in the interaction-log format (position as timestamp)."""
    with open(path, "w", encoding="utf-8") as fh:
        for uid in sorted(ds.sequences):
            utok = ds.user_tokens[uid - 1]
            for pos, iid in enumerate(ds.sequences[uid]):
                fh.write(f"{utok}\t{ds.item_tokens[iid - 1]}\t{pos}\n")


def write_categories(cats: CategoryMap, ds: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for iid in sorted(cats.item_cats):
            names = ",".join(cats.cat_tokens[c] for c in sorted(cats.item_cats[iid]))
            fh.write(f"{ds.item_tokens[iid - 1]}\t{names}\n")
