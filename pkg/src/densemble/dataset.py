"""Implicit-feedback interaction data: loading, splitting, and noise injection.

Interactions are binary positives over a dense (user, item) index space.
External identifiers from input files are preserved through an IdMap so
reports can refer back to the original tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class DatasetError(Exception):
    """Unreadable, malformed, or inconsistent interaction data."""


def _frozen_row(items) -> np.ndarray:
    row = np.asarray(items, dtype=np.int64)
    row.setflags(write=False)
    return row


@dataclass(frozen=True)
class InteractionMatrix:
    """Binary positives stored as one ascending item-index row per user."""

    num_users: int
    num_items: int
    rows: tuple  # tuple of np.int64 arrays, one per user, strictly ascending

    def __post_init__(self):
        if self.num_users < 0 or self.num_items < 0:
            raise DatasetError("matrix dimensions must be nonnegative")
        if len(self.rows) != self.num_users:
            raise DatasetError("row count does not match num_users")
        for u, row in enumerate(self.rows):
            if row.size and (row[0] < 0 or row[-1] >= self.num_items):
                raise DatasetError(f"user {u}: item index out of range")
            if row.size > 1 and not np.all(np.diff(row) > 0):
                raise DatasetError(f"user {u}: row not strictly ascending")

    @classmethod
    def from_rows(cls, num_users, num_items, rows) -> "InteractionMatrix":
        """Build from per-user iterables; duplicates collapse, order is free."""
        cleaned = tuple(_frozen_row(sorted(set(map(int, r)))) for r in rows)
        return cls(num_users, num_items, cleaned)

    @cached_property
    def num_interactions(self) -> int:
        return int(sum(row.size for row in self.rows))

    def row(self, user: int) -> np.ndarray:
        return self.rows[user]

    def dense(self, users=None) -> np.ndarray:
        """Materialize 0/1 float64 rows for the given users (all by default)."""
        if users is None:
            users = range(self.num_users)
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        out = np.zeros((users.size, self.num_items), dtype=np.float64)
        for b, u in enumerate(users):
            out[b, self.rows[u]] = 1.0
        return out


@dataclass(frozen=True)
class SplitDataset:
    """Train/test pair over the same (num_users, num_items) index space."""

    train: InteractionMatrix
    test: InteractionMatrix

    def __post_init__(self):
        same_shape = (
            self.train.num_users == self.test.num_users
            and self.train.num_items == self.test.num_items
        )
        if not same_shape:
            raise DatasetError("train and test must share (num_users, num_items)")
        for u in range(self.train.num_users):
            if np.intersect1d(self.train.rows[u], self.test.rows[u]).size:
                raise DatasetError(f"user {u}: train and test rows overlap")


@dataclass(frozen=True)
class IdMap:
    """Bijection between external identifier tokens and dense internal indices."""

    users: tuple
    items: tuple

    def user_index(self, token: str) -> int:
        return self._user_lookup[token]

    def item_index(self, token: str) -> int:
        return self._item_lookup[token]

    def user_id(self, index: int) -> str:
        return self.users[index]

    def item_id(self, index: int) -> str:
        return self.items[index]

    @cached_property
    def _user_lookup(self):
        return {tok: i for i, tok in enumerate(self.users)}

    @cached_property
    def _item_lookup(self):
        return {tok: i for i, tok in enumerate(self.items)}


_DELIMITERS = {"tsv": "\t", "csv": ","}


def load_interactions(path, fmt: str = "auto"):
    """Read one interaction per line: user-id, item-id, [rating], [timestamp].

    Ratings and timestamps are ignored; every listed pair becomes a binary
    positive and duplicates collapse. Internal ids are dense and 0-based in
    first-appearance order. Lines starting with `#` and blank lines are
    skipped. Returns (InteractionMatrix, IdMap).
    """
    if fmt not in ("auto", "tsv", "csv"):
        raise ValueError(f"unknown format {fmt!r}: expected tsv, csv, or auto")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = fh.readlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc

    delim = _DELIMITERS.get(fmt)
    user_ids: dict = {}
    item_ids: dict = {}
    pairs = set()
    for lineno, line in enumerate(raw_lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if delim is None:  # auto: decided once, from the first data line
            delim = "\t" if "\t" in line else ","
        fields = [f.strip() for f in line.split(delim)]
        if len(fields) < 2 or not fields[0] or not fields[1]:
            raise DatasetError(f"{path}: line {lineno}: expected at least 2 fields")
        u_tok, i_tok = fields[0], fields[1]
        u = user_ids.setdefault(u_tok, len(user_ids))
        i = item_ids.setdefault(i_tok, len(item_ids))
        pairs.add((u, i))

    if not pairs:
        raise DatasetError(f"{path}: empty dataset")
    rows = [[] for _ in range(len(user_ids))]
    for u, i in pairs:
        rows[u].append(i)
    matrix = InteractionMatrix.from_rows(len(user_ids), len(item_ids), rows)
    idmap = IdMap(users=tuple(user_ids), items=tuple(item_ids))
    return matrix, idmap


def write_interactions(path, matrix: InteractionMatrix, idmap: IdMap | None = None,
                       fmt: str = "tsv") -> None:
    """Write one `user<sep>item` line per positive (external ids if mapped)."""
    sep = _DELIMITERS[fmt]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in range(matrix.num_users):
            for i in matrix.rows[u]:
                u_tok = idmap.user_id(u) if idmap else str(u)
                i_tok = idmap.item_id(int(i)) if idmap else str(int(i))
                fh.write(f"{u_tok}{sep}{i_tok}\n")


def sparsity(matrix: InteractionMatrix) -> float:
    """Fraction of empty cells: 1 - n / (U * D)."""
    cells = matrix.num_users * matrix.num_items
    if cells == 0:
        raise DatasetError("sparsity undefined for a zero-size matrix")
    return 1.0 - matrix.num_interactions / cells


def split_train_test(matrix: InteractionMatrix, ratio: float, seed: int) -> SplitDataset:
    """Per-user split: shuffle the row, first ceil(ratio * |row|) go to train.

    A user with a single interaction keeps it in train (ceil rounds up), so
    every user retains training signal. Deterministic for a fixed seed.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_rows, test_rows = [], []
    for u in range(matrix.num_users):
        row = matrix.rows[u]
        # permutation() of a zero-length read-only array raises; nothing to
        # shuffle in that case anyway.
        perm = rng.permutation(row) if row.size else row
        n_train = math.ceil(ratio * row.size)
        train_rows.append(np.sort(perm[:n_train]))
        test_rows.append(np.sort(perm[n_train:]))
    train = InteractionMatrix(matrix.num_users, matrix.num_items,
                              tuple(_frozen_row(r) for r in train_rows))
    test = InteractionMatrix(matrix.num_users, matrix.num_items,
                             tuple(_frozen_row(r) for r in test_rows))
    return SplitDataset(train=train, test=test)


def inject_noise(matrix: InteractionMatrix, rate: float, seed: int) -> InteractionMatrix:
    """Add round(rate * n) false positives uniformly over absent cells.

    Existing positives are never removed or duplicated; the additions are
    sampled without replacement from the whole absent-cell grid and are
    deterministic per seed. Raises DatasetError when the grid cannot hold
    the requested count.
    """
    if rate < 0:
        raise ValueError(f"noise rate must be nonnegative, got {rate}")
    n = matrix.num_interactions
    n_add = int(np.rint(rate * n))
    if n_add == 0:
        return matrix
    num_cells = matrix.num_users * matrix.num_items
    capacity = num_cells - n
    if n_add > capacity:
        raise DatasetError(
            f"cannot add {n_add} false positives: only {capacity} absent cells")

    occupied = set()
    for u in range(matrix.num_users):
        base = u * matrix.num_items
        occupied.update(base + int(i) for i in matrix.rows[u])

    rng = np.random.default_rng(seed)
    chosen: set = set()
    if capacity < 2 * n_add:
        # Dense edge case: more than half the free cells are requested, so
        # rejection sampling would crawl. Enumerate the complement instead.
        mask = np.ones(num_cells, dtype=bool)
        mask[np.fromiter(occupied, dtype=np.int64, count=len(occupied))] = False
        absent = np.flatnonzero(mask)
        chosen.update(map(int, rng.choice(absent, size=n_add, replace=False)))
    else:
        while len(chosen) < n_add:
            need = n_add - len(chosen)
            for c in rng.integers(0, num_cells, size=max(1024, 2 * need)):
                c = int(c)
                if c not in occupied and c not in chosen:
                    chosen.add(c)
                    if len(chosen) == n_add:
                        break

    extra_rows = [list(map(int, matrix.rows[u])) for u in range(matrix.num_users)]
    for c in chosen:
        extra_rows[c // matrix.num_items].append(c % matrix.num_items)
    return InteractionMatrix.from_rows(matrix.num_users, matrix.num_items, extra_rows)


def synthetic_interactions(num_users: int, num_items: int, seed: int, *,
                           num_clusters: int = 4, density: float = 0.05,
                           popularity_exponent: float = 0.8) -> InteractionMatrix:
    """Clustered synthetic positives with a long-tailed item popularity.

    Users belong to one of `num_clusters` taste clusters; items a cluster
    prefers are several times more likely to be picked, on top of a global
    rank^-exponent popularity curve. Every user gets at least two items.
    """
    if num_users < 1 or num_items < 2:
        raise ValueError("need at least 1 user and 2 items")
    rng = np.random.default_rng(seed)
    pop_rank = rng.permutation(num_items)
    base = (1.0 + pop_rank) ** (-popularity_exponent)
    cluster_of_item = rng.integers(0, num_clusters, size=num_items)
    rows = []
    for _ in range(num_users):
        cluster = int(rng.integers(0, num_clusters))
        probs = base * np.where(cluster_of_item == cluster, 4.0, 1.0)
        probs = probs / probs.sum()
        size = int(min(num_items - 1, 2 + rng.poisson(density * num_items)))
        rows.append(rng.choice(num_items, size=size, replace=False, p=probs))
    return InteractionMatrix.from_rows(num_users, num_items, rows)
