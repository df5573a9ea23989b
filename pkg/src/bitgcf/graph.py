"""Bipartite user-item interaction graphs: loading, degree filtering, splitting, propagation.

All node-indexed matrices in the package share one layout: a single index
space ``[0, num_users + num_items)`` with users first, then items. One
propagation step updates users from items and items from users simultaneously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from bitgcf.kernels import propagate_csr


class EdgeListError(ValueError):
    """Malformed edge-list record; message carries the line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EmptyGraphError(ValueError):
    """No edges remain after parsing or degree filtering."""


@dataclass(eq=False)
class CsrAdjacency:
    """Adjacency rows in CSR form; indices sorted and deduplicated per row."""

    indptr: np.ndarray  # int64, shape (num_rows + 1,)
    indices: np.ndarray  # int32, column indices

    @property
    def num_rows(self) -> int:
        return len(self.indptr) - 1

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def row(self, r: int) -> np.ndarray:
        return self.indices[self.indptr[r]:self.indptr[r + 1]]

    def contains(self, r: int, col: int) -> bool:
        row = self.row(r)
        k = np.searchsorted(row, col)
        return k < len(row) and row[k] == col


def _build_csr(rows, cols, num_rows) -> CsrAdjacency:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    counts = np.bincount(rows, minlength=num_rows)
    indptr = np.zeros(num_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return CsrAdjacency(indptr=indptr, indices=cols.astype(np.int32))


@dataclass(eq=False)
class InteractionGraph:
    """Immutable bipartite interaction graph with adjacency in both directions.

    ``user_ids``/``item_ids`` map contiguous internal indices back to the raw
    identifiers of the source file; they are ``None`` for synthetic graphs.
    """

    num_users: int
    num_items: int
    user_to_items: CsrAdjacency
    item_to_users: CsrAdjacency
    user_ids: tuple | None = None
    item_ids: tuple | None = None

    @classmethod
    def from_edge_arrays(cls, num_users, num_items, users, items,
                         user_ids=None, item_ids=None) -> "InteractionGraph":
        """Build from parallel (user, item) index arrays; duplicates collapsed."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if len(users) != len(items):
            raise ValueError("user and item arrays differ in length")
        if len(users) and (users.min() < 0 or users.max() >= num_users):
            raise ValueError("user index out of range")
        if len(items) and (items.min() < 0 or items.max() >= num_items):
            raise ValueError("item index out of range")
        key = users * num_items + items
        key = np.unique(key)
        users, items = key // num_items, key % num_items
        return cls(
            num_users=num_users,
            num_items=num_items,
            user_to_items=_build_csr(users, items, num_users),
            item_to_users=_build_csr(items, users, num_items),
            user_ids=user_ids,
            item_ids=item_ids,
        )

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return len(self.user_to_items.indices)

    @property
    def user_degree(self) -> np.ndarray:
        return self.user_to_items.degrees

    @property
    def item_degree(self) -> np.ndarray:
        return self.item_to_users.degrees

    def items_of(self, u: int) -> np.ndarray:
        return self.user_to_items.row(u)

    def users_of(self, i: int) -> np.ndarray:
        return self.item_to_users.row(i)

    def has_edge(self, u: int, i: int) -> bool:
        return self.user_to_items.contains(u, i)

    @cached_property
    def _edge_keys(self) -> np.ndarray:
        # edges sorted by (user, item) <=> sorted u * num_items + i keys
        users, items = self.edge_arrays()
        return users * self.num_items + items

    def has_edges(self, users, items) -> np.ndarray:
        """Vectorized edge-membership test for parallel index arrays."""
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items)
        pos = np.searchsorted(self._edge_keys, keys)
        found = pos < len(self._edge_keys)
        out = np.zeros(keys.shape, dtype=bool)
        out[found] = self._edge_keys[pos[found]] == keys[found]
        return out

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All edges as parallel (users, items) arrays, sorted by (u, i)."""
        users = np.repeat(np.arange(self.num_users, dtype=np.int64),
                          self.user_to_items.degrees)
        return users, self.user_to_items.indices.astype(np.int64)

    @cached_property
    def propagation_operator(self):
        """Symmetric degree-normalized adjacency over the unified node layout.

        Returns CSR arrays (indptr int64, indices int32, weights float64) of
        the (num_nodes x num_nodes) operator with entry 1/sqrt(deg_u * deg_i)
        on each user-item edge in both directions. Rows of isolated nodes are
        empty, so they propagate to zero.
        """
        du = self.user_degree.astype(np.float64)
        di = self.item_degree.astype(np.float64)
        inv_u = np.zeros_like(du)
        inv_i = np.zeros_like(di)
        np.divide(1.0, np.sqrt(du), out=inv_u, where=du > 0)
        np.divide(1.0, np.sqrt(di), out=inv_i, where=di > 0)

        u2i, i2u = self.user_to_items, self.item_to_users
        indptr = np.concatenate([u2i.indptr, u2i.indptr[-1] + i2u.indptr[1:]])
        indices = np.concatenate([
            u2i.indices.astype(np.int64) + self.num_users,
            i2u.indices.astype(np.int64),
        ]).astype(np.int32)
        row_of = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(indptr))
        inv_all = np.concatenate([inv_u, inv_i])
        col_node = indices.astype(np.int64)
        weights = inv_all[row_of] * inv_all[col_node]
        return indptr, indices, weights

    def validate(self) -> None:
        """Check transpose consistency, sortedness, and index ranges."""
        u2i, i2u = self.user_to_items, self.item_to_users
        if u2i.num_rows != self.num_users or i2u.num_rows != self.num_items:
            raise ValueError("CSR row counts disagree with node counts")
        if len(u2i.indices) != len(i2u.indices):
            raise ValueError("edge counts disagree between directions")
        for adj, bound in ((u2i, self.num_items), (i2u, self.num_users)):
            for r in range(adj.num_rows):
                row = adj.row(r)
                if len(row) == 0:
                    continue
                if row.min() < 0 or row.max() >= bound:
                    raise ValueError("adjacency index out of range")
                if np.any(np.diff(row) <= 0):
                    raise ValueError("adjacency row not sorted/deduplicated")
        users, items = self.edge_arrays()
        ru = np.repeat(np.arange(self.num_items, dtype=np.int64), i2u.degrees)
        forward = set(zip(users.tolist(), items.tolist()))
        backward = set(zip(i2u.indices.tolist(), ru.tolist()))
        if forward != backward:
            raise ValueError("user_to_items and item_to_users encode different edge sets")


@dataclass(eq=False)
class SplitDataset:
    """Train graph plus per-user held-out positives (disjoint from train edges)."""

    train: InteractionGraph
    test_positives: list  # per user: sorted int64 array, possibly empty

    @property
    def num_test_edges(self) -> int:
        return sum(len(p) for p in self.test_positives)

    def users_with_test(self):
        return [u for u, p in enumerate(self.test_positives) if len(p) > 0]


def load_edges(path, min_degree: int = 0) -> InteractionGraph:
    """Parse a whitespace-separated edge list into an interaction graph.

    Each non-comment line is ``user_id item_id`` with an optional numeric
    rating column; any rating counts as an interaction. Raw ids are remapped
    to contiguous 0-based indices in first-appearance order and duplicate
    edges are collapsed. With ``min_degree`` > 0, nodes below the threshold
    are dropped iteratively (removals can push neighbors below the threshold)
    until every remaining node qualifies.
    """
    user_index: dict = {}
    item_index: dict = {}
    us, its = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) not in (2, 3):
                raise EdgeListError(lineno, f"expected 'user item [rating]', got {len(parts)} fields")
            if len(parts) == 3:
                try:
                    float(parts[2])
                except ValueError:
                    raise EdgeListError(lineno, f"rating {parts[2]!r} is not a number") from None
            us.append(user_index.setdefault(parts[0], len(user_index)))
            its.append(item_index.setdefault(parts[1], len(item_index)))
    if not us:
        raise EmptyGraphError(f"no interactions found in {path}")

    users = np.asarray(us, dtype=np.int64)
    items = np.asarray(its, dtype=np.int64)
    num_users, num_items = len(user_index), len(item_index)
    key = np.unique(users * num_items + items)
    users, items = key // num_items, key % num_items

    if min_degree > 0:
        while True:
            du = np.bincount(users, minlength=num_users)
            di = np.bincount(items, minlength=num_items)
            keep = (du[users] >= min_degree) & (di[items] >= min_degree)
            if keep.all():
                break
            users, items = users[keep], items[keep]
            if len(users) == 0:
                raise EmptyGraphError(
                    f"no interactions left after min_degree={min_degree} filtering")

    uid_by_index = {idx: raw for raw, idx in user_index.items()}
    iid_by_index = {idx: raw for raw, idx in item_index.items()}
    keep_u = np.unique(users)
    keep_i = np.unique(items)
    remap_u = np.full(num_users, -1, dtype=np.int64)
    remap_i = np.full(num_items, -1, dtype=np.int64)
    remap_u[keep_u] = np.arange(len(keep_u))
    remap_i[keep_i] = np.arange(len(keep_i))

    return InteractionGraph.from_edge_arrays(
        num_users=len(keep_u),
        num_items=len(keep_i),
        users=remap_u[users],
        items=remap_i[items],
        user_ids=tuple(uid_by_index[int(k)] for k in keep_u),
        item_ids=tuple(iid_by_index[int(k)] for k in keep_i),
    )


def split_train_test(graph: InteractionGraph, test_fraction: float, seed: int) -> SplitDataset:
    """Hold out ceil(test_fraction * degree) positives per user, reproducibly.

    Users keep at least one train edge (the holdout count is capped at
    degree - 1); users with a single interaction contribute no test edge.
    The train graph keeps the full node space, so every test positive's user
    and item exist in it; an item may end up isolated in train, in which case
    it propagates to zero but still carries its base embedding.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    users, items = graph.edge_arrays()
    test_mask = np.zeros(graph.num_edges, dtype=bool)
    indptr = graph.user_to_items.indptr
    for u in range(graph.num_users):
        lo, hi = int(indptr[u]), int(indptr[u + 1])
        deg = hi - lo
        if deg < 2:
            continue
        n_test = min(math.ceil(test_fraction * deg), deg - 1)
        pick = rng.choice(deg, size=n_test, replace=False)
        test_mask[lo + pick] = True

    train = InteractionGraph.from_edge_arrays(
        num_users=graph.num_users,
        num_items=graph.num_items,
        users=users[~test_mask],
        items=items[~test_mask],
        user_ids=graph.user_ids,
        item_ids=graph.item_ids,
    )
    test_positives = []
    tu, ti = users[test_mask], items[test_mask]
    order = np.lexsort((ti, tu))
    tu, ti = tu[order], ti[order]
    bounds = np.searchsorted(tu, np.arange(graph.num_users + 1))
    for u in range(graph.num_users):
        test_positives.append(ti[bounds[u]:bounds[u + 1]].copy())
    return SplitDataset(train=train, test_positives=test_positives)


def propagate(embeddings: np.ndarray, graph: InteractionGraph) -> np.ndarray:
    """One step of degree-normalized neighbor aggregation over all nodes.

    ``embeddings`` is (num_nodes, dim) in the users-then-items layout. Every
    user row becomes the normalized sum of its items' rows and vice versa;
    isolated nodes map to zero. The operator is linear and symmetric.
    """
    embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] != graph.num_nodes:
        raise ValueError(
            f"expected ({graph.num_nodes}, dim) embeddings, got {embeddings.shape}")
    indptr, indices, weights = graph.propagation_operator
    out = np.empty_like(embeddings)
    propagate_csr(indptr, indices, weights, embeddings, out)
    return out
