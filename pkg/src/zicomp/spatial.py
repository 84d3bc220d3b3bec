"""Graph handling, CAR precision, and Moran eigenvector bases.

The spatial random effects live on the top eigenvectors of the Moran
operator F = P A P (P the centering projector, A the adjacency matrix).
Those eigenvectors are mutually orthogonal, orthogonal to the constant
vector, and the leading ones encode positively autocorrelated patterns.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdjacencyGraph",
    "CarPrecision",
    "BasisSet",
    "GraphFormatError",
    "build_lattice",
    "load_graph",
    "save_graph",
    "car_precision",
    "moran_operator",
    "compute_basis",
    "basis_for_graph",
    "save_basis",
    "load_basis",
]


class GraphFormatError(ValueError):
    """Raised when an adjacency file cannot be parsed."""


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected simple graph on nodes 0..n-1.

    Edges are stored canonically as (i, j) with i < j, deduplicated.
    Self-loops are rejected; isolated nodes are allowed.
    """

    n: int
    edges: tuple = field(default=())

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"graph needs at least one node, got n={self.n}")
        canon = set()
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ValueError(f"self-loop on node {i} is not allowed")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", tuple(sorted(canon)))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n)
        for i, j in self.edges:
            d[i] += 1.0
            d[j] += 1.0
        return d

    def content_hash(self) -> str:
        """Stable hash of (n, canonical edge list), used as cache key."""
        h = hashlib.sha256()
        h.update(str(self.n).encode())
        for i, j in self.edges:
            h.update(f":{i},{j}".encode())
        return h.hexdigest()[:16]


def build_lattice(rows: int, cols: int) -> AdjacencyGraph:
    """Rook-adjacency regular lattice with rows*cols nodes.

    Node (r, c) has index r*cols + c.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"lattice dimensions must be positive, got {rows}x{cols}")
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    return AdjacencyGraph(rows * cols, tuple(edges))


def load_graph(path) -> AdjacencyGraph:
    """Parse an adjacency file.

    Format: first non-comment line is ``n <count>``; each following
    non-comment line is ``i j`` (0-based endpoints). ``#`` starts a
    comment; blank lines are skipped. Duplicate and reversed edges
    collapse to one undirected edge.
    """
    with open(path) as fh:
        lines = fh.readlines()
    n = None
    edges = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if n is None:
            if len(parts) != 2 or parts[0] != "n":
                raise GraphFormatError(
                    f"{path}:{lineno}: expected header 'n <count>', got {text!r}"
                )
            try:
                n = int(parts[1])
            except ValueError:
                raise GraphFormatError(
                    f"{path}:{lineno}: node count {parts[1]!r} is not an integer"
                ) from None
            if n < 1:
                raise GraphFormatError(f"{path}:{lineno}: node count must be >= 1")
            continue
        if len(parts) != 2:
            raise GraphFormatError(
                f"{path}:{lineno}: expected edge 'i j', got {text!r}"
            )
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(
                f"{path}:{lineno}: edge endpoints must be integers, got {text!r}"
            ) from None
        if i == j:
            raise GraphFormatError(f"{path}:{lineno}: self-loop on node {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(
                f"{path}:{lineno}: edge ({i}, {j}) out of range for n={n}"
            )
        edges.append((i, j))
    if n is None:
        raise GraphFormatError(f"{path}: no header line found")
    return AdjacencyGraph(n, tuple(edges))


def save_graph(graph: AdjacencyGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"n {graph.n}\n")
        for i, j in graph.edges:
            fh.write(f"{i} {j}\n")


@dataclass(frozen=True)
class CarPrecision:
    """Conditional autoregressive precision Q = diag(A 1) - rho * A."""

    rho: float
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def car_precision(graph: AdjacencyGraph, rho: float = 0.99) -> CarPrecision:
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    a = graph.adjacency_matrix()
    q = np.diag(a.sum(axis=1)) - rho * a
    return CarPrecision(rho=rho, matrix=q)


def moran_operator(graph: AdjacencyGraph) -> np.ndarray:
    """F = P A P with P = I - 11'/n. Symmetric; F @ 1 = 0."""
    a = graph.adjacency_matrix()
    n = graph.n
    p = np.eye(n) - np.full((n, n), 1.0 / n)
    return p @ a @ p


@dataclass(frozen=True)
class BasisSet:
    """Leading Moran eigenvectors with their projected CAR precision.

    vectors is n x q with orthonormal columns orthogonal to the constant
    vector; eigenvalues are in non-increasing order; prior_precision is
    B' Q B, symmetric positive definite when the graph is connected.
    """

    q: int
    vectors: np.ndarray
    eigenvalues: np.ndarray
    prior_precision: np.ndarray
    rho: float
    graph_hash: str


def compute_basis(graph: AdjacencyGraph, q: int, rho: float = 0.99) -> BasisSet:
    """Top-q eigenpairs of the Moran operator plus B' Q B.

    Ordering is deterministic: eigenvalues descending, ties broken by
    the dense solver's output order, and each vector's sign is fixed so
    its largest-magnitude entry is positive.
    """
    n = graph.n
    if not 1 <= q < n:
        raise ValueError(f"need 1 <= q < n, got q={q}, n={n}")
    f = moran_operator(graph)
    # The constant vector is an exact eigenvector (eigenvalue 0). Shift it
    # far below the rest of the spectrum so the solver can never mix it
    # into a degenerate zero eigenspace; other eigenpairs are unchanged.
    shift = float(n)
    f_adj = f - shift * np.full((n, n), 1.0 / n)
    vals, vecs = np.linalg.eigh(f_adj)
    order = np.argsort(-vals, kind="stable")[:q]
    b = vecs[:, order]
    ev = vals[order]
    # sign convention: largest-|entry| positive (first such entry on ties)
    for k in range(q):
        col = b[:, k]
        idx = int(np.argmax(np.abs(col)))
        if col[idx] < 0:
            b[:, k] = -col
    qmat = car_precision(graph, rho).matrix
    qb = b.T @ qmat @ b
    qb = 0.5 * (qb + qb.T)
    return BasisSet(
        q=q,
        vectors=b,
        eigenvalues=ev,
        prior_precision=qb,
        rho=rho,
        graph_hash=graph.content_hash(),
    )


def save_basis(basis: BasisSet, path) -> None:
    meta = {
        "format_version": 1,
        "q": basis.q,
        "rho": basis.rho,
        "graph_hash": basis.graph_hash,
    }
    np.savez(
        path,
        meta=np.array(json.dumps(meta)),
        vectors=basis.vectors,
        eigenvalues=basis.eigenvalues,
        prior_precision=basis.prior_precision,
    )


def load_basis(path) -> BasisSet:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        return BasisSet(
            q=int(meta["q"]),
            vectors=z["vectors"],
            eigenvalues=z["eigenvalues"],
            prior_precision=z["prior_precision"],
            rho=float(meta["rho"]),
            graph_hash=str(meta["graph_hash"]),
        )


def basis_for_graph(
    graph: AdjacencyGraph, q: int, rho: float = 0.99, cache_dir=None
) -> BasisSet:
    """compute_basis with an optional on-disk cache.

    The cache key covers graph content, rho, and q; a stale or foreign
    file never matches and is silently recomputed.
    """
    if cache_dir is None:
        return compute_basis(graph, q, rho)
    os.makedirs(cache_dir, exist_ok=True)
    key = f"basis_{graph.content_hash()}_rho{rho:.6g}_q{q}.npz"
    path = os.path.join(cache_dir, key)
    if os.path.exists(path):
        try:
            cached = load_basis(path)
        except Exception:
            cached = None
        if (
            cached is not None
            and cached.graph_hash == graph.content_hash()
            and cached.q == q
            and abs(cached.rho - rho) < 1e-12
        ):
            return cached
    basis = compute_basis(graph, q, rho)
    save_basis(basis, path)
    return basis
