"""HDBSCAN* over a weighted cosine + Euclidean metric.

Core distance is the distance to the ``min_samples``-th nearest other point.
The minimum spanning tree of the mutual-reachability graph is built with
Prim's algorithm, either on a materialised pairwise matrix or with rows
computed on demand.  Equal-weight MST edges are merged in one step, so the
single-linkage hierarchy is an n-ary tree that does not depend on tie order.
Cluster selection is excess of mass with the root excluded.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

# above this many points the pairwise matrix is not materialised
FULL_MATRIX_MAX = 4096


@njit(cache=True)
def _dist_row(i, X, E, lam_c, lam_e, out):
    n = X.shape[0]
    D = E.shape[1]
    for j in range(n):
        dot = 0.0
        for d in range(D):
            dot += E[i, d] * E[j, d]
        cd = 1.0 - dot
        if cd < 0.0:
            cd = 0.0
        s = 0.0
        for a in range(X.shape[1]):
            t = X[i, a] - X[j, a]
            s += t * t
        out[j] = lam_c * cd + lam_e * np.sqrt(s)
    out[i] = 0.0


@njit(cache=True)
def _pairwise(X, E, lam_c, lam_e):
    n = X.shape[0]
    M = np.empty((n, n))
    for i in range(n):
        _dist_row(i, X, E, lam_c, lam_e, M[i])
    return M


@njit(cache=True)
def _core_from_rows(X, E, lam_c, lam_e, M, use_full, k):
    n = X.shape[0]
    core = np.zeros(n)
    row = np.empty(n)
    if k <= 0 or n < 2:
        return core
    for i in range(n):
        if use_full:
            for j in range(n):
                row[j] = M[i, j]
        else:
            _dist_row(i, X, E, lam_c, lam_e, row)
        row[i] = np.inf
        core[i] = np.partition(row, k - 1)[k - 1]
    return core


@njit(cache=True)
def _prim(X, E, lam_c, lam_e, M, use_full, core):
    n = core.shape[0]
    in_tree = np.zeros(n, np.bool_)
    best = np.full(n, np.inf)
    parent = np.full(n, -1, np.int64)
    row = np.empty(n)
    ea = np.empty(max(n - 1, 0), np.int64)
    eb = np.empty(max(n - 1, 0), np.int64)
    ew = np.empty(max(n - 1, 0))
    u = 0
    for step in range(n - 1):
        in_tree[u] = True
        if use_full:
            for j in range(n):
                row[j] = M[u, j]
        else:
            _dist_row(u, X, E, lam_c, lam_e, row)
        cu = core[u]
        nxt = -1
        bw = np.inf
        for v in range(n):
            if in_tree[v]:
                continue
            m = row[v]
            if cu > m:
                m = cu
            if core[v] > m:
                m = core[v]
            if m < best[v]:
                best[v] = m
                parent[v] = u
            if nxt < 0 or best[v] < bw:
                bw = best[v]
                nxt = v
        ea[step] = parent[nxt]
        eb[step] = nxt
        ew[step] = best[nxt]
        u = nxt
    return ea, eb, ew


def _prep(X, E, lam_c, lam_e):
    X = np.ascontiguousarray(X, dtype=float).reshape(len(X), -1)
    if E is None:
        E = np.zeros((len(X), 0))
        lam_c = 0.0
    E = np.ascontiguousarray(E, dtype=float).reshape(len(X), -1)
    if lam_c != 0.0 and len(E):
        nrm = np.linalg.norm(E, axis=1)
        if np.any(nrm == 0):
            raise ValueError("zero embedding: cosine distance undefined")
        E = E / nrm[:, None]
    return X, E, float(lam_c), float(lam_e)


def pairwise_distances(X, E=None, lam_c=0.0, lam_e=1.0):
    """Full matrix of ``lam_c * (1 - cos(e_p, e_q)) + lam_e * |x_p - x_q|``."""
    X, E, lam_c, lam_e = _prep(X, E, lam_c, lam_e)
    return _pairwise(X, E, lam_c, lam_e)


def core_distances_matrix(M, min_samples):
    n = len(M)
    k = min(int(min_samples), n - 1)
    dummy = np.zeros((n, 0))
    return _core_from_rows(dummy, dummy, 0.0, 0.0, np.ascontiguousarray(M, dtype=float), True, k)


def mst(X, E=None, lam_c=0.0, lam_e=1.0, min_samples=5, full=None, matrix=None):
    """Mutual-reachability MST edges (a, b, w) and the core distances."""
    if matrix is not None:
        M = np.ascontiguousarray(matrix, dtype=float)
        n = len(M)
        X = E = np.zeros((n, 0))
        use_full = True
    else:
        X, E, lam_c, lam_e = _prep(X, E, lam_c, lam_e)
        n = len(X)
        use_full = n <= FULL_MATRIX_MAX if full is None else bool(full)
        M = _pairwise(X, E, lam_c, lam_e) if use_full else np.zeros((0, 0))
    k = min(int(min_samples), n - 1)
    core = _core_from_rows(X, E, lam_c, lam_e, M, use_full, k)
    a, b, w = _prim(X, E, lam_c, lam_e, M, use_full, core)
    return a, b, w, core


class _UF:
    def __init__(self, n):
        self.p = np.arange(n)

    def find(self, x):
        p = self.p
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.p[max(ra, rb)] = min(ra, rb)


def single_linkage_tree(n, a, b, w):
    """n-ary hierarchy from MST edges.

    Returns (children, weight, size): nodes 0..n-1 are points; every later node
    merges all components joined at one distinct edge weight.
    """
    children = [[] for _ in range(n)]
    weight = [0.0] * n
    size = [1] * n
    if n == 0:
        return children, weight, size
    order = np.lexsort((b, a, w))
    uf = _UF(n)
    node_of = list(range(n))
    i = 0
    m = len(order)
    while i < m:
        j = i
        while j < m and w[order[j]] == w[order[i]]:
            j += 1
        group = order[i:j]
        pre = []
        for e in group:
            pre.append(uf.find(a[e]))
            pre.append(uf.find(b[e]))
        for e in group:
            uf.union(a[e], b[e])
        merged = {}
        for r in set(pre):
            merged.setdefault(uf.find(r), set()).add(node_of[r])
        for root in sorted(merged):
            kids = sorted(merged[root])
            children.append(kids)
            weight.append(float(w[order[i]]))
            size.append(sum(size[k] for k in kids))
            node_of[root] = len(children) - 1
        i = j
    return children, weight, size


def _leaves(children, v):
    out, stack = [], [v]
    while stack:
        u = stack.pop()
        if children[u]:
            stack.extend(children[u])
        else:
            out.append(u)
    return out


def _lam(w):
    return math.inf if w == 0 else 1.0 / w


def condense(children, weight, size, min_cluster_size):
    """Condensed cluster tree.

    Returns a list of clusters, each a dict with ``parent``, ``birth`` (lambda),
    ``children`` (cluster indices), ``points`` ({point: lambda at which it left
    this cluster, including points that moved on into child clusters}).
    Cluster 0 is the root.
    """
    root = len(children) - 1
    clusters = [{"parent": -1, "birth": 0.0, "children": [], "points": {}}]
    stack = [(root, 0)]
    while stack:
        v, c = stack.pop()
        kids = children[v]
        if not kids:
            clusters[c]["points"][v] = math.inf
            continue
        lam = _lam(weight[v])
        big = [k for k in kids if size[k] >= min_cluster_size]
        pts = clusters[c]["points"]
        if len(big) >= 2:
            for k in kids:
                for p in _leaves(children, k):
                    pts[p] = lam
            for k in big:
                clusters.append({"parent": c, "birth": lam, "children": [], "points": {}})
                clusters[c]["children"].append(len(clusters) - 1)
                stack.append((k, len(clusters) - 1))
        elif len(big) == 1:
            for k in kids:
                if k != big[0]:
                    for p in _leaves(children, k):
                        pts[p] = lam
            stack.append((big[0], c))
        else:
            for p in _leaves(children, v):
                pts[p] = lam
    return clusters


def stability(cluster):
    birth = cluster["birth"]
    terms = [0.0 if lam == birth else lam - birth for _, lam in sorted(cluster["points"].items())]
    return math.fsum(terms)


def select_clusters(clusters):
    """Excess-of-mass selection (parent wins ties); the root is never selected."""
    n = len(clusters)
    stab = [stability(c) for c in clusters]
    best = [0.0] * n
    selected = [False] * n
    for c in range(n - 1, 0, -1):  # children always have larger indices than parents
        kids = clusters[c]["children"]
        if not kids:
            selected[c] = True
            best[c] = stab[c]
            continue
        s = math.fsum(best[k] for k in kids)
        if stab[c] >= s:
            selected[c] = True
            best[c] = stab[c]
            stack = list(kids)
            while stack:
                u = stack.pop()
                selected[u] = False
                stack.extend(clusters[u]["children"])
        else:
            best[c] = s
    return [c for c in range(1, n) if selected[c]]


def labels_from_selection(n, clusters, selected):
    """Label each point by the selected cluster at or above the cluster it fell out of."""
    home = np.zeros(n, np.int64)
    for ci, c in enumerate(clusters):
        for p in c["points"]:
            # a point's deepest cluster is the one with the largest index containing it
            if ci > home[p]:
                home[p] = ci
    sel = set(selected)
    raw = np.full(n, -1, np.int64)
    for p in range(n):
        c = int(home[p])
        while c > 0 and c not in sel:
            c = clusters[c]["parent"]
        if c > 0:
            raw[p] = c
    return canonical_labels(raw)


def canonical_labels(raw):
    """Renumber non-negative labels 0.. in order of each cluster's smallest point index."""
    out = np.full(len(raw), -1, np.int64)
    mapping = {}
    for p, c in enumerate(raw):
        if c < 0:
            continue
        if c not in mapping:
            mapping[c] = len(mapping)
        out[p] = mapping[c]
    return out


def hdbscan(X, min_cluster_size=30, min_samples=10, E=None, lam_c=0.0, lam_e=1.0, full=None, matrix=None):
    """Cluster labels (-1 = noise).

    ``X`` holds positions; ``E`` optional embeddings weighted by ``lam_c``.
    ``matrix`` replaces the metric with a precomputed pairwise distance matrix.
    When the hierarchy has no cluster below the root but there are at least
    ``min_cluster_size`` points, all points form one cluster.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    n = len(matrix) if matrix is not None else len(X)
    if n < min_cluster_size or n == 0:
        return np.full(n, -1, np.int64)
    a, b, w, _ = mst(X, E, lam_c, lam_e, min_samples, full, matrix)
    children, weight, size = single_linkage_tree(n, a, b, w)
    clusters = condense(children, weight, size, min_cluster_size)
    selected = select_clusters(clusters)
    if not selected:
        return np.zeros(n, np.int64)
    return labels_from_selection(n, clusters, selected)
