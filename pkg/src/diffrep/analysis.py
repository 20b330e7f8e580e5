"""Representation analysis: linear CKA, kNN classification, (t, b, pool) grid search."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .features import FeatureRequest, image_seeds, precompute_features
from .heads import HeadKind, ProbeProtocol, StoreSource, build_head, train_probe

log = logging.getLogger(__name__)

__all__ = [
    "linear_cka",
    "gram_cka",
    "CkaMatrix",
    "cka_grid",
    "cka_from_features",
    "KnnResult",
    "knn_classify",
    "GridSpec",
    "GridResult",
    "probe_cell",
    "grid_search",
]

CKA_AXES = ("blocks", "timesteps", "cross")


# --------------------------------------------------------------------------
# CKA
# --------------------------------------------------------------------------

def _as_matrix(x, name: str) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim > 2:
        a = a.reshape(a.shape[0], -1)
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def _center(a: np.ndarray) -> Optional[np.ndarray]:
    """Column-centered copy, or None when it is (numerically) all zeros."""
    c = a - a.mean(axis=0, keepdims=True)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if float(np.abs(c).max(initial=0.0)) <= 1e-12 * scale:
        return None
    return c


def _cross_sq(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Frobenius norm of ``a.T @ b``.

    For wide matrices the same number is obtained from the n x n products,
    which keeps memory at O(n^2) instead of O(p q).
    """
    n = a.shape[0]
    if a.shape[1] * b.shape[1] <= 4 * n * n:
        return float(np.sum((a.T @ b) ** 2))
    return float(np.sum((a @ a.T) * (b @ b.T)))


def linear_cka(x, y) -> float:
    """Linear CKA between ``n x p`` and ``n x q`` feature matrices.

    Columns are centered; the value is ``|Y'X|_F^2 / (|X'X|_F |Y'Y|_F)``.
    Returns 0 when either centered matrix is identically zero.
    """
    a, b = _as_matrix(x, "X"), _as_matrix(y, "Y")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row count mismatch: X has {a.shape[0]} rows, Y has {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError(f"CKA needs at least 2 rows, got {a.shape[0]}")
    a, b = _center(a), _center(b)
    if a is None or b is None:
        return 0.0
    num = _cross_sq(a, b)
    den = np.sqrt(_cross_sq(a, a)) * np.sqrt(_cross_sq(b, b))
    return float(min(1.0, max(0.0, num / den)))


def gram_cka(x, y) -> float:
    """CKA via HSIC on linear Gram matrices with a centering matrix.

    Independent of :func:`linear_cka`; used to cross-check it.
    """
    a, b = _as_matrix(x, "X"), _as_matrix(y, "Y")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row count mismatch: X has {a.shape[0]} rows, Y has {b.shape[0]}")
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"CKA needs at least 2 rows, got {n}")
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = h @ (a @ a.T) @ h, h @ (b @ b.T) @ h

    def hsic(p, q):
        return np.trace(p @ q) / (n - 1) ** 2

    kk, ll = hsic(k, k), hsic(l, l)
    if kk <= 0 or ll <= 0:
        return 0.0
    return float(hsic(k, l) / np.sqrt(kk * ll))


@dataclass
class CkaMatrix:
    values: np.ndarray
    row_labels: List
    col_labels: List
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "row_labels": list(self.row_labels),
                "col_labels": list(self.col_labels), "meta": self.meta}


def cka_from_features(feats: Sequence[np.ndarray], labels: Sequence, workers: int = 1,
                      others: Optional[Sequence[np.ndarray]] = None, other_labels: Optional[Sequence] = None) -> CkaMatrix:
    """Pairwise CKA over feature matrices.

    With ``others`` the result is the rectangular cross matrix; otherwise a
    symmetric self-comparison where only the upper triangle is computed.
    """
    feats = [_as_matrix(f, f"features[{i}]") for i, f in enumerate(feats)]
    if others is None:
        m = len(feats)
        cells = [(i, j) for i in range(m) for j in range(i, m)]
        right = feats
    else:
        right = [_as_matrix(f, f"others[{i}]") for i, f in enumerate(others)]
        cells = [(i, j) for i in range(len(feats)) for j in range(len(right))]

    def job(cell):
        i, j = cell
        if others is None and i == j:
            return 1.0 if _center(feats[i]) is not None else 0.0
        return linear_cka(feats[i], right[j])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(job, cells))
    else:
        vals = [job(c) for c in cells]
    out = np.zeros((len(feats), len(right)))
    for (i, j), v in zip(cells, vals):
        out[i, j] = v
        if others is None:
            out[j, i] = v
    return CkaMatrix(out, list(labels), list(other_labels if others is not None else labels))


def cka_grid(
    model,
    schedule,
    images: torch.Tensor,
    axis: str,
    entries: Sequence,
    *,
    t: Optional[int] = None,
    b: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
    external: Optional[Dict[str, np.ndarray]] = None,
    sample_ids: Optional[Sequence[int]] = None,
) -> CkaMatrix:
    """CKA matrix along one axis.

    ``blocks``: ``entries`` are block ids at fixed ``t``.
    ``timesteps``: ``entries`` are timesteps at fixed ``b``.
    ``cross``: ``entries`` are ``(t, b)`` taps of this model compared with
    the named feature dumps in ``external`` (each ``n x d``).

    Raw tap activations are flattened per image (no pooling); noise is the
    fixed per-image seed stream of ``seed``.
    """
    if axis not in CKA_AXES:
        raise ValueError(f"unknown CKA axis {axis!r}; choose from {CKA_AXES}")
    if images.shape[0] < 2:
        raise ValueError(f"CKA needs at least 2 images, got {images.shape[0]}")
    if not entries:
        raise ValueError("no axis entries given")
    if axis == "blocks":
        if t is None:
            raise ValueError("blocks axis needs a fixed t")
        taps = [(int(t), int(e)) for e in entries]
    elif axis == "timesteps":
        if b is None:
            raise ValueError("timesteps axis needs a fixed b")
        taps = [(int(e), int(b)) for e in entries]
    else:
        if not external:
            raise ValueError("cross axis needs external feature dumps")
        taps = [(int(e[0]), int(e[1])) for e in entries]
    for tt, bb in taps:
        FeatureRequest(tt, bb).validate(model.catalog, schedule.T)

    cache: Dict[Tuple[int, int], np.ndarray] = {}
    for tap in taps:
        if tap not in cache:
            store = precompute_features(model, schedule, images, None, FeatureRequest(*tap), seed, workers=workers)
            cache[tap] = store.features.double().numpy()
    feats = [cache[tap] for tap in taps]
    meta = {"axis": axis, "t": t, "b": b, "seed": seed, "n": int(images.shape[0]), "pooling": "none (flattened raw taps)",
            "noise_policy": "fixed-seed", "taps": [list(tp) for tp in taps],
            "sample_ids": list(sample_ids) if sample_ids is not None else list(range(images.shape[0]))}
    labels = [e if axis != "cross" else f"t{tp[0]}-b{tp[1]}" for e, tp in zip(entries, taps)]
    if axis == "cross":
        names = sorted(external)
        for nme in names:
            if external[nme].shape[0] != images.shape[0]:
                raise ValueError(f"external dump {nme!r} has {external[nme].shape[0]} rows for {images.shape[0]} images")
        res = cka_from_features(feats, labels, workers, others=[external[k] for k in names], other_labels=names)
    else:
        res = cka_from_features(feats, labels, workers)
    res.meta = meta
    return res


# --------------------------------------------------------------------------
# kNN
# --------------------------------------------------------------------------

@dataclass
class KnnResult:
    predictions: np.ndarray
    rankings: np.ndarray  # (M, min(5, classes)) class ranking per query
    top1: Optional[float] = None
    top5: Optional[float] = None
    meta: dict = field(default_factory=dict)


def _distances(train: np.ndarray, queries: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        return cdist(queries, train, "euclidean")
    if metric == "cosine":
        def unit(a):
            norm = np.linalg.norm(a, axis=1, keepdims=True)
            return np.divide(a, norm, out=np.zeros_like(a), where=norm > 0)
        # 1 - cos between unit vectors, via half the squared euclidean distance
        return 0.5 * cdist(unit(queries), unit(train), "sqeuclidean")
    raise ValueError(f"unknown metric {metric!r}; use 'euclidean' or 'cosine'")


def knn_classify(train_feats, train_labels, queries, k: int, metric: str = "euclidean",
                 query_labels=None, num_classes: Optional[int] = None) -> KnnResult:
    """Majority vote among the ``k`` nearest training rows.

    Neighbours are ordered by (distance, label), so ties at the k-th place
    never depend on row order. Vote ties go to the class with the smaller
    summed neighbour distance, then to the lower class index; the same key
    ranks classes for top-5.
    """
    x = _as_matrix(train_feats, "train_feats")
    q = _as_matrix(queries, "queries")
    y = np.asarray(train_labels, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError(f"{n} training rows but {y.shape[0]} labels")
    if x.shape[1] != q.shape[1]:
        raise ValueError(f"dimension mismatch: training features have {x.shape[1]} dims, queries {q.shape[1]}")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in 1..{n} (number of training rows)")
    classes = int(num_classes if num_classes is not None else y.max() + 1)
    dist = _distances(x, q, metric)
    preds = np.empty(q.shape[0], dtype=np.int64)
    width = min(5, classes)
    ranks = np.empty((q.shape[0], width), dtype=np.int64)
    for i in range(q.shape[0]):
        order = np.lexsort((y, dist[i]))[:k]
        votes = np.bincount(y[order], minlength=classes)
        summed = np.bincount(y[order], weights=dist[i, order], minlength=classes)
        summed = np.where(votes > 0, summed, np.inf)
        ranking = np.lexsort((np.arange(classes), summed, -votes))
        preds[i] = ranking[0]
        ranks[i] = ranking[:width]
    res = KnnResult(preds, ranks, meta={"k": k, "metric": metric, "num_classes": classes})
    if query_labels is not None:
        ql = np.asarray(query_labels, dtype=np.int64).reshape(-1)
        if ql.shape[0] != q.shape[0]:
            raise ValueError(f"{q.shape[0]} queries but {ql.shape[0]} query labels")
        res.top1 = float(np.mean(preds == ql))
        res.top5 = float(np.mean((ranks == ql[:, None]).any(axis=1)))
    return res


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------

@dataclass
class GridSpec:
    t_values: List[int]
    b_values: List[int]
    pool_sizes: List[Optional[int]]
    protocol: ProbeProtocol = field(default_factory=ProbeProtocol)
    head: str = "linear"

    def validate(self, catalog, T: int) -> None:
        for name in ("t_values", "b_values", "pool_sizes"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name} is empty")
        for t in self.t_values:
            if not 1 <= int(t) <= T:
                raise ValueError(f"grid t={t} outside 1..{T}")
        for b in self.b_values:
            catalog.entry(int(b))
        for p in self.pool_sizes:
            if p is not None and int(p) < 1:
                raise ValueError(f"grid pool size {p} must be >= 1")

    def cells(self) -> List[Tuple[int, int, Optional[int]]]:
        return [(int(t), int(b), p if p is None else int(p))
                for t in self.t_values for b in self.b_values for p in self.pool_sizes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = self.protocol.to_dict()
        return d


@dataclass
class GridResult:
    rows: List[dict]  # sorted by accuracy, errors last
    best: Optional[dict]
    spec: dict


def probe_cell(model, schedule, train_images, train_labels, eval_images, eval_labels,
               t: int, b: int, pool: Optional[int], protocol: ProbeProtocol, seed: int,
               head: str = "linear", workers: int = 1):
    """One frozen probe on features ``(t, b)`` average-pooled to ``pool``.

    Train and eval images draw noise from separate seed streams of ``seed``.
    """
    req = FeatureRequest(int(t), int(b), pool)
    tr = precompute_features(model, schedule, train_images, train_labels, req, seed, flatten=False, workers=workers)
    ev = precompute_features(model, schedule, eval_images, eval_labels, req, seed + 1, flatten=False, workers=workers)
    h = build_head(HeadKind(head), tr.features.shape[1:], int(max(train_labels.max(), eval_labels.max())) + 1, seed)
    return train_probe(h, StoreSource(tr.features), train_labels, protocol, "frozen", seed,
                       eval_source=StoreSource(ev.features), eval_labels=eval_labels,
                       provenance={"t": int(t), "b": int(b), "pool": pool})


def _sort_key(row):
    acc = row["top1"]
    pool = -1 if row["pool"] is None else row["pool"]
    return (acc is None, -(acc or 0.0), row["t"], row["b"], pool)


def grid_search(model, schedule, train_images, train_labels, eval_images, eval_labels,
                spec: GridSpec, seed: int = 0, workers: int = 1,
                cell_fn: Optional[Callable] = None) -> GridResult:
    """Probe every (t, b, pool) cell under one protocol and one seed.

    A failing cell becomes an error row. Rows are sorted by top-1
    (descending) with ties in ascending (t, b, pool) order, so the first
    row is the argmax with the lexicographic tie-break.
    """
    spec.validate(model.catalog, schedule.T)
    cell_fn = cell_fn or probe_cell

    def job(cell):
        t, b, pool = cell
        try:
            rep = cell_fn(model, schedule, train_images, train_labels, eval_images, eval_labels,
                          t, b, pool, spec.protocol, seed, spec.head)
            return {"t": t, "b": b, "pool": pool, "top1": rep.top1, "top5": rep.top5,
                    "train_top1": rep.train_top1, "error": ""}
        except Exception as exc:  # recorded, not raised
            log.warning("grid cell t=%s b=%s pool=%s failed: %s", t, b, pool, exc)
            return {"t": t, "b": b, "pool": pool, "top1": None, "top5": None, "train_top1": None,
                    "error": f"{type(exc).__name__}: {exc}"}

    cells = spec.cells()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, cells))
    else:
        rows = [job(c) for c in cells]
    rows.sort(key=_sort_key)
    best = rows[0] if rows and rows[0]["top1"] is not None else None
    return GridResult(rows, best, spec.to_dict())
