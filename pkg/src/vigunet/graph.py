"""KNN graph construction over feature-map nodes and max-relative aggregation.

Nodes are the spatial positions of a feature map, flattened row-major, so a
[B, C, H, W] map becomes B node matrices of shape [H*W, C]. Graphs are
rebuilt from the current features on every use (dynamic graphs) and are
per-sample; edges are neighbor-index tables, not adjacency matrices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import kaiming_uniform
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, concat, make_rng, take

# below this many per-sample distance entries (n*m*d) use the exact
# elementwise formula; above it, the BLAS-friendly expansion
_EXACT_LIMIT = 1 << 22


def to_nodes(x: Tensor) -> Tensor:
    """[B, C, H, W] feature map -> [B, H*W, C] node matrices."""
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b, h * w, c)


def to_map(nodes: Tensor, h: int, w: int) -> Tensor:
    """[B, n, C] node matrices -> [B, C, h, w] feature map (n == h*w)."""
    b, n, c = nodes.shape
    if n != h * w:
        raise ShapeError(f"{n} nodes cannot fill a {h}x{w} grid")
    return nodes.reshape(b, h, w, c).transpose(0, 3, 1, 2)


@dataclass
class KnnGraph:
    """Per-node neighbor table; row i lists the neighborhood of node i,
    self index first, remaining entries ordered nearest-first."""

    neighbors: np.ndarray  # int64 [n, k_effective]

    @property
    def k_effective(self) -> int:
        return self.neighbors.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.neighbors.shape[0]

    def to_text(self) -> str:
        """Debug dump: one line per node, space-separated neighbor indices."""
        return "\n".join(" ".join(str(j) for j in row) for row in self.neighbors) + "\n"


def pairwise_sq_dist(features) -> np.ndarray:
    """All-pairs squared Euclidean distances between feature rows [n, d]."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    if f.ndim != 2:
        raise ShapeError(f"expected [n, d] features, got {f.shape}")
    diff = f[:, None, :] - f[None, :, :]
    return (diff * diff).sum(axis=-1)


def _cross_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between rows of a [B,n,d] and b [B,m,d] -> [B,n,m]."""
    _, n, d = a.shape
    m = b.shape[1]
    if n * m * d <= _EXACT_LIMIT:
        diff = a[:, :, None, :] - b[:, None, :, :]
        return np.einsum("bnmd,bnmd->bnm", diff, diff)
    sa = np.einsum("bnd,bnd->bn", a, a)
    sb = np.einsum("bmd,bmd->bm", b, b)
    out = sa[:, :, None] + sb[:, None, :] - 2.0 * (a @ b.transpose(0, 2, 1))
    return np.maximum(out, 0.0, out=out)


def _knn_batch(feats: np.ndarray, k: int, grid=None, reduction=1) -> np.ndarray:
    """Neighbor tables [B, n, k_effective] for a batch of node matrices.

    With reduction r > 1 the candidate set is the r x r average-pooled grid
    and each chosen candidate is mapped back to the node at its cell center;
    with r == 1 every node is a candidate. k_effective = min(k, #candidates).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    bsz, n, d = feats.shape
    if n == 0:
        raise ValueError("cannot build a graph over zero nodes")
    f64 = feats.astype(np.float64, copy=False)

    if reduction <= 1:
        cand = f64
        reps = np.arange(n, dtype=np.intp)
        slot_of = reps  # every node occupies its own candidate slot
    else:
        if grid is None:
            raise ValueError("grid=(h, w) is required when reduction > 1")
        h, w = grid
        if h * w != n:
            raise ShapeError(f"grid {h}x{w} does not match {n} nodes")
        if h % reduction or w % reduction:
            raise ValueError(f"reduction {reduction} must divide grid {h}x{w}")
        hr, wr = h // reduction, w // reduction
        cand = f64.reshape(bsz, hr, reduction, wr, reduction, d).mean(axis=(2, 4))
        cand = cand.reshape(bsz, hr * wr, d)
        ci = np.arange(hr) * reduction + reduction // 2
        cj = np.arange(wr) * reduction + reduction // 2
        reps = (ci[:, None] * w + cj[None, :]).reshape(-1).astype(np.intp)
        slot_of = np.full(n, -1, dtype=np.intp)
        slot_of[reps] = np.arange(reps.size)

    m = cand.shape[1]
    k_eff = min(k, m)
    self_col = np.broadcast_to(np.arange(n, dtype=np.int64)[None, :, None], (bsz, n, 1))
    need = k_eff - 1
    if need == 0:
        return self_col.copy()
    dist = _cross_sq_dist(f64, cand)
    # nodes that are themselves candidates get their own slot pushed past the
    # horizon, so the head of the sort never contains self
    own = np.flatnonzero(slot_of >= 0) if reduction > 1 else reps
    dist[:, own, slot_of[own]] = np.inf
    order = _smallest_by_dist_then_slot(dist, need)
    chosen = reps[order]
    return np.concatenate([self_col, chosen.astype(np.int64)], axis=2)


def _smallest_by_dist_then_slot(dist: np.ndarray, need: int) -> np.ndarray:
    """Slots of the ``need`` smallest entries per row of dist [B, n, m],
    ordered by (distance, slot index) lexicographically.

    Partitioning first keeps this O(m) per row; ties that straddle the
    partition boundary fall back to an exact per-row sort.
    """
    part = np.argpartition(dist, need - 1, axis=-1)[..., :need]
    vals = np.take_along_axis(dist, part, axis=-1)
    # rows where more entries fit under the boundary value than we selected
    # have a tie the partition may have resolved against the lower slot
    bound = vals.max(axis=-1, keepdims=True)
    tied = (dist <= bound).sum(axis=-1) != need
    inner = np.lexsort((part, vals), axis=-1)
    out = np.take_along_axis(part, inner, axis=-1)
    for b, i in zip(*np.nonzero(tied)):
        row = dist[b, i]
        out[b, i] = np.lexsort((np.arange(row.shape[0]), row))[:need]
    return out


def knn_graph(features, k: int, grid=None, reduction=1) -> KnnGraph:
    """Nearest-neighbor table over one node matrix [n, d], self-loop first."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    if f.ndim != 2:
        raise ShapeError(f"expected [n, d] features, got {f.shape}")
    return KnnGraph(_knn_batch(f[None], k, grid=grid, reduction=reduction)[0])


def _mr_aggregate_batch(x: Tensor, neighbors: np.ndarray) -> Tensor:
    """Max-relative aggregation on a batch: [B,n,d] -> [B,n,2d].

    Row i becomes concat(x_i, max_j(x_j - x_i)) over the neighbor table;
    the self-loop contributes the zero vector to the max.
    """
    bsz, n, d = x.shape
    flat = x.reshape(bsz * n, d)
    offsets = (np.arange(bsz, dtype=np.int64) * n)[:, None, None]
    gathered = take(flat, neighbors + offsets)  # [B, n, k, d]
    diffs = gathered - x.reshape(bsz, n, 1, d)
    return concat([x, diffs.max(axis=2)], axis=2)


def mr_aggregate(features: Tensor, graph: KnnGraph) -> Tensor:
    """Max-relative aggregation for one node matrix [n, d] -> [n, 2d]."""
    n, d = features.shape
    nb = graph.neighbors
    if nb.shape[0] != n:
        raise ShapeError(f"graph covers {nb.shape[0]} nodes but features have {n} rows")
    if nb.size and (nb.min() < 0 or nb.max() >= n):
        raise ShapeError(f"graph indices outside [0, {n})")
    out = _mr_aggregate_batch(features.reshape(1, n, d), nb[None])
    return out.reshape(n, 2 * d)


class UpdateHeads:
    """Per-head affine update of aggregated node features.

    Columns split into ``heads`` contiguous blocks; each block gets its own
    weight/bias and the results concatenate back. heads == 1 degenerates to
    a single affine map.
    """

    def __init__(self, in_dim, out_dim, heads, rng=None, dtype=DEFAULT_DTYPE):
        if in_dim % heads:
            raise ValueError(f"in_dim {in_dim} not divisible by {heads} heads")
        if out_dim % heads:
            raise ValueError(f"out_dim {out_dim} not divisible by {heads} heads")
        rng = make_rng(rng)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        cin, cout = in_dim // heads, out_dim // heads
        self.weights = [kaiming_uniform((cin, cout), cin, rng, dtype) for _ in range(heads)]
        self.biases = [Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
                       for _ in range(heads)]

    def forward(self, agg: Tensor) -> Tensor:
        if agg.shape[-1] != self.in_dim:
            raise ShapeError(f"expected last dim {self.in_dim}, got {agg.shape}")
        cin = self.in_dim // self.heads
        outs = []
        for h, (w, b) in enumerate(zip(self.weights, self.biases)):
            outs.append(agg[..., h * cin : (h + 1) * cin] @ w + b)
        return concat(outs, axis=agg.ndim - 1)

    __call__ = forward

    def named_parameters(self, prefix=""):
        for h in range(self.heads):
            yield f"{prefix}{h}.weight", self.weights[h]
            yield f"{prefix}{h}.bias", self.biases[h]


def head_split_update(agg: Tensor, heads: UpdateHeads) -> Tensor:
    """Apply the per-head affine update to aggregated features [n, 2d]."""
    return heads.forward(agg)
