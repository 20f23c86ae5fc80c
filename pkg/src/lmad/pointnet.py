"""Hierarchical point cloud encoder (sampling + grouping + shared MLPs).

Geometry (normalization, sampling, grouping, interpolation weights) is plain
numpy and non-differentiable; features flow through autograd tensors.  Every
geometric rule is deterministic and index-stable so that, in eval mode, the
per-point outputs permute exactly with a permutation of the input cloud:

* squared distances are computed component-wise (``dx*dx + dy*dy + dz*dz``)
  so the floating-point result does not depend on reduction internals,
* the centroid used by sampling sums each coordinate column in sorted order,
  making it invariant to input ordering,
* sampling starts at the point farthest from that centroid (ties: smallest
  (x, y, z) lexicographically, then smallest index; later ties: smallest
  index), and grouping keeps members in ascending index order,
* pooling over a group is a max, which is exact under reordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .errors import ShapeError

EPS_INTERP = 1e-8


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SALevelSpec:
    """One set-abstraction level: sample, group within a ball, pool."""

    n_centroids: int
    radius: float
    max_neighbors: int
    mlp: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"n_centroids": self.n_centroids, "radius": self.radius,
                "max_neighbors": self.max_neighbors, "mlp": list(self.mlp)}

    @classmethod
    def from_dict(cls, d: dict) -> "SALevelSpec":
        return cls(n_centroids=int(d["n_centroids"]), radius=float(d["radius"]),
                   max_neighbors=int(d["max_neighbors"]), mlp=tuple(d["mlp"]))


@dataclass(frozen=True)
class FPLevelSpec:
    """One feature-propagation level: interpolate, concat skip, shared MLP."""

    mlp: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"mlp": list(self.mlp)}

    @classmethod
    def from_dict(cls, d: dict) -> "FPLevelSpec":
        return cls(mlp=tuple(d["mlp"]))


@dataclass(frozen=True)
class EncoderConfig:
    sa_levels: tuple[SALevelSpec, ...]
    fp_levels: tuple[FPLevelSpec, ...]
    out_dim: int

    def __post_init__(self):
        if not self.sa_levels:
            raise ShapeError("encoder needs at least one set-abstraction level")
        if len(self.fp_levels) != len(self.sa_levels):
            raise ShapeError("encoder needs one propagation level per abstraction level")
        counts = [lv.n_centroids for lv in self.sa_levels]
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ShapeError(f"centroid counts must strictly decrease, got {counts}")
        radii = [lv.radius for lv in self.sa_levels]
        if any(r <= 0 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
            raise ShapeError(f"radii must be positive and strictly increase, got {radii}")
        for lv in self.sa_levels:
            if lv.max_neighbors < 1 or not lv.mlp:
                raise ShapeError("each abstraction level needs max_neighbors >= 1 and a non-empty MLP")
        if self.fp_levels[-1].mlp[-1] != self.out_dim:
            raise ShapeError(
                f"final propagation width {self.fp_levels[-1].mlp[-1]} != out_dim {self.out_dim}")

    def to_dict(self) -> dict:
        return {"sa_levels": [lv.to_dict() for lv in self.sa_levels],
                "fp_levels": [lv.to_dict() for lv in self.fp_levels],
                "out_dim": self.out_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(sa_levels=tuple(SALevelSpec.from_dict(x) for x in d["sa_levels"]),
                   fp_levels=tuple(FPLevelSpec.from_dict(x) for x in d["fp_levels"]),
                   out_dim=int(d["out_dim"]))


def desk_encoder_config(out_dim: int = 128) -> EncoderConfig:
    """Two-level encoder sized for 512-point clouds on a laptop."""
    return EncoderConfig(
        sa_levels=(SALevelSpec(128, 0.2, 32, (32, 32, 64)),
                   SALevelSpec(32, 0.4, 32, (64, 64, 128))),
        fp_levels=(FPLevelSpec((128, 128)), FPLevelSpec((128, out_dim))),
        out_dim=out_dim)


def micro_encoder_config(out_dim: int = 8) -> EncoderConfig:
    """Single-level encoder small enough for finite-difference checks."""
    return EncoderConfig(sa_levels=(SALevelSpec(4, 0.6, 4, (8, 8)),),
                         fp_levels=(FPLevelSpec((out_dim,)),),
                         out_dim=out_dim)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _check_cloud(coords: np.ndarray, name: str = "coords") -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"{name} must be (N, 3), got {coords.shape}")
    return coords


def sq_dist_to_point(coords: np.ndarray, p: np.ndarray) -> np.ndarray:
    dx = coords[:, 0] - p[0]
    dy = coords[:, 1] - p[1]
    dz = coords[:, 2] - p[2]
    return dx * dx + dy * dy + dz * dz


def sq_dist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, shape (len(a), len(b))."""
    dx = a[:, 0, None] - b[None, :, 0]
    dy = a[:, 1, None] - b[None, :, 1]
    dz = a[:, 2, None] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def canonical_centroid(coords: np.ndarray) -> np.ndarray:
    """Mean point computed from column-sorted values (order-invariant)."""
    coords = _check_cloud(coords)
    return np.sort(coords, axis=0).sum(axis=0) / coords.shape[0]


def normalize_cloud(coords: np.ndarray) -> np.ndarray:
    """Center on the canonical centroid and scale the max radius to 1."""
    coords = _check_cloud(coords)
    centered = coords - canonical_centroid(coords)
    radius = np.sqrt(sq_dist_to_point(centered, np.zeros(3))).max()
    return centered / max(radius, 1e-12)


def farthest_point_sample(coords: np.ndarray, k: int) -> np.ndarray:
    """Greedy max-min sampling of ``k`` distinct indices.

    The walk starts at the point farthest from the canonical centroid
    (ties: lexicographically smallest (x, y, z), then smallest index) and
    repeatedly takes the point maximizing the distance to the selected set
    (ties: smallest index).
    """
    coords = _check_cloud(coords)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise ShapeError(f"cannot sample {k} centroids from a cloud of {n} points")
    d0 = sq_dist_to_point(coords, canonical_centroid(coords))
    cand = np.flatnonzero(d0 == d0.max())
    if cand.size > 1:
        sub = coords[cand]
        order = np.lexsort((cand, sub[:, 2], sub[:, 1], sub[:, 0]))
        start = int(cand[order[0]])
    else:
        start = int(cand[0])
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    mind = sq_dist_to_point(coords, coords[start])
    mind[start] = -1.0  # removes selected points from later argmax scans
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        selected[i] = nxt
        np.minimum(mind, sq_dist_to_point(coords, coords[nxt]), out=mind)
        mind[nxt] = -1.0
    return selected


def ball_query(centers: np.ndarray, coords: np.ndarray, radius: float,
               max_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Group points within ``radius`` of each center.

    Members are listed in ascending index order and truncated to ``max_k``;
    a center with no member falls back to its single nearest point.  Short
    groups are padded by repeating their first member.  Returns the
    (M, max_k) index matrix and the (M,) true member counts.
    """
    centers = _check_cloud(centers, "centers")
    coords = _check_cloud(coords)
    if max_k < 1:
        raise ShapeError(f"max_k must be >= 1, got {max_k}")
    if radius <= 0:
        raise ShapeError(f"radius must be positive, got {radius}")
    d2 = sq_dist_matrix(centers, coords)
    r2 = radius * radius
    m = centers.shape[0]
    idx = np.empty((m, max_k), dtype=np.int64)
    counts = np.empty(m, dtype=np.int64)
    for i in range(m):
        members = np.flatnonzero(d2[i] <= r2)
        if members.size == 0:
            members = np.array([np.argmin(d2[i])], dtype=np.int64)
        members = members[:max_k]
        counts[i] = members.size
        row = np.full(max_k, members[0], dtype=np.int64)
        row[:members.size] = members
        idx[i] = row
    return idx, counts


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class PointLayerParams:
    """Shared per-point linear layer followed by batch norm.

    The linear part carries no bias: batch norm subtracts the batch mean
    right after, so a bias would be a dead parameter (and its exactly-zero
    gradient makes finite-difference checks ill-posed). ``bn_bias`` supplies
    the shift instead.
    """

    w: Tensor
    bn_gain: Tensor
    bn_bias: Tensor
    bn_state: BatchNormState

    def tensors(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.bn_gain", self.bn_gain
        yield f"{prefix}.bn_bias", self.bn_bias

    def buffers(self, prefix: str):
        yield f"{prefix}.bn_mean", self.bn_state.mean
        yield f"{prefix}.bn_var", self.bn_state.var


@dataclass
class EncoderParams:
    sa: list[list[PointLayerParams]]
    fp: list[list[PointLayerParams]]
    head: PointLayerParams

    def _walk(self):
        for i, layers in enumerate(self.sa):
            for j, lay in enumerate(layers):
                yield f"sa{i}.{j}", lay
        for i, layers in enumerate(self.fp):
            for j, lay in enumerate(layers):
                yield f"fp{i}.{j}", lay
        yield "head", self.head

    def tensors(self, prefix: str):
        for name, lay in self._walk():
            yield from lay.tensors(f"{prefix}.{name}")

    def buffers(self, prefix: str):
        for name, lay in self._walk():
            yield from lay.buffers(f"{prefix}.{name}")


def _point_layer(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> PointLayerParams:
    std = np.sqrt(2.0 / d_in)
    return PointLayerParams(
        w=Tensor(rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype), requires_grad=True),
        bn_gain=Tensor(np.ones(d_out, dtype=dtype), requires_grad=True),
        bn_bias=Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
        bn_state=BatchNormState(d_out, dtype=dtype))


def init_encoder_params(rng: np.random.Generator, cfg: EncoderConfig,
                        dtype=np.float32) -> EncoderParams:
    sa_params: list[list[PointLayerParams]] = []
    feat_width = 0
    sa_out: list[int] = []
    for level in cfg.sa_levels:
        width = 3 + feat_width
        layers = []
        for w in level.mlp:
            layers.append(_point_layer(rng, width, w, dtype))
            width = w
        sa_params.append(layers)
        feat_width = width
        sa_out.append(width)
    fp_params: list[list[PointLayerParams]] = []
    src_width = sa_out[-1]
    for step, level in enumerate(cfg.fp_levels):
        depth = len(cfg.sa_levels) - 1 - step
        skip_width = sa_out[depth - 1] if depth >= 1 else 3
        width = src_width + skip_width
        layers = []
        for w in level.mlp:
            layers.append(_point_layer(rng, width, w, dtype))
            width = w
        fp_params.append(layers)
        src_width = width
    head = _point_layer(rng, cfg.out_dim, cfg.out_dim, dtype)
    return EncoderParams(sa=sa_params, fp=fp_params, head=head)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _point_mlp(x: Tensor, layers: list[PointLayerParams], training: bool,
               update_stats: bool | None) -> Tensor:
    for lay in layers:
        x = ag.matmul(x, lay.w)
        x = ag.batch_norm_1d(x, lay.bn_gain, lay.bn_bias, lay.bn_state,
                             training=training, update_running=update_stats)
        x = ag.relu(x)
    return x


def set_abstraction(coords: np.ndarray, feats: Tensor | None, level: SALevelSpec,
                    layers: list[PointLayerParams], training: bool = False,
                    update_stats: bool | None = None) -> tuple[np.ndarray, Tensor]:
    """Sample centroids, group neighbors, run the shared MLP, max-pool.

    Group inputs are ``concat(neighbor - centroid, neighbor_feats)``.
    Returns (centroid coords (M, 3), pooled features (M, mlp[-1])).
    """
    coords = _check_cloud(coords)
    dtype = layers[0].w.dtype
    sel = farthest_point_sample(coords, level.n_centroids)
    centers = coords[sel]
    groups, _ = ball_query(centers, coords, level.radius, level.max_neighbors)
    m, k = groups.shape
    rel = coords[groups] - centers[:, None, :]
    x = Tensor(rel.reshape(m * k, 3).astype(dtype))
    if feats is not None:
        x = ag.concat([x, ag.gather_rows(feats, groups.reshape(-1))], axis=1)
    x = _point_mlp(x, layers, training, update_stats)
    pooled = ag.reduce_max(ag.reshape(x, (m, k, x.shape[1])), axis=1)
    return centers, pooled


def interpolate_features(tgt_coords: np.ndarray, src_coords: np.ndarray,
                         src_feats: Tensor) -> Tensor:
    """Inverse-distance weighted average of the min(3, M) nearest sources."""
    tgt_coords = _check_cloud(tgt_coords, "tgt_coords")
    src_coords = _check_cloud(src_coords, "src_coords")
    m = src_coords.shape[0]
    if m == 0:
        raise ShapeError("feature interpolation needs at least one source point")
    d2 = sq_dist_matrix(tgt_coords, src_coords)
    k = min(3, m)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    nd = np.sqrt(np.take_along_axis(d2, nn, axis=1))
    w = 1.0 / (nd + EPS_INTERP)
    w = w / w.sum(axis=1, keepdims=True)
    dtype = src_feats.dtype
    out = None
    for j in range(k):
        part = ag.gather_rows(src_feats, nn[:, j]) * Tensor(w[:, j:j + 1].astype(dtype))
        out = part if out is None else out + part
    return out


def feature_propagation(tgt_coords: np.ndarray, src_coords: np.ndarray,
                        src_feats: Tensor, skip_feats: Tensor | None,
                        layers: list[PointLayerParams], training: bool = False,
                        update_stats: bool | None = None) -> Tensor:
    """Interpolate source features onto targets, concat skips, shared MLP."""
    x = interpolate_features(tgt_coords, src_coords, src_feats)
    if skip_feats is not None:
        x = ag.concat([x, skip_feats], axis=1)
    return _point_mlp(x, layers, training, update_stats)


@dataclass
class EncoderOutput:
    """Backbone features ``h_p`` and refined features ``h_c``, both (N, out_dim)."""

    h_p: Tensor
    h_c: Tensor


def encode_many(clouds, cfg: EncoderConfig, params: EncoderParams,
                training: bool = False,
                update_stats: bool | None = None) -> list[EncoderOutput]:
    """Encode several clouds as one normalization batch.

    Sampling, grouping and interpolation are computed per cloud (they never
    mix points across clouds), but the shared MLPs run on all clouds' rows
    concatenated, so in training mode each batch-norm layer draws its batch
    statistics from the whole batch.  Training on one cloud at a time would
    normalize every cloud by its own statistics — a regime the running
    (batch-averaged) statistics used in eval mode can never reproduce.
    """
    norms: list[np.ndarray] = []
    for coords in clouds:
        coords = _check_cloud(coords)
        avail = coords.shape[0]
        for i, level in enumerate(cfg.sa_levels):
            if avail < level.n_centroids:
                raise ShapeError(
                    f"set-abstraction level {i} needs at least {level.n_centroids} points, got {avail}")
            avail = level.n_centroids
        norms.append(normalize_cloud(coords))
    if not norms:
        raise ShapeError("encode_many needs at least one cloud")
    nb = len(norms)
    dtype = params.head.w.dtype

    # Per-cloud geometry for every level; feature values never influence it.
    level_coords = [[norm] for norm in norms]
    level_groups: list[list[np.ndarray]] = [[] for _ in norms]
    for level in cfg.sa_levels:
        for b in range(nb):
            cur = level_coords[b][-1]
            centers = cur[farthest_point_sample(cur, level.n_centroids)]
            groups, _ = ball_query(centers, cur, level.radius, level.max_neighbors)
            level_coords[b].append(centers)
            level_groups[b].append(groups)

    # Abstraction: features stay concatenated in cloud order throughout.
    sizes = [n.shape[0] for n in norms]  # rows per cloud at the current level
    level_feats: list[Tensor | None] = [None]
    feats: Tensor | None = None
    for li, (level, layers) in enumerate(zip(cfg.sa_levels, params.sa)):
        m, k = level.n_centroids, level.max_neighbors
        rel_parts, gidx_parts = [], []
        offset = 0
        for b in range(nb):
            groups = level_groups[b][li]
            rel = level_coords[b][li][groups] - level_coords[b][li + 1][:, None, :]
            rel_parts.append(rel.reshape(m * k, 3))
            gidx_parts.append(groups.reshape(-1) + offset)
            offset += sizes[b]
        x = Tensor(np.concatenate(rel_parts).astype(dtype))
        if feats is not None:
            x = ag.concat([x, ag.gather_rows(feats, np.concatenate(gidx_parts))], axis=1)
        x = _point_mlp(x, layers, training, update_stats)
        feats = ag.reduce_max(ag.reshape(x, (nb * m, k, x.shape[1])), axis=1)
        sizes = [m] * nb
        level_feats.append(feats)

    # Propagation: interpolate per cloud (source indices offset into the
    # concatenated rows), then shared MLPs over the concatenation again.
    for step, layers in enumerate(params.fp):
        depth = len(cfg.sa_levels) - 1 - step
        nn_parts, w_parts = [], []
        src_offset = 0
        for b in range(nb):
            tgt, src = level_coords[b][depth], level_coords[b][depth + 1]
            d2 = sq_dist_matrix(tgt, src)
            kk = min(3, src.shape[0])
            nn = np.argsort(d2, axis=1, kind="stable")[:, :kk]
            nd = np.sqrt(np.take_along_axis(d2, nn, axis=1))
            w = 1.0 / (nd + EPS_INTERP)
            nn_parts.append(nn + src_offset)
            w_parts.append(w / w.sum(axis=1, keepdims=True))
            src_offset += src.shape[0]
        nn_all = np.concatenate(nn_parts)
        w_all = np.concatenate(w_parts)
        x = None
        for j in range(nn_all.shape[1]):
            part = ag.gather_rows(feats, nn_all[:, j]) * Tensor(w_all[:, j:j + 1].astype(dtype))
            x = part if x is None else x + part
        skip = level_feats[depth]
        if depth == 0:
            skip = Tensor(np.concatenate([n.astype(dtype) for n in norms]))
        if skip is not None:
            x = ag.concat([x, skip], axis=1)
        feats = _point_mlp(x, layers, training, update_stats)

    h_c = _point_mlp(feats, [params.head], training, update_stats)
    if nb == 1:
        return [EncoderOutput(h_p=feats, h_c=h_c)]
    outs = []
    offset = 0
    for n in norms:
        rows = np.arange(offset, offset + n.shape[0])
        outs.append(EncoderOutput(h_p=ag.gather_rows(feats, rows),
                                  h_c=ag.gather_rows(h_c, rows)))
        offset += n.shape[0]
    return outs


def encode(coords: np.ndarray, cfg: EncoderConfig, params: EncoderParams,
           training: bool = False, update_stats: bool | None = None) -> EncoderOutput:
    """Normalize, abstract down, propagate up, refine per point."""
    return encode_many([coords], cfg, params, training, update_stats)[0]
