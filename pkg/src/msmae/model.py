"""Hierarchical masked point autoencoder.

Encoder: a mini point feature extractor embeds the finest-scale visible
neighborhoods into tokens, then per scale a stack of pre-norm transformer
blocks with radius-limited self-attention runs, followed by a merge that
pools each coarser seed's neighbor tokens. Masking is drawn at the
coarsest scale and back-projected, so every scale exposes the same
spatial regions.

Decoder: visible coarse tokens plus a shared learnable mask token at
every masked coarse position, full (unmasked) attention, and between
stages inverse-distance interpolation onto the next finer scale with a
linear channel change; visible rows are fused with their encoder tokens
through a 2C->C linear. The head reconstructs, for each masked
second-scale token, its k_2 finest-scale neighbors as seed-relative
offsets under a symmetric squared-l2 Chamfer loss.

All functions are pure in (params, config, inputs); parameters live in a
flat name->Tensor dict with a creation order fixed by param_shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InvariantError
from .geometry import chamfer_sets, interpolate, radius_mask
from .masking import MaskAssignment, back_project, build_scales, independent_masks, sample_visible

FFN_RATIO = 4  # hidden width of every feed-forward layer, in multiples of C


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-size setting."""

    num_points: int = 2048
    counts: tuple = (512, 256, 64)
    dims: tuple = (96, 192, 384)
    radii: tuple = (0.32, 0.64, 1.28)
    ks: tuple = (16, 8, 8)
    encoder_blocks_per_stage: int = 5
    decoder_blocks_per_stage: int = 1
    heads: int = 6
    mask_ratio: float = 0.8
    # ablation switches
    hierarchical_encoder: bool = True
    hierarchical_decoder: bool = True
    skip_connections: bool = True
    local_attention: bool = True
    multi_scale_mask: bool = True

    @property
    def num_scales(self):
        return len(self.counts)

    def validate(self):
        S = self.num_scales
        if S < 2:
            raise ConfigError(f"need at least 2 scales, got {S}")
        if not (len(self.dims) == len(self.radii) == len(self.ks) == S):
            raise ConfigError("counts, dims, radii, ks must have equal length")
        if self.num_points <= self.counts[0]:
            raise ConfigError(f"num_points {self.num_points} must exceed scale-1 count {self.counts[0]}")
        prev = self.num_points
        for i, (n, k) in enumerate(zip(self.counts, self.ks)):
            if n >= prev or n < 1:
                raise ConfigError(f"scale counts must strictly decrease: {list(self.counts)}")
            if not 1 <= k <= prev:
                raise ConfigError(f"k={k} at scale {i + 1} exceeds parent size {prev}")
            prev = n
        if self.counts[-1] < 3:
            raise ConfigError("coarsest scale needs >= 3 seeds for 3-point interpolation")
        if any(b > a for a, b in zip(self.dims[1:], self.dims)):
            raise ConfigError(f"dims must be non-decreasing: {list(self.dims)}")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ConfigError(f"radii must strictly increase: {list(self.radii)}")
        if self.dims[0] < 2 or self.dims[0] % 2:
            raise ConfigError(f"first feature width must be even and >= 2, got {self.dims[0]}")
        if self.heads < 1 or any(d % self.heads for d in self.dims):
            raise ConfigError(f"heads={self.heads} must divide every width in {list(self.dims)}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.encoder_blocks_per_stage < 1 or self.decoder_blocks_per_stage < 1:
            raise ConfigError("block counts per stage must be >= 1")
        return self

    def encoder_block_plan(self):
        """Blocks per encoder stage; the flat ablation runs them all at scale 1."""
        S, B = self.num_scales, self.encoder_blocks_per_stage
        if self.hierarchical_encoder:
            return [B] * S
        return [S * B] + [0] * (S - 1)

    def decoder_block_plan(self):
        S, B = self.num_scales, self.decoder_blocks_per_stage
        if self.hierarchical_decoder:
            return [B] * (S - 1)
        return [(S - 1) * B] + [0] * (S - 2)

    def to_text(self):
        """Stable key=value serialization used inside checkpoints."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        types = {f.name: f for f in fields(cls)}
        for line in text.strip().splitlines():
            key, _, raw = line.partition("=")
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            default = getattr(cls, key, None)
            if isinstance(default, tuple) or key in ("counts", "dims", "radii", "ks"):
                parts = [p for p in raw.split(",") if p]
                num = float if key == "radii" else int
                kwargs[key] = tuple(num(p) for p in parts)
            elif isinstance(default, bool):
                kwargs[key] = raw == "True"
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs).validate()


def _block_shapes(prefix, dim):
    return {
        f"{prefix}.ln1.g": (dim,),
        f"{prefix}.ln1.b": (dim,),
        f"{prefix}.attn.wq": (dim, dim),
        f"{prefix}.attn.bq": (dim,),
        f"{prefix}.attn.wk": (dim, dim),
        f"{prefix}.attn.bk": (dim,),
        f"{prefix}.attn.wv": (dim, dim),
        f"{prefix}.attn.bv": (dim,),
        f"{prefix}.attn.wo": (dim, dim),
        f"{prefix}.attn.bo": (dim,),
        f"{prefix}.ln2.g": (dim,),
        f"{prefix}.ln2.b": (dim,),
        f"{prefix}.ffn.w0": (dim, FFN_RATIO * dim),
        f"{prefix}.ffn.b0": (FFN_RATIO * dim,),
        f"{prefix}.ffn.w1": (FFN_RATIO * dim, dim),
        f"{prefix}.ffn.b1": (dim,),
    }


def _pos_shapes(prefix, dim):
    # two-layer coordinate MLP, hidden width = dim
    return {
        f"{prefix}.w0": (3, dim),
        f"{prefix}.b0": (dim,),
        f"{prefix}.w1": (dim, dim),
        f"{prefix}.b1": (dim,),
    }


def param_shapes(config):
    """Ordered name->shape map; creation, init and checkpoint order."""
    config.validate()
    d = config.dims
    S = config.num_scales
    shapes = {}
    half = d[0] // 2
    shapes.update({
        "embed.mlp1.w0": (3, half), "embed.mlp1.b0": (half,),
        "embed.mlp1.w1": (half, d[0]), "embed.mlp1.b1": (d[0],),
        "embed.mlp2.w0": (d[0], d[0]), "embed.mlp2.b0": (d[0],),
        "embed.mlp2.w1": (d[0], d[0]), "embed.mlp2.b1": (d[0],),
    })
    enc_plan = config.encoder_block_plan()
    for i in range(S):
        if enc_plan[i]:
            shapes.update(_pos_shapes(f"enc{i + 1}.pos", d[i]))
            for b in range(enc_plan[i]):
                shapes.update(_block_shapes(f"enc{i + 1}.blk{b + 1}", d[i]))
        if i < S - 1:
            shapes.update({
                f"merge{i + 2}.w0": (d[i] + 3, d[i + 1]), f"merge{i + 2}.b0": (d[i + 1],),
                f"merge{i + 2}.w1": (d[i + 1], d[i + 1]), f"merge{i + 2}.b1": (d[i + 1],),
            })
    shapes["mask_token"] = (d[S - 1],)
    dec_plan = config.decoder_block_plan()
    for j in range(1, S):
        dim_j = d[S - j]
        if dec_plan[j - 1]:
            shapes.update(_pos_shapes(f"dec{j}.pos", dim_j))
            for b in range(dec_plan[j - 1]):
                shapes.update(_block_shapes(f"dec{j}.blk{b + 1}", dim_j))
        if j < S - 1:
            shapes.update({f"prop{j}.w": (dim_j, d[S - j - 1]), f"prop{j}.b": (d[S - j - 1],)})
        if j >= 2 and config.skip_connections:
            shapes.update({f"skip{j}.w": (2 * dim_j, dim_j), f"skip{j}.b": (dim_j,)})
    shapes["recon.w"] = (d[1], config.ks[1] * 3)
    shapes["recon.b"] = (config.ks[1] * 3,)
    return shapes


def param_count(config):
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config, seed, dtype=np.float32):
    """Fresh parameter dict: uniform +-sqrt(6/(fan_in+fan_out)) matrices,
    zero biases, identity norms, mask token from N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "mask_token":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = T.tensor(arr.astype(dtype), requires_grad=True)
    return params


def _lin(params, prefix, x):
    return T.add(T.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _mlp2(params, prefix, x):
    """w0 -> gelu -> w1, the shape every small MLP here takes."""
    h = T.gelu(T.add(T.matmul(x, params[f"{prefix}.w0"]), params[f"{prefix}.b0"]))
    return T.add(T.matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])


def _pos_encoding(params, prefix, coords, dtype):
    return _mlp2(params, prefix, T.tensor(coords.astype(dtype)))


def _attention(params, prefix, x, allow, heads):
    """Multi-head self-attention over one token set.

    x is (n, C) already normalized; allow is an (n, n) boolean adjacency.
    Returns (output (n, C), probs (heads, n, n) numpy).
    """
    n, C = x.shape
    dh = C // heads
    q = T.add(T.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = T.add(T.matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = T.add(T.matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])

    def split(t):  # (n, C) -> (heads, n, dh)
        return T.transpose(T.reshape(t, (n, heads, dh)), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    probs = T.masked_softmax(scores, allow[None, :, :])
    mixed = T.matmul(probs, vh)  # (heads, n, dh)
    merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, C))
    out = T.add(T.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    return out, probs.data


def encoder_block(params, prefix, feats, pos, allow, heads, return_attn=False):
    """Pre-norm transformer block with adjacency-restricted attention.

    The positional encoding is re-added to the features ahead of every
    block, so each attention layer sees current coordinates.
    """
    h = T.add(feats, pos) if pos is not None else feats
    normed = T.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    attn_out, probs = _attention(params, f"{prefix}.attn", normed, allow, heads)
    h = T.add(h, attn_out)
    normed2 = T.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = T.add(h, _mlp2(params, f"{prefix}.ffn", normed2))
    if return_attn:
        return h, probs
    return h


def embed_tokens(params, config, repr, assignment):
    """Finest-scale visible neighborhoods -> C_1 tokens (mini point network).

    Neighbor coordinates are re-centered on their seed, so the embedding is
    translation invariant; max-pool over the k_1 neighbors makes it
    neighbor-order invariant.
    """
    dtype = params["embed.mlp1.w0"].dtype
    vis = assignment.visible[0]
    idx = np.flatnonzero(vis)
    seeds = repr.seeds[0][idx]  # (n, 3)
    groups = repr.input_points[repr.neighbor_index[0][idx]]  # (n, k, 3)
    rel = (groups - seeds[:, None, :]).astype(dtype)
    n, k, _ = rel.shape
    flat = T.tensor(rel.reshape(n * k, 3))
    per_point = _mlp2(params, "embed.mlp1", flat)
    ids = np.repeat(np.arange(n), k)
    pooled = T.segment_max(per_point, ids, n)
    return _mlp2(params, "embed.mlp2", pooled)


def merge_tokens(params, config, repr, assignment, scale, feats):
    """Pool scale-(scale-1) visible tokens into scale-`scale` visible tokens.

    scale is 1-based with scale >= 2. Each visible seed gathers its k
    neighbor tokens (closure guarantees they are visible), concatenates the
    neighbor's seed-relative coordinate, applies an MLP and max-pools.
    """
    i = scale - 1  # 0-based target scale index
    dtype = feats.dtype
    vis_here = assignment.visible[i]
    vis_below = assignment.visible[i - 1]
    below_pos = np.full(vis_below.shape[0], -1, dtype=np.int64)
    below_pos[np.flatnonzero(vis_below)] = np.arange(int(vis_below.sum()))
    idx = np.flatnonzero(vis_here)
    neigh = repr.neighbor_index[i][idx]  # (n, k) global indices into scale i-1
    rows = below_pos[neigh]
    if (rows < 0).any():
        raise InvariantError(
            f"merge at scale {scale}: a required neighbor token is masked; "
            "visibility masks are not closure-consistent"
        )
    n, k = rows.shape
    gathered = T.gather(feats, rows)  # (n, k, C)
    rel = (repr.parent_points[i][neigh] - repr.seeds[i][idx][:, None, :]).astype(dtype)
    joined = T.concat([gathered, T.tensor(rel)], axis=-1)
    flat = T.reshape(joined, (n * k, joined.shape[-1]))
    h = _mlp2(params, f"merge{scale}", flat)
    ids = np.repeat(np.arange(n), k)
    return T.segment_max(h, ids, n)


def _all_visible(repr):
    return MaskAssignment(visible=[np.ones(s.shape[0], dtype=bool) for s in repr.seeds])


def encode(params, config, points, rng=None, mask_ratio=None):
    """Full encoder pass.

    Returns (tokens, repr, assignment): tokens[i] is the visible token set
    of scale i+1, rows ordered by ascending seed position. mask_ratio
    overrides the config value (0 disables masking and needs no rng).
    """
    config.validate()
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractError(f"points must be (N, 3), got {pts.shape}")
    if pts.shape[0] < config.num_points:
        raise ContractError(f"expected >= {config.num_points} points, got {pts.shape[0]}")
    repr = build_scales(pts, list(config.counts), list(config.ks))
    ratio = config.mask_ratio if mask_ratio is None else ratio_check(mask_ratio)
    if ratio == 0.0:
        assignment = _all_visible(repr)
    else:
        if rng is None:
            raise ContractError("masking requires an rng")
        if config.multi_scale_mask:
            vis_s = sample_visible(config.counts[-1], ratio, rng)
            assignment = back_project(repr, vis_s)
        else:
            assignment = independent_masks(repr, ratio, rng)
    feats = embed_tokens(params, config, repr, assignment)
    dtype = feats.dtype
    plan = config.encoder_block_plan()
    tokens = []
    for i in range(config.num_scales):
        if plan[i]:
            coords = repr.seeds[i][assignment.visible[i]]
            if config.local_attention:
                allow = radius_mask(coords, config.radii[i])
            else:
                allow = np.ones((coords.shape[0], coords.shape[0]), dtype=bool)
            pos = _pos_encoding(params, f"enc{i + 1}.pos", coords, dtype)
            for b in range(plan[i]):
                feats = encoder_block(params, f"enc{i + 1}.blk{b + 1}", feats, pos, allow, config.heads)
        tokens.append(feats)
        if i < config.num_scales - 1:
            feats = merge_tokens(params, config, repr, assignment, i + 2, feats)
    return tokens, repr, assignment


def ratio_check(r):
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"mask_ratio must lie in [0, 1], got {r}")
    return r


def _scatter_rows(vis_rows, masked_rows, vis_idx, masked_idx, n):
    """Interleave visible and masked row blocks back into seed order."""
    stacked = T.concat([vis_rows, masked_rows], axis=0)
    pos = np.empty(n, dtype=np.int64)
    pos[vis_idx] = np.arange(vis_idx.size)
    pos[masked_idx] = vis_idx.size + np.arange(masked_idx.size)
    return T.gather(stacked, pos)


def decode(params, config, tokens, repr, assignment):
    """Decoder pass; returns the full second-scale token set (N_2, C_2).

    Stage 1 runs on all coarsest positions (visible tokens plus the shared
    mask token); every later stage first interpolates all tokens onto the
    next finer scale, changes channels with a linear layer, and fuses
    visible rows with their encoder tokens.
    """
    S = config.num_scales
    dtype = tokens[-1].dtype
    vis = assignment.visible[-1]
    vis_idx = np.flatnonzero(vis)
    masked_idx = np.flatnonzero(~vis)
    mtok = T.add(T.tensor(np.zeros((masked_idx.size, config.dims[-1]), dtype=dtype)),
                 params["mask_token"])
    feats = _scatter_rows(tokens[-1], mtok, vis_idx, masked_idx, vis.shape[0])
    plan = config.decoder_block_plan()
    for j in range(1, S):
        scale_idx = S - j
        if j > 1:
            fine, coarse = repr.seeds[scale_idx], repr.seeds[scale_idx + 1]
            feats = interpolate(feats, fine, coarse, k=3)
            feats = _lin(params, f"prop{j - 1}", feats)
            if config.skip_connections:
                vis_here = assignment.visible[scale_idx]
                vi = np.flatnonzero(vis_here)
                mi = np.flatnonzero(~vis_here)
                fused = _lin(params, f"skip{j}",
                             T.concat([T.gather(feats, vi), tokens[scale_idx]], axis=-1))
                if mi.size:
                    feats = _scatter_rows(fused, T.gather(feats, mi), vi, mi, vis_here.shape[0])
                else:
                    feats = fused
        if plan[j - 1]:
            coords = repr.seeds[scale_idx]
            n = coords.shape[0]
            allow = np.ones((n, n), dtype=bool)
            pos = _pos_encoding(params, f"dec{j}.pos", coords, dtype)
            for b in range(plan[j - 1]):
                feats = encoder_block(params, f"dec{j}.blk{b + 1}", feats, pos, allow, config.heads)
    return feats


def reconstruct(params, config, dec_feats, repr, assignment):
    """Predict masked second-scale neighborhoods; per-token Chamfer loss.

    Each masked token's linear head output is k_2 offsets relative to its
    seed; ground truth is the seed's recorded finest-neighbor coordinates,
    equally re-centered. Returns (predictions (M, k_2, 3), scalar loss).
    """
    vis2 = assignment.visible[1]
    masked_idx = np.flatnonzero(~vis2)
    if masked_idx.size == 0:
        raise ContractError("no masked second-scale token to reconstruct")
    k2 = config.ks[1]
    rows = T.gather(dec_feats, masked_idx)
    flat = _lin(params, "recon", rows)
    pred = T.reshape(flat, (masked_idx.size, k2, 3))
    gt = repr.parent_points[1][repr.neighbor_index[1][masked_idx]] \
        - repr.seeds[1][masked_idx][:, None, :]
    per_token = chamfer_sets(pred, gt.astype(dec_feats.dtype))
    loss = T.mul(T.reduce_sum(per_token), 1.0 / masked_idx.size)
    return pred, loss


def forward_pretrain(params, config, points, rng):
    """encode -> decode -> reconstruct; returns the scalar Chamfer loss."""
    tokens, repr, assignment = encode(params, config, points, rng=rng)
    dec = decode(params, config, tokens, repr, assignment)
    _, loss = reconstruct(params, config, dec, repr, assignment)
    return loss


def extract_global_feature(params, config, points):
    """Unmasked encoder pass pooled to one vector: max-pool + mean-pool, summed."""
    tokens, _, _ = encode(params, config, points, mask_ratio=0.0)
    top = tokens[-1]
    n = top.shape[0]
    ids = np.zeros(n, dtype=np.int64)
    pooled = T.add(T.segment_max(top, ids, 1), T.segment_mean(top, ids, 1))
    return T.reshape(pooled, (top.shape[-1],))


class Model:
    """Bundle of config + parameters with the common entry points."""

    def __init__(self, config, params):
        self.config = config.validate()
        self.params = params

    @classmethod
    def init(cls, config, seed, dtype=np.float32):
        return cls(config, init_params(config, seed, dtype=dtype))

    def forward_pretrain(self, points, rng):
        return forward_pretrain(self.params, self.config, points, rng)

    def global_feature(self, points):
        return extract_global_feature(self.params, self.config, points)

    def parameters(self):
        return self.params

    def param_vector(self):
        """Flat copy of all parameters in creation order (debug/test aid)."""
        return np.concatenate([self.params[n].data.reshape(-1) for n in param_shapes(self.config)])
