"""Forward scoring and loss machinery for the disentangled multimodal model.

An item is scored for a user by splitting every embedding into K factor
chunks, scoring each (factor, modality) pair as softplus of the chunk dot
product, weighting modalities per factor with a small shared attention
network, and summing everything. Training couples a pairwise ranking loss
with an L2 penalty and a distance-correlation term that pushes the factor
chunks of each modality toward independence.

All gradients are derived by hand and verified against central finite
differences; computation runs in float64 regardless of the parameter
storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from dmrl import numerics
from dmrl.numerics import (
    EPS_DEN,
    dcov2,
    double_center,
    leaky_relu,
    leaky_relu_grad,
    pairwise_distance_matrix,
    sigmoid,
    softmax,
    softplus,
    xavier_init,
)

# Modality slot order everywhere: item ID, text, visual.
MODALITY_LABELS = ("I", "T", "V")
ATTENTION_MODES = ("full", "no_attention", "no_user")


@dataclass
class ModelConfig:
    """Shapes, regularizer weights, and ablation switches.

    `embed_dim` must be divisible by `num_factors`; hidden widths left as
    None are resolved here (refinement: rounded geometric mean of input and
    output dims; attention: one chunk).
    """

    embed_dim: int = 128
    num_factors: int = 4
    text_input_dim: int = 0
    visual_input_dim: int = 0
    text_hidden_dim: Optional[int] = None
    visual_hidden_dim: Optional[int] = None
    attention_hidden_dim: Optional[int] = None
    lambda_theta: float = 1e-5
    lambda_d: float = 1e-2
    use_text: bool = True
    use_visual: bool = True
    attention_mode: str = "full"

    def __post_init__(self):
        if self.num_factors < 1:
            raise ValueError("num_factors must be >= 1")
        if self.embed_dim < 1 or self.embed_dim % self.num_factors != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be a positive multiple of num_factors {self.num_factors}")
        if self.lambda_theta < 0 or self.lambda_d < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        for flag, dim_name in (("use_text", "text_input_dim"), ("use_visual", "visual_input_dim")):
            if getattr(self, flag) and getattr(self, dim_name) <= 0:
                raise ValueError(f"{dim_name} must be set when {flag} is enabled")
        if self.use_text and self.text_hidden_dim is None:
            self.text_hidden_dim = max(1, round(np.sqrt(self.text_input_dim * self.embed_dim)))
        if self.use_visual and self.visual_hidden_dim is None:
            self.visual_hidden_dim = max(1, round(np.sqrt(self.visual_input_dim * self.embed_dim)))
        if self.attention_hidden_dim is None:
            self.attention_hidden_dim = self.chunk_size

    @property
    def chunk_size(self) -> int:
        return self.embed_dim // self.num_factors

    @property
    def active_modalities(self) -> np.ndarray:
        """Boolean mask over (item ID, text, visual); item ID is always on."""
        return np.array([True, self.use_text, self.use_visual])

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class ModelParams:
    """All trainable tensors, keyed by name, in a fixed construction order.

    Tensors are stored in `dtype` (float32 by default, which the checkpoint
    format round-trips bit-exactly); every computation gathers slices and
    upcasts to float64.
    """

    def __init__(self, config: ModelConfig, num_users: int, num_items: int,
                 seed: int = 0, dtype=np.float32):
        if num_users < 1 or num_items < 1:
            raise ValueError("need at least one user and one item")
        self.config = config
        self.num_users = num_users
        self.num_items = num_items
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(np.random.SeedSequence([0x_D31, seed]))
        d, c = config.embed_dim, config.chunk_size

        def add(name, shape, kind="xavier"):
            if kind == "xavier":
                value = xavier_init(shape, rng)
            else:
                value = np.zeros(shape)
            self.tensors[name] = value.astype(self.dtype)

        add("user_embed", (num_users, d))
        add("item_embed", (num_items, d))
        if config.use_text:
            add("text_w1", (config.text_hidden_dim, config.text_input_dim))
            add("text_b1", (config.text_hidden_dim,), kind="zeros")
            add("text_w0", (d, config.text_hidden_dim))
            add("text_b0", (d,), kind="zeros")
        if config.use_visual:
            add("visual_w1", (config.visual_hidden_dim, config.visual_input_dim))
            add("visual_b1", (config.visual_hidden_dim,), kind="zeros")
            add("visual_w0", (d, config.visual_hidden_dim))
            add("visual_b0", (d,), kind="zeros")
        if config.attention_mode != "no_attention":
            add("attn_w", (config.attention_hidden_dim, 4 * c))
            add("attn_b", (config.attention_hidden_dim,), kind="zeros")
            add("attn_proj", (3, config.attention_hidden_dim))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.tensors:
            raise KeyError(name)
        if value.shape != self.tensors[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        self.tensors[name] = value.astype(self.dtype)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def get64(self, name: str) -> np.ndarray:
        return self.tensors[name].astype(np.float64)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros(t.shape, dtype=np.float64) for name, t in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        dup = object.__new__(ModelParams)
        dup.config = self.config
        dup.num_users = self.num_users
        dup.num_items = self.num_items
        dup.dtype = self.dtype
        dup.tensors = {name: t.copy() for name, t in self.tensors.items()}
        return dup


@dataclass
class ScoreBreakdown:
    """Per-factor, per-modality attention weights and preference scores."""

    attention: np.ndarray        # (K, 3), inactive modalities zeroed
    partial_scores: np.ndarray   # (K, 3)
    factor_scores: np.ndarray    # (K,)
    total: float


def chunk(vector: np.ndarray, k: int, num_factors: int) -> np.ndarray:
    """The k-th factor chunk (1-based k) of an embedding vector, as a view."""
    vector = np.asarray(vector)
    d = vector.shape[-1]
    if d % num_factors != 0:
        raise ValueError(f"dimension {d} not divisible by {num_factors} factors")
    if not 1 <= k <= num_factors:
        raise ValueError(f"factor index {k} out of range 1..{num_factors}")
    size = d // num_factors
    return vector[..., (k - 1) * size: k * size]


# ---------------------------------------------------------------------------
# Refinement networks
# ---------------------------------------------------------------------------

def refine_forward(feats, w1, b1, w0, b0):
    """Two-layer LeakyReLU refinement; returns output and backward cache."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[-1] != w1.shape[1]:
        raise ValueError(f"feature dim {feats.shape[-1]} does not match weight dim {w1.shape[1]}")
    z1 = feats @ w1.T + b1
    h1 = leaky_relu(z1)
    z0 = h1 @ w0.T + b0
    return leaky_relu(z0), (feats, z1, h1, z0)


def refine_backward(g_out, cache, w0):
    feats, z1, h1, z0 = cache
    g_z0 = g_out * leaky_relu_grad(z0)
    g_w0 = g_z0.T @ h1
    g_b0 = g_z0.sum(axis=0)
    g_z1 = (g_z0 @ w0) * leaky_relu_grad(z1)
    g_w1 = g_z1.T @ feats
    g_b1 = g_z1.sum(axis=0)
    return {"w1": g_w1, "b1": g_b1, "w0": g_w0, "b0": g_b0}


def refine_features(feature_vec, params: ModelParams, modality: str) -> np.ndarray:
    """Refine one raw modality feature vector into a d-dim embedding."""
    if modality not in ("text", "visual"):
        raise ValueError(f"modality must be 'text' or 'visual', got {modality!r}")
    out, _ = refine_forward(np.atleast_2d(feature_vec),
                            params.get64(f"{modality}_w1"), params.get64(f"{modality}_b1"),
                            params.get64(f"{modality}_w0"), params.get64(f"{modality}_b0"))
    return out[0]


# ---------------------------------------------------------------------------
# Pair scoring (vectorized over a batch of (user, item) pairs)
# ---------------------------------------------------------------------------

def attention_weights(params: ModelParams, p_u_chunk, q_i_chunk, q_t_chunk, q_v_chunk) -> np.ndarray:
    """Modality attention for one factor; returns a length-3 weight vector.

    Inactive modalities get weight 0 in full/no_user mode and weight 1 in
    no_attention mode (the unweighted ablation). In no_user mode the user
    chunk is replaced by zeros so weights depend only on the item.
    """
    config = params.config
    c = config.chunk_size
    chunks = []
    for name, vec in (("user", p_u_chunk), ("item", q_i_chunk), ("text", q_t_chunk), ("visual", q_v_chunk)):
        vec = np.zeros(c) if vec is None else np.asarray(vec, dtype=np.float64)
        if vec.shape != (c,):
            raise ValueError(f"{name} chunk has shape {vec.shape}, expected ({c},)")
        chunks.append(vec)
    mask = config.active_modalities
    if config.attention_mode == "no_attention":
        return mask.astype(np.float64)
    if config.attention_mode == "no_user":
        chunks[0] = np.zeros(c)
    z = np.concatenate(chunks)
    h = np.tanh(params.get64("attn_w") @ z + params.get64("attn_b"))
    logits = params.get64("attn_proj") @ h
    weights = np.zeros(3)
    weights[mask] = softmax(logits[mask])
    return weights


def modality_factor_score(p_chunk, q_chunk, a: float) -> float:
    """Attention-weighted positive affinity: a * softplus(<p_chunk, q_chunk>)."""
    p_chunk = np.asarray(p_chunk, dtype=np.float64)
    q_chunk = np.asarray(q_chunk, dtype=np.float64)
    return float(a) * float(softplus(float(p_chunk @ q_chunk)))


class _PairCache:
    """Intermediates of score_pairs needed by the backward pass."""

    __slots__ = ("pu", "qi", "qt", "qv", "zin", "hact", "attn", "dots", "sp", "partial")


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    shifted = logits - logits[..., mask].max(axis=-1, keepdims=True)
    e = np.exp(shifted) * mask
    return e / e.sum(axis=-1, keepdims=True)


def score_pairs(params: ModelParams, pu, qi, qt, qv):
    """Score B (user, item) pairs given gathered d-dim embeddings.

    `qt`/`qv` are refined modality embeddings (None when disabled). Returns
    (scores, cache) with scores of shape (B,).
    """
    config = params.config
    B = pu.shape[0]
    K, c = config.num_factors, config.chunk_size
    mask = config.active_modalities
    cache = _PairCache()
    cache.pu = pu.reshape(B, K, c)
    cache.qi = qi.reshape(B, K, c)
    cache.qt = qt.reshape(B, K, c) if qt is not None else None
    cache.qv = qv.reshape(B, K, c) if qv is not None else None

    if config.attention_mode == "no_attention":
        cache.zin = None
        cache.hact = None
        attn = np.broadcast_to(mask.astype(np.float64), (B, K, 3))
    else:
        user_slot = np.zeros_like(cache.pu) if config.attention_mode == "no_user" else cache.pu
        zeros = np.zeros_like(cache.pu)
        zin = np.concatenate([
            user_slot,
            cache.qi,
            cache.qt if cache.qt is not None else zeros,
            cache.qv if cache.qv is not None else zeros,
        ], axis=2)                                             # (B, K, 4c)
        hpre = zin.reshape(B * K, 4 * c) @ params.get64("attn_w").T + params.get64("attn_b")
        hact = np.tanh(hpre).reshape(B, K, -1)
        logits = hact.reshape(B * K, -1) @ params.get64("attn_proj").T
        attn = _masked_softmax(logits.reshape(B, K, 3), mask)
        cache.zin = zin
        cache.hact = hact
    cache.attn = attn

    dots = np.zeros((B, K, 3))
    dots[:, :, 0] = np.einsum("bkc,bkc->bk", cache.pu, cache.qi)
    if cache.qt is not None:
        dots[:, :, 1] = np.einsum("bkc,bkc->bk", cache.pu, cache.qt)
    if cache.qv is not None:
        dots[:, :, 2] = np.einsum("bkc,bkc->bk", cache.pu, cache.qv)
    cache.dots = dots
    cache.sp = softplus(dots)
    cache.partial = attn * cache.sp * mask
    scores = cache.partial.sum(axis=(1, 2))
    return scores, cache


def score_pairs_backward(params: ModelParams, cache: _PairCache, g_scores):
    """Backpropagate d(loss)/d(score) through score_pairs.

    Returns (g_pu, g_qi, g_qt, g_qv) as (B, d) arrays (None when the
    modality is off) plus a dict of attention parameter gradients.
    """
    config = params.config
    B, K, c = cache.pu.shape
    mask = config.active_modalities
    g_partial = g_scores[:, None, None] * mask[None, None, :].astype(np.float64)

    g_attn = g_partial * cache.sp
    g_dots = g_partial * cache.attn * sigmoid(cache.dots)

    g_pu = g_dots[:, :, 0, None] * cache.qi
    g_qi = g_dots[:, :, 0, None] * cache.pu
    g_qt = g_dots[:, :, 1, None] * cache.pu if cache.qt is not None else None
    g_qv = g_dots[:, :, 2, None] * cache.pu if cache.qv is not None else None
    if cache.qt is not None:
        g_pu += g_dots[:, :, 1, None] * cache.qt
    if cache.qv is not None:
        g_pu += g_dots[:, :, 2, None] * cache.qv

    param_grads: dict[str, np.ndarray] = {}
    if config.attention_mode != "no_attention":
        # softmax backward; inactive entries carry attn = 0 hence zero grad
        inner = (cache.attn * g_attn).sum(axis=-1, keepdims=True)
        g_logits = cache.attn * (g_attn - inner)
        flat_logits = g_logits.reshape(B * K, 3)
        flat_hact = cache.hact.reshape(B * K, -1)
        param_grads["attn_proj"] = flat_logits.T @ flat_hact
        g_hact = flat_logits @ params.get64("attn_proj")
        g_hpre = g_hact * (1.0 - flat_hact * flat_hact)
        flat_zin = cache.zin.reshape(B * K, 4 * c)
        param_grads["attn_w"] = g_hpre.T @ flat_zin
        param_grads["attn_b"] = g_hpre.sum(axis=0)
        g_zin = (g_hpre @ params.get64("attn_w")).reshape(B, K, 4 * c)
        if config.attention_mode != "no_user":
            g_pu += g_zin[:, :, 0:c]
        g_qi += g_zin[:, :, c:2 * c]
        if cache.qt is not None:
            g_qt += g_zin[:, :, 2 * c:3 * c]
        if cache.qv is not None:
            g_qv += g_zin[:, :, 3 * c:4 * c]

    d = K * c
    return (g_pu.reshape(B, d), g_qi.reshape(B, d),
            g_qt.reshape(B, d) if g_qt is not None else None,
            g_qv.reshape(B, d) if g_qv is not None else None,
            param_grads)


def predict(params: ModelParams, user: int, item: int,
            text_features=None, visual_features=None) -> ScoreBreakdown:
    """Score one (user, item) pair and expose the full factor breakdown.

    `text_features`/`visual_features` are the raw per-item feature matrices
    (full tables); refined embeddings are computed on the fly.
    """
    config = params.config
    if not 0 <= user < params.num_users:
        raise ValueError(f"user index {user} out of range")
    if not 0 <= item < params.num_items:
        raise ValueError(f"item index {item} out of range")
    pu = params.get64("user_embed")[user][None, :]
    qi = params.get64("item_embed")[item][None, :]
    qt = qv = None
    if config.use_text:
        qt = refine_features(np.asarray(text_features)[item], params, "text")[None, :]
    if config.use_visual:
        qv = refine_features(np.asarray(visual_features)[item], params, "visual")[None, :]
    _, cache = score_pairs(params, pu, qi, qt, qv)
    partial = cache.partial[0]
    return ScoreBreakdown(attention=cache.attn[0] * config.active_modalities,
                          partial_scores=partial,
                          factor_scores=partial.sum(axis=1),
                          total=float(partial.sum()))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bpr_loss(r_pos, r_neg):
    """Pairwise ranking loss -ln sigmoid(r_pos - r_neg), overflow-safe."""
    return softplus(-(np.asarray(r_pos, dtype=np.float64) - np.asarray(r_neg, dtype=np.float64)))


def _chunk_dcor_sum(x: np.ndarray, num_factors: int, want_grad: bool):
    """Sum of dcor over all factor-chunk pairs of one sample matrix.

    `x` is (n, d); chunks are the K contiguous column blocks. Distance
    matrices are computed once per chunk and shared across pairs, and the
    distance-gradient (linear in its upstream) is applied once per chunk
    after accumulating over pairs. Returns (value, grad); grad is None
    unless requested.
    """
    n, d = x.shape
    if n < 2 or num_factors < 2:
        return 0.0, (np.zeros_like(x) if want_grad else None)
    c = d // num_factors
    chunks = [np.ascontiguousarray(x[:, k * c:(k + 1) * c]) for k in range(num_factors)]
    dist = [pairwise_distance_matrix(ch) for ch in chunks]
    centered = [double_center(dm) for dm in dist]
    flat = [a.ravel() for a in centered]
    variances = [max(0.0, float(f @ f)) / (n * n) for f in flat]
    total = 0.0
    # upstream of each chunk's distance matrix is a weighted sum of the K
    # centered matrices; gather the weights and apply them in one GEMM
    coeff = np.zeros((num_factors, num_factors))
    for k in range(num_factors):
        for k2 in range(k + 1, num_factors):
            den = np.sqrt(np.sqrt(variances[k]) * np.sqrt(variances[k2]))
            if den < EPS_DEN:
                continue
            v_xy = max(0.0, float(flat[k] @ flat[k2])) / (n * n)
            value = float(np.sqrt(v_xy) / den)
            total += value
            if not want_grad:
                continue
            g_vxy = 0.5 / (np.sqrt(v_xy) * den) if v_xy > 0.0 else 0.0
            coeff[k, k2] += g_vxy
            coeff[k2, k] += g_vxy
            coeff[k, k] -= 0.5 * value / variances[k]
            coeff[k2, k2] -= 0.5 * value / variances[k2]
    if not want_grad:
        return total, None
    coeff /= n * n
    g_dist = (coeff @ np.stack(flat)).reshape(num_factors, n, n)
    grad = np.zeros_like(x)
    for k in range(num_factors):
        grad[:, k * c:(k + 1) * c] = numerics._distance_grad(g_dist[k], dist[k], chunks[k])
    return total, grad


def _disentangle_from_gathered(num_factors: int, sample_groups: dict[str, np.ndarray],
                               want_grad: bool):
    """Chunk-pair dcor summed over sample groups (already gathered matrices)."""
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, matrix in sample_groups.items():
        value, grad = _chunk_dcor_sum(matrix, num_factors, want_grad)
        total += value
        if want_grad:
            grads[name] = grad
    return total, grads


def disentangle_loss(params: ModelParams, users, items,
                     text_features=None, visual_features=None) -> float:
    """Factor-independence penalty over the batch's distinct users and items.

    Sums chunk-pair distance correlations over four sample groups: user
    embeddings, item embeddings, refined text, refined visual (equal
    weights). Groups with fewer than 2 distinct entities contribute 0.
    """
    config = params.config
    users = np.unique(np.asarray(users, dtype=np.int64))
    items = np.unique(np.asarray(items, dtype=np.int64))
    groups = {
        "user": params.get64("user_embed")[users],
        "item": params.get64("item_embed")[items],
    }
    for modality, feats in (("text", text_features), ("visual", visual_features)):
        if not getattr(config, f"use_{modality}"):
            continue
        groups[modality], _ = refine_forward(
            np.asarray(feats)[items],
            params.get64(f"{modality}_w1"), params.get64(f"{modality}_b1"),
            params.get64(f"{modality}_w0"), params.get64(f"{modality}_b0"))
    value, _ = _disentangle_from_gathered(config.num_factors, groups, want_grad=False)
    return value


@dataclass
class LossTerms:
    total: float
    bpr: float
    l2: float
    disentangle: float

    def as_tuple(self):
        return self.total, self.bpr, self.l2, self.disentangle


def total_loss(params: ModelParams, users, pos_items, neg_items,
               text_features=None, visual_features=None,
               want_grads: bool = True):
    """Mean pairwise ranking loss + lambda_theta * L2 + lambda_d * L_d.

    Returns (LossTerms, grads) where grads maps every parameter tensor name
    to a float64 gradient array (empty dict when want_grads=False). L2
    covers the embedding rows touched by the batch (each distinct row once)
    plus every network weight. Raises RuntimeError naming the offending
    term if any loss component is non-finite.
    """
    config = params.config
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    if not (users.shape == pos_items.shape == neg_items.shape) or users.ndim != 1:
        raise ValueError("users, pos_items, neg_items must be equal-length 1-D arrays")
    B = users.shape[0]
    if B < 1:
        raise ValueError("empty batch")

    unique_items, inverse = np.unique(np.concatenate([pos_items, neg_items]), return_inverse=True)
    inv_pos, inv_neg = inverse[:B], inverse[B:]
    unique_users = np.unique(users)

    # refinement forward on the batch's distinct items
    refined: dict[str, np.ndarray] = {}
    refine_caches: dict[str, tuple] = {}
    for modality, feats in (("text", text_features), ("visual", visual_features)):
        if not getattr(config, f"use_{modality}"):
            continue
        if feats is None:
            raise ValueError(f"{modality} features required when use_{modality} is enabled")
        out, cache = refine_forward(np.asarray(feats)[unique_items],
                                    params.get64(f"{modality}_w1"), params.get64(f"{modality}_b1"),
                                    params.get64(f"{modality}_w0"), params.get64(f"{modality}_b0"))
        refined[modality] = out
        refine_caches[modality] = cache

    pu = params.get64("user_embed")[users]
    q_table = params.get64("item_embed")
    qt_u = refined.get("text")
    qv_u = refined.get("visual")

    r = {}
    caches = {}
    for side, items, inv in (("pos", pos_items, inv_pos), ("neg", neg_items, inv_neg)):
        r[side], caches[side] = score_pairs(
            params, pu, q_table[items],
            qt_u[inv] if qt_u is not None else None,
            qv_u[inv] if qv_u is not None else None)

    diff = r["pos"] - r["neg"]
    bpr_value = float(np.mean(softplus(-diff)))

    # L2 over touched embedding rows (distinct) and all network weights;
    # overflow here surfaces as the explicit non-finite term error below
    net_names = [n for n in params.names if n not in ("user_embed", "item_embed")]
    with np.errstate(over="ignore"):
        l2_value = float(np.sum(params.get64("user_embed")[unique_users] ** 2))
        l2_value += float(np.sum(q_table[unique_items] ** 2))
        for name in net_names:
            l2_value += float(np.sum(params.get64(name) ** 2))

    ld_groups = {"user": params.get64("user_embed")[unique_users],
                 "item": q_table[unique_items]}
    if qt_u is not None:
        ld_groups["text"] = qt_u
    if qv_u is not None:
        ld_groups["visual"] = qv_u
    ld_value, ld_grads = _disentangle_from_gathered(
        config.num_factors, ld_groups, want_grad=want_grads and config.lambda_d > 0)

    terms = LossTerms(
        total=bpr_value + config.lambda_theta * l2_value + config.lambda_d * ld_value,
        bpr=bpr_value, l2=l2_value, disentangle=ld_value)
    for term_name, term_value in (("bpr", bpr_value), ("l2", l2_value),
                                  ("disentangle", ld_value)):
        if not np.isfinite(term_value):
            raise RuntimeError(f"non-finite loss term: {term_name}")

    if not want_grads:
        return terms, {}

    grads = params.zero_grads()

    # ranking term
    g_pos = -sigmoid(-diff) / B
    g_neg = -g_pos
    g_qt_unique = np.zeros_like(qt_u) if qt_u is not None else None
    g_qv_unique = np.zeros_like(qv_u) if qv_u is not None else None
    for side, items, inv, g_side in (("pos", pos_items, inv_pos, g_pos),
                                     ("neg", neg_items, inv_neg, g_neg)):
        g_pu, g_qi, g_qt, g_qv, attn_grads = score_pairs_backward(params, caches[side], g_side)
        np.add.at(grads["user_embed"], users, g_pu)
        np.add.at(grads["item_embed"], items, g_qi)
        if g_qt is not None:
            np.add.at(g_qt_unique, inv, g_qt)
        if g_qv is not None:
            np.add.at(g_qv_unique, inv, g_qv)
        for name, g in attn_grads.items():
            grads[name] += g

    # L2 term
    lt = config.lambda_theta
    if lt > 0:
        grads["user_embed"][unique_users] += 2.0 * lt * params.get64("user_embed")[unique_users]
        grads["item_embed"][unique_items] += 2.0 * lt * q_table[unique_items]
        for name in net_names:
            grads[name] += 2.0 * lt * params.get64(name)

    # disentanglement term
    ld = config.lambda_d
    if ld > 0 and ld_grads:
        grads["user_embed"][unique_users] += ld * ld_grads["user"]
        grads["item_embed"][unique_items] += ld * ld_grads["item"]
        if g_qt_unique is not None:
            g_qt_unique += ld * ld_grads["text"]
        if g_qv_unique is not None:
            g_qv_unique += ld * ld_grads["visual"]

    # refinement backward once per modality, after all paths accumulated
    for modality, g_unique in (("text", g_qt_unique), ("visual", g_qv_unique)):
        if g_unique is None:
            continue
        net = refine_backward(g_unique, refine_caches[modality], params.get64(f"{modality}_w0"))
        for part, g in net.items():
            grads[f"{modality}_{part}"] += g

    return terms, grads
