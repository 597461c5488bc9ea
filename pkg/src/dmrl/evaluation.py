"""Full-catalog ranking, Recall@K / NDCG@K, and breakdown exports.

Evaluation is read-only over the model parameters: item-side quantities
(refined modality embeddings and the item part of the attention input) are
precomputed once, then every user is scored against the whole catalog.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dmrl.data import InteractionDataset
from dmrl.model import MODALITY_LABELS, ModelParams, predict, refine_forward
from dmrl.numerics import softplus

_LOG2 = np.log(2.0)


class ItemScoreCache:
    """Per-item tensors shared across users during catalog scoring."""

    def __init__(self, params: ModelParams, text_features=None, visual_features=None):
        config = params.config
        K, c = config.num_factors, config.chunk_size
        n = params.num_items
        self.params = params
        self.mask = config.active_modalities
        self.qi = params.get64("item_embed").reshape(n, K, c)
        self.qt = self.qv = None
        if config.use_text:
            refined, _ = refine_forward(np.asarray(text_features),
                                        params.get64("text_w1"), params.get64("text_b1"),
                                        params.get64("text_w0"), params.get64("text_b0"))
            self.qt = refined.reshape(n, K, c)
        if config.use_visual:
            refined, _ = refine_forward(np.asarray(visual_features),
                                        params.get64("visual_w1"), params.get64("visual_b1"),
                                        params.get64("visual_w0"), params.get64("visual_b0"))
            self.qv = refined.reshape(n, K, c)

        self.item_attn = None
        if config.attention_mode != "no_attention":
            w = params.get64("attn_w")
            self.w_user = w[:, 0:c]
            pre = np.einsum("nkc,hc->nkh", self.qi, w[:, c:2 * c])
            if self.qt is not None:
                pre += np.einsum("nkc,hc->nkh", self.qt, w[:, 2 * c:3 * c])
            if self.qv is not None:
                pre += np.einsum("nkc,hc->nkh", self.qv, w[:, 3 * c:4 * c])
            pre += params.get64("attn_b")
            self.item_attn = pre                      # (n, K, hidden)
            self.proj = params.get64("attn_proj")


def score_all_items(cache: ItemScoreCache, user: int) -> np.ndarray:
    """Scores of every catalog item for one user, shape (num_items,)."""
    params = cache.params
    config = params.config
    K, c = config.num_factors, config.chunk_size
    puk = params.get64("user_embed")[user].reshape(K, c)

    dots = np.zeros((cache.qi.shape[0], K, 3))
    dots[:, :, 0] = np.einsum("nkc,kc->nk", cache.qi, puk)
    if cache.qt is not None:
        dots[:, :, 1] = np.einsum("nkc,kc->nk", cache.qt, puk)
    if cache.qv is not None:
        dots[:, :, 2] = np.einsum("nkc,kc->nk", cache.qv, puk)

    if config.attention_mode == "no_attention":
        return (softplus(dots) * cache.mask).sum(axis=(1, 2))

    if config.attention_mode == "no_user":
        hact = np.tanh(cache.item_attn)
    else:
        hact = np.tanh(cache.item_attn + (puk @ cache.w_user.T)[None, :, :])
    logits = hact @ cache.proj.T                     # (n, K, 3)
    shifted = logits - logits[:, :, cache.mask].max(axis=-1, keepdims=True)
    e = np.exp(shifted) * cache.mask
    attn = e / e.sum(axis=-1, keepdims=True)
    return (attn * softplus(dots)).sum(axis=(1, 2))


def rank_items(cache: ItemScoreCache, user: int, exclude) -> np.ndarray:
    """All non-excluded items ordered by descending score, ties by index."""
    n = cache.qi.shape[0]
    exclude = np.asarray(sorted(exclude), dtype=np.int64)
    if exclude.size >= n:
        raise ValueError(f"exclusion set covers the whole catalog for user {user}")
    eligible = np.setdiff1d(np.arange(n, dtype=np.int64), exclude, assume_unique=True)
    scores = score_all_items(cache, user)[eligible]
    order = np.argsort(-scores, kind="stable")       # stable keeps ascending index on ties
    return eligible[order]


def recall_at_k(ranked, test_positives, k: int) -> float:
    """|top-k hits| / |test positives|."""
    test_positives = set(test_positives)
    if not test_positives:
        raise ValueError("recall undefined for an empty test set")
    hits = sum(1 for item in list(ranked)[:k] if item in test_positives)
    return hits / len(test_positives)


def ndcg_at_k(ranked, test_positives, k: int) -> float:
    """Binary-relevance NDCG with 1-based ranks and log2 discounts."""
    test_positives = set(test_positives)
    if not test_positives:
        raise ValueError("ndcg undefined for an empty test set")
    dcg = 0.0
    for rank, item in enumerate(list(ranked)[:k], start=1):
        if item in test_positives:
            dcg += 1.0 / (np.log(rank + 1.0) / _LOG2)
    ideal = min(len(test_positives), k)
    idcg = sum(1.0 / (np.log(p + 1.0) / _LOG2) for p in range(1, ideal + 1))
    return dcg / idcg


@dataclass
class EvalReport:
    k: int
    recall: float
    ndcg: float
    num_evaluated_users: int
    seconds: float
    per_user: dict[str, tuple[float, float]] = field(default_factory=dict)


def evaluate(dataset: InteractionDataset, params: ModelParams,
             text_features=None, visual_features=None,
             k: int = 20, split: str = "test") -> EvalReport:
    """Macro-averaged Recall@K and NDCG@K over users with >= 1 target item.

    split="test" ranks with train+val excluded against test positives;
    split="val" ranks with train excluded against val positives (used for
    early stopping without touching test data).
    """
    if split == "test":
        targets = dataset.test_positives
        exclude_of = dataset.excluded_items
    elif split == "val":
        targets = dataset.val_positives
        exclude_of = lambda u: dataset.train_positives[u]
    else:
        raise ValueError(f"unknown split {split!r}")
    start = time.perf_counter()
    cache = ItemScoreCache(params, text_features, visual_features)
    user_keys = dataset.user_keys
    per_user: dict[str, tuple[float, float]] = {}
    recalls = []
    ndcgs = []
    for user in range(dataset.num_users):
        if not targets[user]:
            continue
        ranked = rank_items(cache, user, exclude_of(user))
        r = recall_at_k(ranked, targets[user], k)
        n = ndcg_at_k(ranked, targets[user], k)
        per_user[user_keys[user]] = (r, n)
        recalls.append(r)
        ndcgs.append(n)
    if not recalls:
        raise ValueError(f"no users with {split} positives to evaluate")
    return EvalReport(k=k, recall=float(np.mean(recalls)), ndcg=float(np.mean(ndcgs)),
                      num_evaluated_users=len(recalls),
                      seconds=time.perf_counter() - start, per_user=per_user)


def write_report(report: EvalReport, path) -> Path:
    """Write the metric summary TSV plus the per-user detail file."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("metric\tk\tvalue\n")
        fh.write(f"recall\t{report.k}\t{report.recall:.10g}\n")
        fh.write(f"ndcg\t{report.k}\t{report.ndcg:.10g}\n")
        fh.write(f"num_evaluated_users\t{report.k}\t{report.num_evaluated_users}\n")
        fh.write(f"seconds\t{report.k}\t{report.seconds:.6g}\n")
    detail = path.with_name(path.stem + ".users.tsv")
    with detail.open("w", encoding="utf-8") as fh:
        for key in sorted(report.per_user):
            r, n = report.per_user[key]
            fh.write(f"{key}\t{r:.10g}\t{n:.10g}\n")
    return detail


def export_breakdown(params: ModelParams, user: int, item: int,
                     text_features=None, visual_features=None, path=None):
    """Per (factor, modality) attention weights and raw plus per-factor
    normalized ratings; optionally written as TSV."""
    breakdown = predict(params, user, item, text_features, visual_features)
    mask = params.config.active_modalities
    factor_sums = breakdown.partial_scores.sum(axis=1, keepdims=True)
    normalized = breakdown.partial_scores / np.where(factor_sums == 0.0, 1.0, factor_sums)
    rows = []
    for k in range(params.config.num_factors):
        for m, label in enumerate(MODALITY_LABELS):
            if not mask[m]:
                continue
            rows.append((k + 1, label, breakdown.attention[k, m],
                         breakdown.partial_scores[k, m], normalized[k, m]))
    if path is not None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("factor\tmodality\tattention\trating_raw\trating_normalized\n")
            for factor, label, attn, raw, norm in rows:
                fh.write(f"{factor}\t{label}\t{attn:.10g}\t{raw:.10g}\t{norm:.10g}\n")
    return rows
