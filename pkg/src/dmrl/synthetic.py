"""Synthetic dataset generator with planted factor structure.

Each user and item carries per-factor latent vectors in two flavors:
"intrinsic" (observable only through interactions, the ID modality's job)
and "content" (exposed through feature files). Factors are assigned to
modalities disjointly: text features are a noisy linear image of the
content blocks of text-carried factors, visual features of the rest, so
the two modalities genuinely hold different information. Every user also
gets a planted per-factor modality-preference simplex, making uniform
modality weighting provably suboptimal.

Interactions are each user's top-q items by planted score plus noise, so
the noiseless limit is exactly the top-q planted items.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

FACTOR_LATENT_DIM = 8
MODALITY_PREF_ALPHA = 0.3     # Dirichlet concentration; < 1 = opinionated users


@dataclass
class SynthConfig:
    num_users: int = 200
    num_items: int = 500
    num_factors: int = 4       # planted K
    interactions_per_user: int = 20
    text_dim: int = 32
    visual_dim: int = 32
    noise_std: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.interactions_per_user < 5:
            raise ValueError("interactions_per_user must be >= 5 to survive 5-core filtering")
        if self.num_factors < 1:
            raise ValueError("num_factors must be >= 1")
        if self.interactions_per_user > self.num_items:
            raise ValueError("cannot draw more interactions than there are items")
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("need at least one user and one item")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class GroundTruth:
    user_intrinsic: np.ndarray     # (U, K, L)
    user_content: np.ndarray       # (U, K, L)
    modality_pref: np.ndarray      # (U, K, 3) simplex over (id, text, visual)
    item_intrinsic: np.ndarray     # (I, K, L)
    item_content: np.ndarray       # (I, K, L)
    factor_modality: np.ndarray    # (K,) 1 = text-carried, 2 = visual-carried
    scores: np.ndarray             # (U, I) planted scores
    interactions: np.ndarray       # (U, q) chosen item indices


def planted_scores(gt: GroundTruth) -> np.ndarray:
    """Score matrix implied by the latents; regeneratable for oracle checks."""
    intrinsic = np.einsum("ukl,ikl->uik", gt.user_intrinsic, gt.item_intrinsic)
    content = np.einsum("ukl,ikl->uik", gt.user_content, gt.item_content)
    id_w = gt.modality_pref[:, None, :, 0]
    carrier_w = np.take_along_axis(
        gt.modality_pref, gt.factor_modality[None, :, None], axis=2)[:, None, :, 0]
    return (id_w * intrinsic + carrier_w * content).sum(axis=2)


def generate(config: SynthConfig, out_dir) -> GroundTruth:
    """Write interactions.tsv, text_features.tsv, visual_features.tsv and
    ground_truth.tsv into `out_dir`; returns the planted latents."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([0x5F9, config.seed]))
    U, I, K, L = config.num_users, config.num_items, config.num_factors, FACTOR_LATENT_DIM

    user_intrinsic = rng.normal(size=(U, K, L))
    user_content = rng.normal(size=(U, K, L))
    modality_pref = rng.dirichlet([MODALITY_PREF_ALPHA] * 3, size=(U, K))
    item_intrinsic = rng.normal(size=(I, K, L))
    item_content = rng.normal(size=(I, K, L))
    # alternate carrier assignment: even factors -> text, odd -> visual
    factor_modality = np.array([1 if k % 2 == 0 else 2 for k in range(K)], dtype=np.int64)

    gt = GroundTruth(user_intrinsic=user_intrinsic, user_content=user_content,
                     modality_pref=modality_pref, item_intrinsic=item_intrinsic,
                     item_content=item_content, factor_modality=factor_modality,
                     scores=np.zeros((U, I)), interactions=np.zeros((U, 0), dtype=np.int64))
    gt.scores = planted_scores(gt)

    noisy = gt.scores + config.noise_std * rng.normal(size=(U, I))
    top_q = np.argsort(-noisy, axis=1, kind="stable")[:, :config.interactions_per_user]
    gt.interactions = np.sort(top_q, axis=1)

    with (out_dir / "interactions.tsv").open("w", encoding="utf-8") as fh:
        for u in range(U):
            for i in gt.interactions[u]:
                fh.write(f"user{u:04d}\titem{i:04d}\n")

    text_factors = np.flatnonzero(factor_modality == 1)
    visual_factors = np.flatnonzero(factor_modality == 2)
    for name, dim, factor_set in (("text", config.text_dim, text_factors),
                                  ("visual", config.visual_dim, visual_factors)):
        if factor_set.size == 0:
            blocks = np.zeros((I, 1))
        else:
            blocks = item_content[:, factor_set, :].reshape(I, -1)
        proj = rng.normal(scale=1.0 / np.sqrt(max(1, blocks.shape[1])),
                          size=(dim, blocks.shape[1]))
        feats = blocks @ proj.T + config.noise_std * rng.normal(size=(I, dim))
        with (out_dir / f"{name}_features.tsv").open("w", encoding="utf-8") as fh:
            for i in range(I):
                values = ",".join(f"{v:.8g}" for v in feats[i])
                fh.write(f"item{i:04d}\t{values}\n")

    _write_ground_truth(gt, config, out_dir / "ground_truth.tsv")
    return gt


def _write_ground_truth(gt: GroundTruth, config: SynthConfig, path: Path) -> None:
    def fmt(values) -> str:
        return ",".join(f"{v:.8g}" for v in np.asarray(values).ravel())

    with path.open("w", encoding="utf-8") as fh:
        fh.write("entity\tkey\tfield\tfactor\tvalues\n")
        fh.write(f"meta\t-\tfactor_modality\t-\t{fmt(gt.factor_modality)}\n")
        for u in range(config.num_users):
            key = f"user{u:04d}"
            for k in range(config.num_factors):
                fh.write(f"user\t{key}\tintrinsic\t{k + 1}\t{fmt(gt.user_intrinsic[u, k])}\n")
                fh.write(f"user\t{key}\tcontent\t{k + 1}\t{fmt(gt.user_content[u, k])}\n")
                fh.write(f"user\t{key}\tmodality_pref\t{k + 1}\t{fmt(gt.modality_pref[u, k])}\n")
        for i in range(config.num_items):
            key = f"item{i:04d}"
            for k in range(config.num_factors):
                fh.write(f"item\t{key}\tintrinsic\t{k + 1}\t{fmt(gt.item_intrinsic[i, k])}\n")
                fh.write(f"item\t{key}\tcontent\t{k + 1}\t{fmt(gt.item_content[i, k])}\n")
