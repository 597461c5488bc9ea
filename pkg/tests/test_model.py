import math

import numpy as np
import pytest

from dmrl.model import (
    LossTerms,
    ModelConfig,
    ModelParams,
    attention_weights,
    bpr_loss,
    chunk,
    disentangle_loss,
    modality_factor_score,
    predict,
    refine_forward,
    score_pairs,
    total_loss,
)
from dmrl.numerics import dcor, finite_difference_check


# ---------------------------------------------------------------------------
# Scalar-loop oracle: an independent re-implementation of the forward pass
# using plain Python floats and explicit index loops.
# ---------------------------------------------------------------------------

def oracle_leaky_relu(x, slope=0.01):
    return x if x >= 0 else slope * x


def oracle_refine(feat, w1, b1, w0, b0):
    hidden = []
    for h in range(len(b1)):
        acc = b1[h]
        for j in range(len(feat)):
            acc += w1[h][j] * feat[j]
        hidden.append(oracle_leaky_relu(acc))
    out = []
    for o in range(len(b0)):
        acc = b0[o]
        for h in range(len(hidden)):
            acc += w0[o][h] * hidden[h]
        out.append(oracle_leaky_relu(acc))
    return out


def oracle_predict(params, user, item, text_feats, visual_feats):
    """Pure-Python forward pass; mirrors the factor/attention/score contract."""
    cfg = params.config
    K, c = cfg.num_factors, cfg.chunk_size
    pu = [float(v) for v in params.get64("user_embed")[user]]
    qi = [float(v) for v in params.get64("item_embed")[item]]
    qt = qv = None
    if cfg.use_text:
        qt = oracle_refine([float(v) for v in text_feats[item]],
                           params.get64("text_w1").tolist(), params.get64("text_b1").tolist(),
                           params.get64("text_w0").tolist(), params.get64("text_b0").tolist())
    if cfg.use_visual:
        qv = oracle_refine([float(v) for v in visual_feats[item]],
                           params.get64("visual_w1").tolist(), params.get64("visual_b1").tolist(),
                           params.get64("visual_w0").tolist(), params.get64("visual_b0").tolist())

    active = [True, cfg.use_text, cfg.use_visual]
    total = 0.0
    per_factor = []
    for k in range(K):
        lo, hi = k * c, (k + 1) * c
        puk = pu[lo:hi]
        mods = [qi[lo:hi],
                qt[lo:hi] if qt is not None else [0.0] * c,
                qv[lo:hi] if qv is not None else [0.0] * c]
        if cfg.attention_mode == "no_attention":
            weights = [1.0 if a else 0.0 for a in active]
        else:
            user_slot = [0.0] * c if cfg.attention_mode == "no_user" else puk
            z = user_slot + mods[0] + mods[1] + mods[2]
            w = params.get64("attn_w").tolist()
            b = params.get64("attn_b").tolist()
            proj = params.get64("attn_proj").tolist()
            hidden = []
            for h in range(len(b)):
                acc = b[h]
                for j in range(len(z)):
                    acc += w[h][j] * z[j]
                hidden.append(math.tanh(acc))
            logits = []
            for m in range(3):
                acc = 0.0
                for h in range(len(hidden)):
                    acc += proj[m][h] * hidden[h]
                logits.append(acc)
            mx = max(l for l, a in zip(logits, active) if a)
            exps = [math.exp(l - mx) if a else 0.0 for l, a in zip(logits, active)]
            s = sum(exps)
            weights = [e / s for e in exps]
        factor_total = 0.0
        for m in range(3):
            if not active[m]:
                continue
            dot = sum(p * q for p, q in zip(puk, mods[m]))
            factor_total += weights[m] * math.log1p(math.exp(dot)) if dot < 30 else weights[m] * (
                dot + math.log1p(math.exp(-dot)))
        per_factor.append(factor_total)
        total += factor_total
    return total, per_factor


def toy_setup(seed=0, n_users=2, n_items=3, d=8, K=2, text_dim=6, visual_dim=5,
              use_text=True, use_visual=True, attention_mode="full",
              lambda_theta=0.01, lambda_d=0.1):
    config = ModelConfig(embed_dim=d, num_factors=K,
                         text_input_dim=text_dim if use_text else 0,
                         visual_input_dim=visual_dim if use_visual else 0,
                         use_text=use_text, use_visual=use_visual,
                         attention_mode=attention_mode,
                         lambda_theta=lambda_theta, lambda_d=lambda_d)
    params = ModelParams(config, n_users, n_items, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    text = rng.normal(size=(n_items, text_dim)) if use_text else None
    visual = rng.normal(size=(n_items, visual_dim)) if use_visual else None
    return params, text, visual


class TestConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ValueError, match="multiple"):
            ModelConfig(embed_dim=10, num_factors=4, use_text=False, use_visual=False)

    def test_hidden_defaults_resolved(self):
        cfg = ModelConfig(embed_dim=8, num_factors=2, text_input_dim=10,
                          visual_input_dim=20, use_text=True, use_visual=True)
        assert cfg.text_hidden_dim == round(math.sqrt(80))
        assert cfg.visual_hidden_dim == round(math.sqrt(160))
        assert cfg.attention_hidden_dim == 4

    def test_round_trip_dict(self):
        cfg = ModelConfig(embed_dim=16, num_factors=4, text_input_dim=5,
                          visual_input_dim=6)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"embed_dim": 8, "bogus": 1})

    def test_modality_dim_required(self):
        with pytest.raises(ValueError, match="text_input_dim"):
            ModelConfig(embed_dim=8, num_factors=2, use_text=True, use_visual=False)


class TestChunk:
    def test_second_chunk_of_128(self):
        v = np.arange(128.0)
        out = chunk(v, 2, 4)
        assert np.array_equal(out, np.arange(32.0, 64.0))

    def test_single_factor_identity(self):
        v = np.arange(16.0)
        assert np.array_equal(chunk(v, 1, 1), v)

    def test_chunks_partition_vector(self):
        v = np.random.default_rng(0).normal(size=24)
        parts = [chunk(v, k, 4) for k in range(1, 5)]
        assert np.array_equal(np.concatenate(parts), v)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            chunk(np.zeros(8), 3, 2)


class TestRefine:
    def test_zero_input_zero_weights(self):
        out, _ = refine_forward(np.zeros((1, 4)), np.zeros((3, 4)), np.zeros(3),
                                np.zeros((6, 3)), np.zeros(6))
        assert np.all(out == 0.0)

    def test_positive_identity_path(self):
        # identity-ish weights, positive input: LeakyReLU acts as identity
        w1 = np.eye(4)
        w0 = np.eye(4)
        out, _ = refine_forward(np.full((1, 4), 2.0), w1, np.zeros(4), w0, np.zeros(4))
        assert np.allclose(out, 2.0)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(9)
        w1 = rng.normal(size=(6, 10))
        b1 = rng.normal(size=6)
        w0 = rng.normal(size=(8, 6))
        b0 = rng.normal(size=8)
        feats = rng.normal(size=(3, 10))
        out, _ = refine_forward(feats, w1, b1, w0, b0)
        for row in range(3):
            expected = oracle_refine(feats[row].tolist(), w1.tolist(), b1.tolist(),
                                     w0.tolist(), b0.tolist())
            assert np.allclose(out[row], expected, atol=1e-12)


class TestAttention:
    def test_zero_projection_uniform(self):
        params, text, visual = toy_setup()
        params["attn_proj"] = np.zeros_like(params["attn_proj"])
        c = params.config.chunk_size
        rng = np.random.default_rng(2)
        w = attention_weights(params, rng.normal(size=c), rng.normal(size=c),
                              rng.normal(size=c), rng.normal(size=c))
        assert np.allclose(w, [1 / 3, 1 / 3, 1 / 3])

    def test_weights_differ_across_users(self):
        params, text, visual = toy_setup(seed=4)
        a = predict(params, 0, 1, text, visual).attention
        b = predict(params, 1, 1, text, visual).attention
        assert not np.allclose(a, b)

    def test_no_user_mode_ignores_user(self):
        params, text, visual = toy_setup(seed=4, attention_mode="no_user")
        a = predict(params, 0, 1, text, visual).attention
        b = predict(params, 1, 1, text, visual).attention
        assert np.allclose(a, b)

    def test_simplex_over_active_modalities(self):
        params, text, visual = toy_setup(seed=7, use_visual=False)
        bd = predict(params, 0, 0, text, None)
        assert np.allclose(bd.attention.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(bd.attention[:, 2] == 0.0)

    def test_logit_shift_invariance(self):
        # adding the same row vector to every projection row shifts all three
        # logits by a common per-pair constant; the breakdown must not move
        params, text, visual = toy_setup(seed=12)
        base = predict(params, 1, 2, text, visual)
        shifted = params.copy()
        shift = np.random.default_rng(3).normal(size=params["attn_proj"].shape[1])
        shifted["attn_proj"] = shifted["attn_proj"] + shift[None, :]
        moved = predict(shifted, 1, 2, text, visual)
        assert np.allclose(base.attention, moved.attention, atol=1e-12)
        assert np.allclose(base.partial_scores, moved.partial_scores, atol=1e-12)


class TestScores:
    def test_modality_factor_score_values(self):
        assert modality_factor_score([1.0, 0.0], [0.0, 1.0], 1.0) == pytest.approx(math.log(2))
        assert modality_factor_score([1.0, 1.0], [1.0, 1.0], 0.0) == 0.0
        assert modality_factor_score([1.0, 1.0], [1.0, 1.0], 0.5) == pytest.approx(
            0.5 * math.log1p(math.exp(2.0)))

    def test_bpr_values(self):
        assert float(bpr_loss(1.3, 1.3)) == pytest.approx(math.log(2))
        assert float(bpr_loss(50.0, 0.0)) == pytest.approx(0.0, abs=1e-20)
        assert float(bpr_loss(0.0, 2.0)) == pytest.approx(math.log1p(math.exp(2.0)))

    def test_id_only_single_factor_reduces_to_softplus_dot(self):
        params, _, _ = toy_setup(K=1, use_text=False, use_visual=False)
        bd = predict(params, 0, 1, None, None)
        expected = math.log1p(math.exp(float(
            params.get64("user_embed")[0] @ params.get64("item_embed")[1])))
        assert bd.total == pytest.approx(expected, abs=1e-12)

    def test_breakdown_additivity_and_positivity(self):
        params, text, visual = toy_setup(seed=3)
        for u in range(2):
            for i in range(3):
                bd = predict(params, u, i, text, visual)
                assert bd.total == np.sum(bd.partial_scores)
                assert np.all(bd.partial_scores >= 0.0)
                assert bd.total > 0.0

    def test_matches_scalar_oracle_over_configs(self):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            K = int(rng.choice([1, 2, 4]))
            c = int(rng.integers(2, 5))
            mode = str(rng.choice(["full", "no_attention", "no_user"]))
            use_text = bool(rng.integers(0, 2))
            use_visual = bool(rng.integers(0, 2))
            params, text, visual = toy_setup(
                seed=seed, n_users=3, n_items=4, d=K * c, K=K,
                use_text=use_text, use_visual=use_visual, attention_mode=mode)
            u = int(rng.integers(0, 3))
            i = int(rng.integers(0, 4))
            bd = predict(params, u, i, text, visual)
            expected, _ = oracle_predict(params, u, i, text, visual)
            worst = max(worst, abs(bd.total - expected))
        assert worst < 1e-10


class TestDisentangleLoss:
    def test_single_factor_is_zero(self):
        params, text, visual = toy_setup(K=1, d=8)
        assert disentangle_loss(params, [0, 1], [0, 1, 2], text, visual) == 0.0

    def test_duplicated_chunks_score_high(self):
        params, text, visual = toy_setup(K=2, d=8, use_text=False, use_visual=False)
        emb = params.get64("user_embed")
        emb[:, 4:] = emb[:, :4]
        params["user_embed"] = emb
        emb_i = params.get64("item_embed")
        emb_i[:, 4:] = emb_i[:, :4]
        params["item_embed"] = emb_i
        value = disentangle_loss(params, [0, 1], [0, 1, 2])
        # two groups (user, item), each one chunk pair of identical samples
        assert value == pytest.approx(2.0, abs=1e-6)

    def test_matches_direct_dcor_sum(self):
        params, text, visual = toy_setup(seed=5, n_users=6, n_items=8, d=8, K=4)
        users = np.arange(6)
        items = np.arange(8)
        value = disentangle_loss(params, users, items, text, visual)

        from dmrl.model import refine_forward as rf
        expected = 0.0
        groups = [params.get64("user_embed"), params.get64("item_embed")]
        for modality, feats in (("text", text), ("visual", visual)):
            refined, _ = rf(feats, params.get64(f"{modality}_w1"), params.get64(f"{modality}_b1"),
                            params.get64(f"{modality}_w0"), params.get64(f"{modality}_b0"))
            groups.append(refined)
        for g in groups:
            for k in range(4):
                for k2 in range(k + 1, 4):
                    expected += dcor(g[:, k * 2:(k + 1) * 2], g[:, k2 * 2:(k2 + 1) * 2])
        assert value == pytest.approx(expected, abs=1e-10)


def batch_for(params, seed=0, B=4):
    rng = np.random.default_rng(seed)
    users = rng.integers(0, params.num_users, size=B)
    pos = rng.integers(0, params.num_items, size=B)
    neg = (pos + 1 + rng.integers(0, params.num_items - 1, size=B)) % params.num_items
    return users, pos, neg


class TestTotalLoss:
    def test_switch_off_reduces_to_bpr(self):
        params, text, visual = toy_setup(lambda_theta=0.0, lambda_d=0.0)
        users, pos, neg = batch_for(params)
        terms, _ = total_loss(params, users, pos, neg, text, visual)
        assert terms.total == pytest.approx(terms.bpr)

    def test_zero_params_gives_ln2(self):
        params, text, visual = toy_setup(lambda_theta=0.0, lambda_d=0.0)
        for name in params.names:
            params[name] = np.zeros_like(params[name])
        users, pos, neg = batch_for(params)
        terms, _ = total_loss(params, users, pos, neg, text, visual)
        assert terms.bpr == pytest.approx(math.log(2.0), abs=1e-12)

    def test_accounting_identity(self):
        params, text, visual = toy_setup(lambda_theta=0.03, lambda_d=0.2)
        users, pos, neg = batch_for(params, seed=8)
        terms, _ = total_loss(params, users, pos, neg, text, visual)
        cfg = params.config
        assert terms.total == pytest.approx(
            terms.bpr + cfg.lambda_theta * terms.l2 + cfg.lambda_d * terms.disentangle,
            rel=1e-12)

    @pytest.mark.parametrize("mode,use_text,use_visual", [
        ("full", True, True),
        ("full", True, False),
        ("full", False, True),
        ("no_attention", True, True),
        ("no_user", True, True),
        ("full", False, False),
    ])
    def test_gradients_match_finite_differences(self, mode, use_text, use_visual):
        params, text, visual = toy_setup(seed=11, attention_mode=mode,
                                         use_text=use_text, use_visual=use_visual,
                                         lambda_theta=0.01, lambda_d=0.1)
        # check at a generic point: zero-initialized biases sit exactly on
        # cancellation points where round-off swamps the relative error
        jitter = np.random.default_rng(500)
        for name in params.names:
            params[name] = params[name] + jitter.normal(scale=0.05, size=params[name].shape)
        users, pos, neg = batch_for(params, seed=2)
        _, grads = total_loss(params, users, pos, neg, text, visual)

        for name in params.names:
            original = params.get64(name)

            def loss_at(tensor, _name=name):
                probe = params.copy()
                probe[_name] = tensor
                terms, _ = total_loss(probe, users, pos, neg, text, visual,
                                      want_grads=False)
                return terms.total

            err = finite_difference_check(loss_at, grads[name], original)
            assert err < 1e-4, f"gradient mismatch for {name} ({mode}): {err}"

    def test_non_finite_loss_names_term(self):
        params, text, visual = toy_setup()
        params["user_embed"] = np.full_like(params["user_embed"], 1e300)
        users, pos, neg = batch_for(params)
        with pytest.raises(RuntimeError, match="l2"):
            total_loss(params, users, pos, neg, text, visual)


class TestDtypeStorage:
    def test_float32_storage_upcasts_internally(self):
        config = ModelConfig(embed_dim=8, num_factors=2, text_input_dim=6,
                             visual_input_dim=5)
        params = ModelParams(config, 2, 3, seed=0, dtype=np.float32)
        assert params["user_embed"].dtype == np.float32
        rng = np.random.default_rng(0)
        text = rng.normal(size=(3, 6))
        visual = rng.normal(size=(3, 5))
        bd = predict(params, 0, 1, text, visual)
        assert isinstance(bd.total, float)
        terms, grads = total_loss(params, [0, 1], [0, 1], [2, 2], text, visual)
        assert grads["user_embed"].dtype == np.float64
