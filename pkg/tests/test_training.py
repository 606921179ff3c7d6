import numpy as np
import pytest

from sunprior.binning import BinScheme
from sunprior.diffusion import draw_noise, make_schedule, to_model_space
from sunprior.encoder import ContextNet, TokenSet
from sunprior.errors import ContractError, DomainError, FreezeViolation, NumericError, TrainingError
from sunprior.training import (
    VOCAB,
    AdamW,
    Candidate,
    OptimConfig,
    check_frozen,
    context_objective,
    grad_check,
    lighting_word,
    select_best_embedding,
    structure_objective,
    train_base,
    train_context_net,
    train_structure_token,
    _check_divergence,
)

SCHEME = BinScheme((-18, -6, -4, -2, 60))
TINY = dict(embed_dim=6, hidden=12, temb_dim=8, schedule=make_schedule(50, 1e-3, 0.2))


def tiny_images(n, seed=0, shape=(4, 4)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.1, 0.9, size=(n, *shape))


@pytest.fixture(scope="module")
def tiny_base():
    alts = np.linspace(-17, 50, 12)
    cfg = OptimConfig(lr=1e-3, epochs=2, batch_size=4, seed=3)
    model, _ = train_base(tiny_images(12), alts, cfg, **TINY)
    rng = np.random.default_rng(9)
    model.params["W4"] = rng.normal(0, 0.3, size=model.params["W4"].shape)
    return model


class TestAdamW:
    def test_first_step_closed_form(self):
        cfg = OptimConfig(lr=0.1, weight_decay=0.0)
        p = {"x": np.array([3.0, -2.0])}
        g = {"x": 2.0 * p["x"]}
        AdamW(p, cfg).step(p, g)
        # bias-corrected m/sqrt(v) is sign(g) on the first step
        expected = np.array([3.0, -2.0]) - 0.1 * np.sign([6.0, -4.0]) * (np.abs([6.0, -4.0]) / (np.abs([6.0, -4.0]) + 1e-8))
        assert np.allclose(p["x"], expected, atol=1e-12, rtol=0)

    def test_two_steps_closed_form(self):
        cfg = OptimConfig(lr=0.01, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8)
        x = np.array([1.5])
        p = {"x": x.copy()}
        opt = AdamW(p, cfg)
        m = v = 0.0
        for t in (1, 2):
            g = 2.0 * x
            opt.step(p, {"x": 2.0 * p["x"]})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p["x"][0] - x[0]) <= 1e-12

    def test_decoupled_decay(self):
        cfg = OptimConfig(lr=0.1, weight_decay=0.01)
        p = {"x": np.array([2.0, -4.0])}
        opt = AdamW(p, cfg)
        for k in range(1, 4):
            opt.step(p, {"x": np.zeros(2)})
            assert np.allclose(p["x"], np.array([2.0, -4.0]) * (1 - 0.1 * 0.01) ** k, atol=1e-15)

    def test_missing_grad_leaves_param(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        AdamW(p, OptimConfig()).step(p, {"a": np.ones(2)})
        assert np.array_equal(p["b"], np.ones(2))

    @pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(epochs=0), dict(batch_size=0)])
    def test_config_validation(self, kw):
        with pytest.raises(DomainError):
            OptimConfig(**kw)


class TestGradCheck:
    def quad(self, p):
        return float((p["x"] ** 2).sum()), {"x": 2.0 * p["x"]}

    def test_quadratic_exact(self):
        p = {"x": np.random.default_rng(0).normal(size=10)}
        assert grad_check(self.quad, p, probe_count=10) < 1e-10

    def test_restores_params(self):
        x = np.random.default_rng(1).normal(size=5)
        p = {"x": x.copy()}
        grad_check(self.quad, p)
        assert np.array_equal(p["x"], x)

    def test_planted_fault_fires(self):
        p = {"x": np.random.default_rng(0).normal(size=10)}
        bad = {"x": 2.0 * p["x"] * 1.01}
        err = grad_check(self.quad, p, probe_count=10, grads=bad)
        # 0.01 / 2.01 is the exact relative error under the symmetric definition
        assert err == pytest.approx(0.01 / 2.01, rel=1e-6)
        assert err > 1e-3

    def test_non_finite(self):
        with pytest.raises(NumericError):
            grad_check(lambda p: (float("nan"), {"x": p["x"]}), {"x": np.ones(2)})


class TestLightingWords:
    def test_words(self):
        assert lighting_word(-30) == "night"
        assert lighting_word(-12) == "nautical"
        assert lighting_word(-0.5) == "twilight"
        assert lighting_word(0.0) == "sunrise"
        assert lighting_word(60) == "day"
        assert VOCAB[0] == "scene" and len(set(VOCAB)) == len(VOCAB)


class TestTrainBase:
    def test_memorize_one_image(self):
        img = tiny_images(1, seed=4)
        cfg = OptimConfig(lr=3e-3, epochs=400, batch_size=1, weight_decay=0.0, seed=0)
        _, rep = train_base(np.repeat(img, 16, axis=0), np.full(16, 30.0), cfg, cond_dropout=0.0, word_dropout=0.0, **TINY)
        assert rep.final_loss < 0.1 * rep.extra["initial_loss"]

    def test_deterministic(self):
        cfg = OptimConfig(lr=1e-3, epochs=2, batch_size=4, seed=1)
        a, ra = train_base(tiny_images(8), np.linspace(-10, 10, 8), cfg, **TINY)
        b, rb = train_base(tiny_images(8), np.linspace(-10, 10, 8), cfg, **TINY)
        assert ra.checksum == rb.checksum == a.checksum() == b.checksum()
        assert ra.to_json() == rb.to_json()
        assert "wall_time" not in ra.to_json() and "wall_time" in ra.to_json(include_time=True)

    def test_empty(self):
        with pytest.raises(ContractError):
            train_base(np.zeros((0, 4, 4)), np.zeros(0), **TINY)

    def test_divergence_detection(self):
        with pytest.raises(TrainingError):
            _check_divergence([1.0, 11.0], 1.0)
        with pytest.raises(TrainingError):
            _check_divergence([float("nan")], 1.0)
        _check_divergence([1.0, 9.9], 1.0)


class TestStructureToken:
    def test_gradient_matches_fd(self, tiny_base):
        rng = np.random.default_rng(0)
        x0 = to_model_space(tiny_images(4, seed=2))
        t, eps = draw_noise(rng, x0.shape, tiny_base.schedule.T)
        p = {"S": rng.normal(size=(3, tiny_base.embed_dim))}

        def fn(q):
            loss, g = structure_objective(tiny_base, q["S"], x0, t, eps)
            return loss, {"S": g}

        assert grad_check(fn, p, probe_count=18) <= 1e-4

    def test_freeze_contract(self, tiny_base):
        before = tiny_base.checksum()
        tokens, rep = train_structure_token(tiny_base, tiny_images(8), OptimConfig(epochs=2, batch_size=4), token_count=2)
        assert tiny_base.checksum() == before
        assert tokens.name == "S*" and tokens.count == 2
        check_frozen(tiny_base, before)

    def test_lr_zero_is_noop(self, tiny_base):
        from sunprior.training import init_structure_embeddings

        cfg = OptimConfig(lr=0.0, epochs=3, batch_size=8, weight_decay=0.01)
        tokens, rep = train_structure_token(tiny_base, tiny_images(8), cfg, token_count=1)
        assert np.array_equal(tokens.embeddings, init_structure_embeddings(tiny_base, 1, cfg.seed))
        assert np.isfinite(rep.final_loss)

    def test_token_count_domain(self, tiny_base):
        with pytest.raises(DomainError):
            train_structure_token(tiny_base, tiny_images(2), token_count=6)

    def test_check_frozen_raises(self, tiny_base):
        with pytest.raises(FreezeViolation):
            check_frozen(tiny_base, "0" * 64)


class TestContextNet:
    def test_full_gradient_check(self, tiny_base):
        rng = np.random.default_rng(1)
        net = ContextNet.init(n_tokens=2, dim=tiny_base.embed_dim, n_centers=5, seed=1)
        for k, v in net.params().items():
            v += 0.3 * rng.standard_normal(v.shape)
        x0 = to_model_space(tiny_images(4, seed=5))
        v = rng.uniform(0, 1, 4)
        t, eps = draw_noise(rng, x0.shape, tiny_base.schedule.T)
        params = {k: a.copy() for k, a in net.params().items()}

        def fn(p):
            return context_objective(tiny_base, ContextNet.from_params(p), x0, v, t, eps)

        assert grad_check(fn, params, probe_count=40) <= 1e-4

    def test_lr_zero_keeps_identity(self, tiny_base):
        net = ContextNet.init(1, tiny_base.embed_dim, seed=2)
        alts = np.array([-17.0, -5.0, -3.0, 20.0] * 2)
        net, _ = train_context_net(tiny_base, tiny_images(8), alts, SCHEME, net, OptimConfig(lr=0.0, epochs=1, batch_size=4))
        a, b = net.tokens(0.0), net.tokens(1.0)
        assert np.array_equal(a, b)

    def test_freeze_and_determinism(self, tiny_base):
        before = tiny_base.checksum()
        alts = np.array([-17.0, -5.0, -3.0, 20.0] * 2)
        cfg = OptimConfig(epochs=2, batch_size=4, seed=4)
        n1, r1 = train_context_net(tiny_base, tiny_images(8), alts, SCHEME, ContextNet.init(1, tiny_base.embed_dim, seed=2), cfg)
        n2, r2 = train_context_net(tiny_base, tiny_images(8), alts, SCHEME, ContextNet.init(1, tiny_base.embed_dim, seed=2), cfg)
        assert tiny_base.checksum() == before
        assert r1.checksum == r2.checksum
        assert r1.extra["n_items"] == 8

    def test_empty_bin_rejected(self, tiny_base):
        with pytest.raises(DomainError, match="empty"):
            train_context_net(tiny_base, tiny_images(2), np.array([-17.0, 20.0]), SCHEME, ContextNet.init(1, tiny_base.embed_dim))


class TestSelection:
    def token(self, m, name="S*"):
        return TokenSet(name, np.zeros((m, 2)))

    def test_empty(self):
        with pytest.raises(ContractError):
            select_best_embedding([], None, None)

    def test_single_returned(self):
        c = Candidate(self.token(1))
        best, _ = select_best_embedding([c], None, lambda tok: pytest.fail("should not generate"))
        assert best is c

    def test_matching_distribution_wins(self):
        rng = np.random.default_rng(0)
        heldout = rng.uniform(0.4, 0.6, size=(40, 8, 8))
        good, bad = Candidate(self.token(2), 0.005), Candidate(self.token(1), 0.001)

        def generate(tok):
            return heldout if tok is good.tokens else np.clip(heldout * 0.3 + 0.5 * rng.uniform(size=heldout.shape), 0, 1)

        best, scores = select_best_embedding([bad, good], heldout, generate)
        assert best is good
        assert scores[1] == pytest.approx(0.0, abs=1e-8)

    def test_tie_breaks(self):
        rng = np.random.default_rng(1)
        heldout = rng.uniform(size=(20, 6, 6))
        cands = [Candidate(self.token(3), 0.001), Candidate(self.token(1), 0.005), Candidate(self.token(1), 0.001)]
        best, _ = select_best_embedding(cands, heldout, lambda tok: heldout)
        assert best is cands[2]
