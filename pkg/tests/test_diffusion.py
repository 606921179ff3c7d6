import numpy as np
import pytest

from sunprior.diffusion import (
    DiffusionModel,
    NoiseSchedule,
    PromptContext,
    cfg_predict,
    ddim_step,
    ddim_timesteps,
    eps_loss,
    forward_noise,
    loss_and_grads,
    make_schedule,
    sample,
    sample_partial,
)
from sunprior.errors import ContractError, DomainError, NumericError
from sunprior.training import grad_check


def tiny_model(seed=0, shape=(4, 4), hidden=8, dim=6, T=50):
    m = DiffusionModel.init(("scene", "day", "night"), seed=seed, image_shape=shape, embed_dim=dim, hidden=hidden, temb_dim=8, schedule=make_schedule(T, 1e-3, 0.2))
    rng = np.random.default_rng(seed + 100)
    m.params["W4"] = rng.normal(0, 0.3, size=m.params["W4"].shape)
    m.params["null"] = rng.normal(size=dim)
    return m


class OracleDenoiser:
    """Returns the exact noise of the trajectory through ``x0``."""

    def __init__(self, x0, schedule):
        self.x0 = x0
        self.schedule = schedule
        self.image_shape = x0.shape[1:]
        self.params = {"null": np.zeros(2)}

    def cond_vector(self, ctx):
        return ctx.pooled(self.params["null"])

    def __call__(self, x_t, t, cond):
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        ab = self.schedule.alpha_bars[t][:, None, None]
        x0 = np.concatenate([self.x0] * (x_t.shape[0] // self.x0.shape[0]))
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1 - ab)


class TestSchedule:
    def test_single_step(self):
        assert np.array_equal(make_schedule(1, 0.5, 0.5).alpha_bars, [0.5])

    def test_two_steps(self):
        s = make_schedule(2, 0.1, 0.2)
        assert np.allclose(s.alpha_bars, [0.9, 0.72], atol=1e-15)

    def test_default_tail(self):
        # exact rational product of (1 - beta) over the linear 1e-4..0.02 schedule
        assert make_schedule().alpha_bars[999] == pytest.approx(4.03583e-5, abs=5e-6)
        assert make_schedule().alpha_bars[999] == pytest.approx(4.0358297653756835e-05, rel=1e-10)

    def test_brute_force_consistency(self):
        s = make_schedule()
        prod, ref = 1.0, []
        for b in s.betas:
            prod *= 1.0 - b
            ref.append(prod)
        assert np.max(np.abs(np.array(ref) - s.alpha_bars)) < 1e-12
        assert np.all(np.diff(s.alpha_bars) < 0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            make_schedule(*args)


class TestForwardNoise:
    def test_no_noise_limit(self):
        s = NoiseSchedule(np.array([0.0]), np.array([1.0]))
        x0 = np.random.default_rng(0).normal(size=(2, 3, 3))
        assert np.array_equal(forward_noise(x0, 0, np.ones_like(x0), s), x0)

    def test_zero_image(self):
        s = make_schedule()
        eps = np.random.default_rng(1).normal(size=(1, 4, 4))
        assert np.allclose(forward_noise(np.zeros_like(eps), 500, eps, s), np.sqrt(1 - s.alpha_bars[500]) * eps)

    def test_superposition(self):
        s = make_schedule()
        rng = np.random.default_rng(2)
        x, y, eps = rng.normal(size=(3, 2, 5, 5))
        a, b = 0.3, -1.7
        lhs = forward_noise(a * x + b * y, 321, eps, s)
        c = np.sqrt(s.alpha_bars[321])
        rhs = a * (forward_noise(x, 321, eps, s) - np.sqrt(1 - s.alpha_bars[321]) * eps) + b * c * y + np.sqrt(1 - s.alpha_bars[321]) * eps
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_monte_carlo_variance(self):
        s = make_schedule()
        rng = np.random.default_rng(3)
        eps = rng.standard_normal((100_000, 1))
        xt = forward_noise(np.full_like(eps, 0.7), 400, eps, s)
        assert xt.var() == pytest.approx(1 - s.alpha_bars[400], rel=0.02)

    def test_per_sample_timesteps(self):
        s = make_schedule()
        x0 = np.ones((3, 2, 2))
        eps = np.zeros_like(x0)
        out = forward_noise(x0, np.array([0, 10, 999]), eps, s)
        assert np.allclose(out[:, 0, 0], np.sqrt(s.alpha_bars[[0, 10, 999]]))

    def test_contract(self):
        s = make_schedule()
        with pytest.raises(ContractError):
            forward_noise(np.zeros((1, 2, 2)), 0, np.zeros((1, 3, 3)), s)
        with pytest.raises(ContractError):
            forward_noise(np.zeros((1, 2, 2)), 1000, np.zeros((1, 2, 2)), s)


class TestEpsLoss:
    def test_oracle_denoiser_is_zero(self):
        s = make_schedule()
        rng = np.random.default_rng(0)
        batch = rng.uniform(-1, 1, size=(8, 6, 6))
        captured = {}

        def oracle(x_t, t, cond):
            ab = s.alpha_bars[t][:, None, None]
            return (x_t - np.sqrt(ab) * batch) / np.sqrt(1 - ab)

        assert eps_loss(oracle, batch, np.zeros((8, 2)), s, rng) == pytest.approx(0.0, abs=1e-18)

    def test_zero_denoiser_is_pixel_count(self):
        s = make_schedule()
        batch = np.zeros((256, 32, 32))
        loss = eps_loss(lambda x, t, c: np.zeros_like(x), batch, np.zeros((256, 2)), s, np.random.default_rng(1))
        # chi-square mean over 1024 dof, 256 draws: sd ~ 2.8
        assert loss == pytest.approx(1024, abs=12)

    def test_deterministic(self):
        m = tiny_model()
        batch = np.random.default_rng(0).uniform(-1, 1, size=(5, 4, 4))
        ctx = m.context("scene", "day")
        a = eps_loss(m, batch, ctx, m.schedule, np.random.default_rng(7))
        b = eps_loss(m, batch, ctx, m.schedule, np.random.default_rng(7))
        assert a == b

    def test_empty_batch(self):
        m = tiny_model()
        with pytest.raises(ContractError):
            eps_loss(m, np.zeros((0, 4, 4)), m.context("day"), m.schedule, np.random.default_rng(0))


class TestDenoiserGradients:
    def test_weights_and_conditioning(self):
        m = tiny_model(seed=3)
        rng = np.random.default_rng(4)
        x0 = rng.uniform(-1, 1, size=(4, 4, 4))
        t = rng.integers(0, m.schedule.T, size=4)
        eps = rng.standard_normal(x0.shape)
        keys = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")

        def loss_fn(p):
            params = dict(m.params, **{k: p[k] for k in keys})
            loss, g, dc = loss_and_grads(m, x0, t, eps, p["cond"], params)
            g["cond"] = dc
            return loss, g

        p = {k: m.params[k].copy() for k in keys}
        p["cond"] = rng.normal(size=(4, m.embed_dim))
        assert grad_check(loss_fn, p, probe_count=150) <= 1e-4

    def test_output_shape(self):
        m = tiny_model()
        x = np.zeros((3, 4, 4))
        assert m(x, 5, np.zeros(m.embed_dim)).shape == x.shape


class TestCfg:
    def setup_method(self):
        self.m = tiny_model(seed=1)
        rng = np.random.default_rng(5)
        self.x = rng.normal(size=(3, 4, 4))
        self.c = rng.normal(size=self.m.embed_dim)
        self.null = self.m.params["null"]

    def test_w1_is_conditional(self):
        assert np.array_equal(cfg_predict(self.m, self.x, 10, self.c, self.null, 1.0), self.m(self.x, 10, self.c))

    def test_w0_is_unconditional(self):
        assert np.array_equal(cfg_predict(self.m, self.x, 10, self.c, self.null, 0.0), self.m(self.x, 10, self.null))

    def test_equal_contexts(self):
        a = cfg_predict(self.m, self.x, 10, self.null, self.null, 0.5)
        b = cfg_predict(self.m, self.x, 10, self.null, self.null, 7.5)
        assert np.allclose(a, b, atol=1e-12)

    def test_negative_scale(self):
        with pytest.raises(DomainError):
            cfg_predict(self.m, self.x, 10, self.c, self.null, -1.0)


class TestDdim:
    def test_identity_step(self):
        s = make_schedule()
        x = np.random.default_rng(0).normal(size=(2, 4, 4))
        assert np.array_equal(ddim_step(x, np.ones_like(x), 500, 500, s), x)

    def test_true_noise_inverts_closed_form(self):
        s = make_schedule()
        rng = np.random.default_rng(1)
        x0, eps = rng.normal(size=(2, 3, 4, 4))
        xt = forward_noise(x0, 700, eps, s)
        assert np.allclose(ddim_step(xt, eps, 700, -1, s), x0, atol=1e-10)

    def test_scalar_hand_arithmetic(self):
        s = NoiseSchedule(np.array([0.19, 0.0]), np.array([0.81, 0.25]))
        out = ddim_step(np.array([1.0]), np.array([0.5]), 1, 0, s)
        x0_hat = (1 - np.sqrt(0.75) * 0.5) / 0.5
        assert x0_hat == pytest.approx(1.13397, abs=1e-4)
        assert out[0] == pytest.approx(1.23851, abs=1e-4)

    def test_contract(self):
        s = make_schedule(10)
        with pytest.raises(ContractError):
            ddim_step(np.zeros(1), np.zeros(1), 10, 5, s)
        with pytest.raises(ContractError):
            ddim_step(np.zeros(1), np.zeros(1), 3, 5, s)

    def test_timesteps(self):
        ts = ddim_timesteps(1000, 30)
        assert len(ts) == 30 and ts[0] == 999 and ts[-1] == 0
        assert np.all(np.diff(ts) < 0)
        assert np.array_equal(ddim_timesteps(1000, 1000), np.arange(999, -1, -1))

    def test_oracle_recovers_x0(self):
        s = make_schedule()
        rng = np.random.default_rng(2)
        x0 = rng.uniform(-0.9, 0.9, size=(2, 5, 5))
        eps = rng.standard_normal(x0.shape)
        oracle = OracleDenoiser(x0, s)
        x_T = forward_noise(x0, 999, eps, s)
        out = sample(oracle, PromptContext(np.zeros((1, 2))), steps=1000, w=1.0, x_T=x_T)
        assert np.max(np.abs(out - (x0 + 1) / 2)) < 1e-6


class TestSamplePartial:
    def setup_method(self):
        self.m = tiny_model(seed=2)
        self.a = self.m.context("scene", "day")
        self.b = self.m.context("night")

    def test_equal_contexts_match_single(self):
        p = sample_partial(self.m, self.a, self.a, steps=20, switch_step=7, w=3.0, seed=4, n=3)
        q = sample(self.m, self.a, steps=20, w=3.0, seed=4, n=3)
        assert np.array_equal(p, q)

    def test_switch_boundaries(self):
        assert np.array_equal(
            sample_partial(self.m, self.a, self.b, steps=10, switch_step=0, seed=1),
            sample(self.m, self.b, steps=10, seed=1),
        )
        assert np.array_equal(
            sample_partial(self.m, self.a, self.b, steps=10, switch_step=10, seed=1),
            sample(self.m, self.a, steps=10, seed=1),
        )

    def test_context_schedule(self):
        seen = []
        m = self.m

        class Spy:
            schedule, image_shape, params = m.schedule, m.image_shape, m.params
            cond_vector = staticmethod(m.cond_vector)

            def __call__(self, x, t, cond):
                seen.append(cond[0].copy())
                return np.zeros_like(x)

        sample_partial(Spy(), self.a, self.b, steps=10, switch_step=4, w=2.0)
        conds = seen  # one batched (cond + null) call per step
        first, second = m.cond_vector(self.a), m.cond_vector(self.b)
        assert len(conds) == 10
        assert all(np.array_equal(c, first) for c in conds[:4])
        assert all(np.array_equal(c, second) for c in conds[4:])

    def test_deterministic_and_clamped(self):
        x = sample_partial(self.m, self.a, self.b, steps=10, switch_step=5, seed=9, n=4)
        y = sample_partial(self.m, self.a, self.b, steps=10, switch_step=5, seed=9, n=4)
        assert np.array_equal(x, y)
        assert x.min() >= 0 and x.max() <= 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_state_raises(self):
        m = tiny_model(seed=2)
        m.params["W4"] = m.params["W4"] * 1e300
        with pytest.raises(NumericError):
            sample_partial(m, self.a, self.b, steps=10, switch_step=5, seed=1)

    @pytest.mark.parametrize("steps,switch", [(10, 11), (10, -1), (51, 5)])
    def test_contract(self, steps, switch):
        with pytest.raises(ContractError):
            sample_partial(self.m, self.a, self.b, steps=steps, switch_step=switch)


class TestPromptContext:
    def test_pooling(self):
        m = tiny_model()
        ctx = m.context("scene", "day")
        assert np.allclose(m.cond_vector(ctx), m.word_embeddings(["scene", "day"]).mean(axis=0))
        assert ctx.names == ("scene", "day")

    def test_null(self):
        m = tiny_model()
        assert np.array_equal(m.cond_vector(PromptContext.null()), m.params["null"])
        with pytest.raises(ContractError):
            PromptContext.null().pooled()

    def test_unknown_word(self):
        with pytest.raises(ContractError):
            tiny_model().context("dragon")

    def test_save_load(self, tmp_path):
        m = tiny_model()
        m.save(tmp_path / "m.spar")
        back = DiffusionModel.load(tmp_path / "m.spar")
        assert back.checksum() == m.checksum()
        assert back.vocab == m.vocab and back.image_shape == m.image_shape
        assert np.array_equal(back.schedule.alpha_bars, m.schedule.alpha_bars)
