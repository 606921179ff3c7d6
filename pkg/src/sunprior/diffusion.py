"""Pixel-space denoising diffusion at desk scale.

Images live in [0, 1] outside this module and in [-1, 1] inside it. The
denoiser is a dense network on the flattened image, a sinusoidal timestep
embedding and one pooled conditioning vector, with a learned scalar skip gain
on the noisy input so that per-pixel noise stays representable despite the
256-wide bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .artifacts import checksum, load_container, save_container
from .errors import ContractError, DomainError, NumericError

DEFAULT_STEPS = 30
DEFAULT_SWITCH = 15
DEFAULT_GUIDANCE = 7.5


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def alpha_bar(self, t):
        """``alpha_bar`` at step ``t``; ``t = -1`` denotes the clean image."""
        return 1.0 if t < 0 else float(self.alpha_bars[t])


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    if T < 1:
        raise DomainError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def forward_noise(x0, t, eps, s):
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ContractError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= s.T):
        raise ContractError(f"timestep outside [0, {s.T})")
    ab = s.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def to_model_space(images):
    return 2.0 * np.asarray(images, dtype=float) - 1.0


def to_pixel_space(x):
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def timestep_embedding(t, dim=64, max_period=10000.0):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class PromptContext:
    """Ordered conditioning embeddings; ``embeddings is None`` is the null context."""

    embeddings: np.ndarray | None = None
    names: tuple = ()

    @classmethod
    def null(cls):
        return cls(None, ())

    @property
    def is_null(self):
        return self.embeddings is None

    def pooled(self, null_vector=None):
        if self.is_null:
            if null_vector is None:
                raise ContractError("null context needs the model's null embedding")
            return np.asarray(null_vector, dtype=float)
        emb = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if emb.shape[0] == 0:
            raise ContractError("a prompt context needs at least one embedding")
        return emb.mean(axis=0)


DENOISER_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


@dataclass
class DiffusionModel:
    """Schedule, denoiser weights, prompt table and null embedding.

    ``params`` holds the denoiser weights ``W1..b4`` plus ``prompt_table``
    (one row per word in ``vocab``) and ``null`` (unconditional embedding).
    """

    schedule: NoiseSchedule
    params: dict
    vocab: tuple
    image_shape: tuple = (32, 32)
    embed_dim: int = 32
    temb_dim: int = 64
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, vocab, seed=0, image_shape=(32, 32), embed_dim=32, hidden=256, temb_dim=64, schedule=None):
        rng = np.random.default_rng(seed)
        pix = int(np.prod(image_shape))
        d_in = pix + temb_dim + embed_dim
        p = {
            "W1": layers.glorot(rng, d_in, hidden),
            "b1": np.zeros(hidden),
            "W2": layers.glorot(rng, hidden, hidden),
            "b2": np.zeros(hidden),
            "W3": layers.glorot(rng, hidden, hidden),
            "b3": np.zeros(hidden),
            "W4": layers.glorot(rng, hidden, pix + 1, scale=0.1),
            "b4": np.zeros(pix + 1),
            "prompt_table": rng.normal(0.0, 1.0, size=(len(vocab), embed_dim)),
            "null": np.zeros(embed_dim),
        }
        return cls(schedule or make_schedule(), p, tuple(vocab), tuple(image_shape), embed_dim, temb_dim)

    @property
    def pixels(self):
        return int(np.prod(self.image_shape))

    def checksum(self):
        return checksum(self.params)

    def denoiser_checksum(self):
        return checksum({k: self.params[k] for k in DENOISER_KEYS})

    def word_embeddings(self, words):
        index = {w: i for i, w in enumerate(self.vocab)}
        try:
            rows = [index[w] for w in words]
        except KeyError as exc:
            raise ContractError(f"unknown word {exc.args[0]!r}") from None
        return self.params["prompt_table"][rows]

    def context(self, *parts):
        """Build a :class:`PromptContext` from words and/or token sets, in order."""
        rows, names = [], []
        for part in parts:
            if isinstance(part, str):
                rows.append(self.word_embeddings([part]))
                names.append(part)
            else:
                emb = np.atleast_2d(part.embeddings)
                rows.append(emb)
                names.append(part.name)
        if not rows:
            return PromptContext.null()
        return PromptContext(np.concatenate(rows, axis=0), tuple(names))

    def cond_vector(self, ctx):
        return ctx.pooled(self.params["null"])

    # -- denoiser ---------------------------------------------------------

    def forward(self, x, t, cond, params=None):
        p = self.params if params is None else params
        B = x.shape[0]
        xf = x.reshape(B, -1)
        t = np.broadcast_to(np.asarray(t), (B,))
        cond = np.broadcast_to(np.asarray(cond, dtype=float), (B, self.embed_dim))
        h0 = np.concatenate([xf, timestep_embedding(t, self.temb_dim), cond], axis=1)
        z1 = layers.dense_forward(h0, p["W1"], p["b1"])
        h1, s1 = layers.silu(z1)
        z2 = layers.dense_forward(h1, p["W2"], p["b2"])
        h2, s2 = layers.silu(z2)
        z3 = layers.dense_forward(h2, p["W3"], p["b3"])
        h3, s3 = layers.silu(z3)
        out = layers.dense_forward(h3, p["W4"], p["b4"])
        gain = out[:, -1:]
        eps = out[:, :-1] + gain * xf
        cache = (xf, h0, z1, s1, h1, z2, s2, h2, z3, s3, h3, gain, x.shape)
        return eps.reshape(x.shape), cache

    def backward(self, cache, d_eps, params=None):
        """Gradients of the denoiser weights and of the conditioning vectors."""
        p = self.params if params is None else params
        xf, h0, z1, s1, h1, z2, s2, h2, z3, s3, h3, gain, shape = cache
        B = xf.shape[0]
        de = d_eps.reshape(B, -1)
        d_out = np.concatenate([de, (de * xf).sum(axis=1, keepdims=True)], axis=1)
        g = {}
        dh3, g["W4"], g["b4"] = layers.dense_backward(h3, p["W4"], d_out)
        dz3 = layers.silu_backward(z3, s3, dh3)
        dh2, g["W3"], g["b3"] = layers.dense_backward(h2, p["W3"], dz3)
        dz2 = layers.silu_backward(z2, s2, dh2)
        dh1, g["W2"], g["b2"] = layers.dense_backward(h1, p["W2"], dz2)
        dz1 = layers.silu_backward(z1, s1, dh1)
        dh0, g["W1"], g["b1"] = layers.dense_backward(h0, p["W1"], dz1)
        d_cond = dh0[:, -self.embed_dim :]
        return g, d_cond

    def __call__(self, x, t, cond):
        return self.forward(np.asarray(x, dtype=float), t, cond)[0]

    # -- persistence --------------------------------------------------------

    def save(self, path):
        meta = {
            "vocab": list(self.vocab),
            "image_shape": list(self.image_shape),
            "embed_dim": self.embed_dim,
            "temb_dim": self.temb_dim,
            "T": self.schedule.T,
            "beta_start": float(self.schedule.betas[0]),
            "beta_end": float(self.schedule.betas[-1]),
            **self.meta,
        }
        save_container(path, "diffusion_model", self.params, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path, "diffusion_model")
        schedule = make_schedule(meta["T"], meta["beta_start"], meta["beta_end"])
        extra = {k: v for k, v in meta.items() if k not in {"vocab", "image_shape", "embed_dim", "temb_dim", "T", "beta_start", "beta_end"}}
        return cls(
            schedule,
            {k: np.array(v) for k, v in arrays.items()},
            tuple(meta["vocab"]),
            tuple(meta["image_shape"]),
            meta["embed_dim"],
            meta["temb_dim"],
            extra,
        )


def loss_and_grads(model, x0, t, eps, cond, params=None):
    """Batch-mean squared error ``||eps - eps_hat||^2`` and its gradients.

    Returns ``(loss, weight_grads, cond_grads)``; ``cond`` is ``(B, d)``.
    """
    s = model.schedule
    xt = forward_noise(x0, t, eps, s)
    pred, cache = model.forward(xt, t, cond, params)
    diff = pred - eps
    B = x0.shape[0]
    loss = float((diff * diff).sum() / B)
    grads, d_cond = model.backward(cache, 2.0 * diff / B, params)
    return loss, grads, d_cond


def draw_noise(rng, batch_shape, T):
    """Timesteps uniform over the schedule and unit Gaussian noise."""
    t = rng.integers(0, T, size=batch_shape[0])
    eps = rng.standard_normal(batch_shape)
    return t, eps


def eps_loss(denoiser, batch, ctx, s, rng):
    """Monte Carlo estimate of the conditional noise-prediction objective.

    ``denoiser`` is any callable ``(x_t, t, cond) -> eps_hat``; ``ctx`` is a
    :class:`PromptContext` or an explicit ``(B, d)`` conditioning array.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 0 or batch.shape[0] == 0:
        raise ContractError("eps_loss needs a nonempty batch")
    if isinstance(ctx, PromptContext):
        null = getattr(denoiser, "params", {}).get("null")
        cond = ctx.pooled(null)
    else:
        cond = np.asarray(ctx, dtype=float)
    t, eps = draw_noise(rng, batch.shape, s.T)
    xt = forward_noise(batch, t, eps, s)
    pred = denoiser(xt, t, cond)
    return float(((eps - pred) ** 2).sum() / batch.shape[0])


def cfg_predict(denoiser, x_t, t, cond, null_cond, w):
    """Classifier-free guidance ``eps_u + w (eps_c - eps_u)``.

    Written as ``w eps_c + (1 - w) eps_u`` so the ``w = 0`` and ``w = 1``
    endpoints return the branch predictions bit-exactly.
    """
    if w < 0:
        raise DomainError("guidance scale must be >= 0")
    B = x_t.shape[0]
    if w == 1.0:
        # the unconditional branch has zero weight; skip it
        return denoiser(x_t, np.full(B, t), np.broadcast_to(np.asarray(cond, dtype=float), (B, len(null_cond))))
    cond = np.broadcast_to(np.asarray(cond, dtype=float), (B, len(null_cond)))
    null = np.broadcast_to(np.asarray(null_cond, dtype=float), (B, len(null_cond)))
    both = denoiser(np.concatenate([x_t, x_t]), np.full(2 * B, t), np.concatenate([cond, null]))
    eps_c, eps_u = both[:B], both[B:]
    return w * eps_c + (1.0 - w) * eps_u


def ddim_step(x_t, eps_hat, t, t_prev, s):
    """Deterministic DDIM update from ``t`` to ``t_prev`` (``-1`` = clean)."""
    if not (0 <= t < s.T) or not (-1 <= t_prev <= t):
        raise ContractError(f"invalid DDIM step {t} -> {t_prev}")
    if t_prev == t:
        return np.array(x_t, copy=True)
    ab, ab_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(T, steps):
    if not (1 <= steps <= T):
        raise ContractError(f"steps must lie in [1, {T}]")
    if steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(0, T - 1, steps)).astype(int)[::-1]


def sample_partial(
    model,
    ctx_first,
    ctx_second,
    steps=DEFAULT_STEPS,
    switch_step=DEFAULT_SWITCH,
    w=DEFAULT_GUIDANCE,
    seed=0,
    n=1,
    x_T=None,
):
    """Two-phase DDIM: ``ctx_first`` for the first ``switch_step`` steps, then ``ctx_second``.

    Returns ``n`` images in [0, 1]; clamping happens only after the last step.
    """
    if not (0 <= switch_step <= steps):
        raise ContractError(f"switch_step {switch_step} outside [0, {steps}]")
    s = model.schedule
    ts = ddim_timesteps(s.T, steps)
    if x_T is None:
        x_T = np.random.default_rng(seed).standard_normal((n, *model.image_shape))
    x = np.array(x_T, dtype=float)
    null = model.params["null"]
    conds = (model.cond_vector(ctx_first), model.cond_vector(ctx_second))
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        cond = conds[0] if i < switch_step else conds[1]
        eps = cfg_predict(model, x, int(t), cond, null, w)
        x = ddim_step(x, eps, int(t), t_prev, s)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"sampler state became non-finite at t={int(t)}; the model may be undertrained")
    return to_pixel_space(x)


def sample(model, ctx, steps=DEFAULT_STEPS, w=DEFAULT_GUIDANCE, seed=0, n=1, x_T=None):
    return sample_partial(model, ctx, ctx, steps, steps, w, seed, n, x_T)
