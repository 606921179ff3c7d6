"""Optimization of the base denoiser, structure tokens and the context network.

All gradients come from the hand-written backward passes in
:mod:`sunprior.diffusion` and :mod:`sunprior.encoder`; :func:`grad_check`
compares them against central differences.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .artifacts import checksum
from .binning import normalize_values, resample_balanced
from .diffusion import DiffusionModel, PromptContext, draw_noise, loss_and_grads, sample, to_model_space
from .encoder import ContextNet, TokenSet
from .errors import ContractError, DomainError, FreezeViolation, NumericError, TrainingError
from .metrics import feature_stats, frechet_gaussian

log = logging.getLogger(__name__)

# (exclusive upper altitude bound, word); a toy vocabulary of lighting terms
LIGHTING_WORDS = (
    (-12.0, "night"),
    (-9.0, "nautical"),
    (-6.0, "bluehour"),
    (-4.0, "civil"),
    (-2.0, "dusk"),
    (0.0, "twilight"),
    (3.0, "sunrise"),
    (6.0, "golden"),
    (15.0, "morning"),
    (float("inf"), "day"),
)
VOCAB = ("scene",) + tuple(w for _, w in LIGHTING_WORDS)

SWEEP_LEARNING_RATES = (0.001, 0.005, 0.0001)
SWEEP_TOKEN_COUNTS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.005
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise DomainError("learning rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch size must be >= 1")


BASE_DEFAULTS = OptimConfig(lr=1e-3, weight_decay=0.01, epochs=40, batch_size=32)


@dataclass
class TrainReport:
    epoch_losses: list
    final_loss: float
    config: dict
    checksum: str
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self, include_time=False):
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d


class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(self, params, cfg):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.lr * c.weight_decay * p
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def lighting_word(altitude_deg):
    for upper, word in LIGHTING_WORDS:
        if altitude_deg < upper:
            return word
    return LIGHTING_WORDS[-1][1]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# batches averaged into the reference loss for the divergence check
REFERENCE_BATCHES = 8


class _LossTracker:
    """Epoch means plus a reference from the first few batches."""

    def __init__(self):
        self.epoch_losses = []
        self._first = []
        self._current = []

    @property
    def initial(self):
        return float(np.mean(self._first)) if self._first else None

    def add(self, loss):
        if not np.isfinite(loss):
            raise TrainingError("loss became non-finite")
        if len(self._first) < REFERENCE_BATCHES:
            self._first.append(float(loss))
        self._current.append(float(loss))

    def end_epoch(self, what, epoch):
        self.epoch_losses.append(float(np.mean(self._current)))
        self._current = []
        log.info("%s epoch %d loss %.4f", what, epoch + 1, self.epoch_losses[-1])
        _check_divergence(self.epoch_losses, self.initial)


def _check_divergence(epoch_losses, initial):
    if not np.isfinite(epoch_losses[-1]):
        raise TrainingError("loss became non-finite")
    if epoch_losses[-1] > 10.0 * initial:
        raise TrainingError(f"diverged: epoch loss {epoch_losses[-1]:.4g} > 10x initial {initial:.4g}")


def train_base(images, altitudes, cfg=BASE_DEFAULTS, cond_dropout=0.1, word_dropout=0.2, ema_decay=None, **model_kw):
    """Train the toy text-conditioned denoiser.

    Each image is captioned ``["scene", <lighting word>]``; with probability
    ``cond_dropout`` the null embedding replaces the caption (for guidance)
    and with probability ``word_dropout`` the lighting word is omitted.
    With ``ema_decay`` the returned weights are an exponential moving
    average of the optimizer iterates. Returns ``(model, report)``.
    """
    images = np.asarray(images, dtype=float)
    if images.shape[0] == 0:
        raise ContractError("train_base needs a nonempty corpus")
    start = time.perf_counter()
    model = DiffusionModel.init(VOCAB, seed=cfg.seed, image_shape=images.shape[1:], **model_kw)
    x_all = to_model_space(images)
    word_idx = np.array([VOCAB.index(lighting_word(a)) for a in altitudes])
    params = model.params
    opt = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    T = model.schedule.T
    track = _LossTracker()
    ema = {k: v.copy() for k, v in params.items()} if ema_decay else None

    for epoch in range(cfg.epochs):
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            B = len(idx)
            u = rng.random(B)
            drop_all = u < cond_dropout
            drop_word = (u >= cond_dropout) & (u < cond_dropout + word_dropout)
            table = params["prompt_table"]
            rows_word = word_idx[idx]
            cond = np.where(drop_word[:, None], table[0], 0.5 * (table[0] + table[rows_word]))
            cond[drop_all] = params["null"]
            t, eps = draw_noise(rng, (B, *x_all.shape[1:]), T)
            loss, grads, d_cond = loss_and_grads(model, x_all[idx], t, eps, cond)
            g_table = np.zeros_like(table)
            keep = ~drop_all
            both = keep & ~drop_word
            np.add.at(g_table, 0, d_cond[drop_word].sum(axis=0) + 0.5 * d_cond[both].sum(axis=0))
            np.add.at(g_table, rows_word[both], 0.5 * d_cond[both])
            grads["prompt_table"] = g_table
            grads["null"] = d_cond[drop_all].sum(axis=0)
            opt.step(params, grads)
            if ema is not None:
                for k, v in params.items():
                    ema[k] += (1.0 - ema_decay) * (v - ema[k])
            track.add(loss)
        track.end_epoch("base", epoch)
    if ema is not None:
        for k in params:
            params[k][...] = ema[k]

    report = TrainReport(
        track.epoch_losses,
        track.epoch_losses[-1],
        asdict(cfg),
        model.checksum(),
        time.perf_counter() - start,
        {"initial_loss": track.initial, "vocab": list(VOCAB), "ema_decay": ema_decay},
    )
    return model, report


def structure_objective(model, S, x0, t, eps):
    """Noise-prediction loss for prompt ``S*`` and its gradient wrt the embeddings."""
    M = S.shape[0]
    cond = np.broadcast_to(S.mean(axis=0), (x0.shape[0], S.shape[1]))
    loss, _, d_cond = loss_and_grads(model, x0, t, eps, cond)
    return loss, np.broadcast_to(d_cond.sum(axis=0) / M, S.shape).copy()


def init_structure_embeddings(model, token_count, seed):
    if not 1 <= token_count <= 5:
        raise DomainError("token_count must lie in 1..5")
    rng = np.random.default_rng(seed)
    init = model.word_embeddings(["scene"])[0]
    return init + 0.01 * rng.standard_normal((token_count, model.embed_dim))


def train_structure_token(model, images, cfg=OptimConfig(), token_count=1):
    """Textual inversion: learn ``token_count`` embeddings for the prompt ``S*``.

    The caller passes the daytime subset. Only the new embeddings receive
    updates; a checksum comparison enforces that the model stayed frozen.
    """
    images = np.asarray(images, dtype=float)
    if images.shape[0] == 0:
        raise ContractError("train_structure_token needs at least one image")
    start = time.perf_counter()
    before = model.checksum()
    x_all = to_model_space(images)
    params = {"S": init_structure_embeddings(model, token_count, cfg.seed)}
    opt = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    track = _LossTracker()
    for epoch in range(cfg.epochs):
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            t, eps = draw_noise(rng, (len(idx), *x_all.shape[1:]), model.schedule.T)
            loss, g = structure_objective(model, params["S"], x_all[idx], t, eps)
            opt.step(params, {"S": g})
            track.add(loss)
        track.end_epoch("structure", epoch)
    if model.checksum() != before:
        raise FreezeViolation("base model changed during structure-token training")
    tokens = TokenSet("S*", params["S"])
    report = TrainReport(
        track.epoch_losses, track.epoch_losses[-1], asdict(cfg), checksum({"S": tokens.embeddings}),
        time.perf_counter() - start, {"token_count": token_count, "n_images": int(len(x_all))},
    )
    return tokens, report


def context_objective(model, net, x0, v, t, eps):
    """Noise-prediction loss conditioned on context tokens of ``v`` and its net gradients."""
    tokens, cache = net.forward(v)
    M = tokens.shape[1]
    cond = tokens.mean(axis=1)
    loss, _, d_cond = loss_and_grads(model, x0, t, eps, cond)
    d_tokens = np.broadcast_to(d_cond[:, None, :] / M, tokens.shape)
    return loss, net.backward(cache, d_tokens)


def train_context_net(model, images, altitudes, scheme, net, cfg=OptimConfig(), resample=True):
    """Fit the context network on altitude-labelled images; the base stays frozen.

    With ``resample`` the corpus is first balanced over the bins of
    ``scheme`` (with replacement). Returns ``(net, report)``; ``net`` is
    updated in place.
    """
    images = np.asarray(images, dtype=float)
    altitudes = np.asarray(altitudes, dtype=float)
    if images.shape[0] == 0:
        raise ContractError("train_context_net needs a nonempty corpus")
    start = time.perf_counter()
    before = model.checksum()
    if resample:
        order = resample_balanced(altitudes, scheme, seed=cfg.seed)
        images, altitudes = images[order], altitudes[order]
    x_all = to_model_space(images)
    v_all = normalize_values(altitudes, scheme)
    params = net.params()
    opt = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed + 2)
    track = _LossTracker()
    for epoch in range(cfg.epochs):
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            t, eps = draw_noise(rng, (len(idx), *x_all.shape[1:]), model.schedule.T)
            loss, g = context_objective(model, net, x_all[idx], v_all[idx], t, eps)
            opt.step(params, g)
            track.add(loss)
        track.end_epoch("context", epoch)
    if model.checksum() != before:
        raise FreezeViolation("base model changed during context-network training")
    report = TrainReport(
        track.epoch_losses, track.epoch_losses[-1], asdict(cfg), checksum(net.params()),
        time.perf_counter() - start, {"n_items": int(len(x_all)), "n_tokens": net.n_tokens},
    )
    return net, report


def context_validation_loss(model, net, images, altitudes, scheme, seed=0, repeats=4):
    """Fixed-noise estimate of the context objective on held-out data."""
    x0 = to_model_space(images)
    v = normalize_values(altitudes, scheme)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(repeats):
        t, eps = draw_noise(rng, x0.shape, model.schedule.T)
        tokens = net.tokens(v)
        loss, _, _ = loss_and_grads(model, x0, t, eps, tokens.mean(axis=1))
        total += loss
    return total / repeats


def grad_check(loss_fn, params, probe_count=20, step=1e-5, seed=0, grads=None):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)``; ``params`` is a dict of
    float64 arrays perturbed in place and restored. ``grads`` overrides the
    analytic gradient (used to plant faults).
    """
    loss, analytic = loss_fn(params)
    if grads is not None:
        analytic = grads
    if not np.isfinite(loss):
        raise NumericError("non-finite loss at the probe point")
    rng = np.random.default_rng(seed)
    names = [k for k in params if params[k].size]
    sizes = np.array([params[k].size for k in names], dtype=float)
    worst = 0.0
    for _ in range(probe_count):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = params[name]
        i = np.unravel_index(rng.integers(arr.size), arr.shape)
        orig = arr[i]
        arr[i] = orig + step
        fp = loss_fn(params)[0]
        arr[i] = orig - step
        fm = loss_fn(params)[0]
        arr[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss while probing {name}{i}")
        numeric = (fp - fm) / (2.0 * step)
        a = float(np.asarray(analytic[name])[i])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst


def default_generator(model, n=32, seed=0, steps=30, w=7.5):
    def generate(tokens):
        return sample(model, model.context(tokens), steps=steps, w=w, seed=seed, n=n)

    return generate


@dataclass
class Candidate:
    tokens: TokenSet
    lr: float = 0.0
    final_loss: float = float("nan")


def score_candidates(candidates, heldout, generate):
    ref = feature_stats(heldout)
    return [frechet_gaussian(feature_stats(generate(c.tokens)), ref, ridge=1e-6) for c in candidates]


def select_best_embedding(candidates, heldout, generate):
    """Pick the candidate whose generated images sit closest to ``heldout``.

    Ties are broken by fewer tokens, then by lower learning rate. Returns
    ``(best, scores)``.
    """
    if not candidates:
        raise ContractError("select_best_embedding needs at least one candidate")
    if len(candidates) == 1:
        return candidates[0], [float("nan")]
    scores = score_candidates(candidates, heldout, generate)
    best = min(range(len(candidates)), key=lambda i: (scores[i], candidates[i].tokens.count, candidates[i].lr))
    return candidates[best], scores


def sweep_structure(model, images, heldout, lrs=SWEEP_LEARNING_RATES, token_counts=SWEEP_TOKEN_COUNTS, base_cfg=OptimConfig(), generate=None):
    """Grid over learning rates and token counts; returns ``(best, rows)``.

    ``rows`` hold ``(lr, token_count, proxy_fid, final_loss)``.
    """
    generate = generate or default_generator(model)
    cands = []
    for lr in lrs:
        for m in token_counts:
            cfg = OptimConfig(**{**asdict(base_cfg), "lr": lr})
            tokens, rep = train_structure_token(model, images, cfg, m)
            cands.append(Candidate(tokens, lr, rep.final_loss))
    scores = score_candidates(cands, heldout, generate)
    rows = [(c.lr, c.tokens.count, s, c.final_loss) for c, s in zip(cands, scores)]
    best = min(range(len(cands)), key=lambda i: (scores[i], cands[i].tokens.count, cands[i].lr))
    return cands[best], rows


def check_frozen(model, expected_checksum):
    if model.checksum() != expected_checksum:
        raise FreezeViolation("base model checksum drifted")

