"""Dynamic context tokens from a normalized altitude.

normalized altitude -> RBF features (fixed uniform centers, trainable
widths) -> SALN: layer-normalized static embeddings scaled and shifted by
affine maps of the features. The untrained network is the identity
modulation, so its tokens equal ``LN(base)`` for every altitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .artifacts import load_container, save_container
from .binning import normalize
from .errors import ContractError, DomainError


@dataclass
class TokenSet:
    name: str
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if self.embeddings.shape[0] < 1:
            raise ContractError("a token set needs at least one embedding")
        if not np.all(np.isfinite(self.embeddings)):
            raise ContractError(f"token set {self.name!r} has non-finite entries")

    @property
    def count(self):
        return self.embeddings.shape[0]

    def save(self, path, meta=None):
        save_container(path, "token_set", {"embeddings": self.embeddings}, {"name": self.name, **(meta or {})})

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path, "token_set")
        return cls(meta["name"], arrays["embeddings"])


@dataclass
class RbfLayer:
    log_gamma: np.ndarray

    @classmethod
    def init(cls, n_centers=16):
        if n_centers < 2:
            raise DomainError("an RBF layer needs at least two centers")
        spacing = 1.0 / (n_centers - 1)
        return cls(np.full(n_centers, np.log(1.0 / (2.0 * spacing**2))))

    @property
    def centers(self):
        return np.linspace(0.0, 1.0, len(self.log_gamma))

    @property
    def gammas(self):
        return np.exp(self.log_gamma)


def rbf_encode(v, layer, log_gamma=None):
    """``phi_j = exp(-gamma_j (v - c_j)^2)`` for scalar or 1-D ``v`` in [0, 1]."""
    v_arr = np.asarray(v, dtype=float)
    if np.any(v_arr < 0.0) or np.any(v_arr > 1.0) or not np.all(np.isfinite(v_arr)):
        raise DomainError(f"RBF input outside [0, 1]: {v}")
    lg = layer.log_gamma if log_gamma is None else log_gamma
    diff = v_arr[..., None] - layer.centers
    return np.exp(-np.exp(lg) * diff * diff)


def rbf_backward(v, layer, phi, d_phi, log_gamma=None):
    """Gradient wrt log-gamma, summed over the batch."""
    lg = layer.log_gamma if log_gamma is None else log_gamma
    diff = np.asarray(v, dtype=float)[..., None] - layer.centers
    d = d_phi * phi * (-np.exp(lg) * diff * diff)
    return d.reshape(-1, d.shape[-1]).sum(axis=0)


def rbf_derivative(v, layer):
    """Analytic d(phi)/dv."""
    diff = np.asarray(v, dtype=float)[..., None] - layer.centers
    return -2.0 * layer.gammas * diff * rbf_encode(v, layer)


@dataclass
class SalnParams:
    W_scale: np.ndarray  # (J, d)
    b_scale: np.ndarray  # (d,)
    W_shift: np.ndarray
    b_shift: np.ndarray
    base: np.ndarray  # (M, d) static embeddings
    eps: float = 1e-5

    @classmethod
    def init(cls, n_features, n_tokens, dim, seed=0, eps=1e-5):
        if not 1 <= n_tokens <= 5:
            raise DomainError("token count must lie in 1..5")
        rng = np.random.default_rng(seed)
        return cls(
            np.zeros((n_features, dim)),
            np.ones(dim),
            np.zeros((n_features, dim)),
            np.zeros(dim),
            rng.normal(0.0, 1.0, size=(n_tokens, dim)),
            eps,
        )


def saln_forward(p, h):
    """Modulate ``base`` with features ``h`` of shape ``(J,)`` or ``(B, J)``.

    Returns the ``(M, d)`` or ``(B, M, d)`` tokens and a backward cache.
    """
    h = np.asarray(h, dtype=float)
    xhat, inv = layers.layer_norm(p.base, p.eps)
    scale = h @ p.W_scale + p.b_scale
    shift = h @ p.W_shift + p.b_shift
    out = scale[..., None, :] * xhat + shift[..., None, :]
    return out, (h, xhat, inv, scale)


def saln_modulate(params, features):
    return saln_forward(params, features)[0]


def saln_backward(p, cache, d_out):
    """Gradients for all SALN parameters plus the feature gradient."""
    h, xhat, inv, scale = cache
    h2 = h.reshape(-1, h.shape[-1])
    d_out2 = d_out.reshape(h2.shape[0], *d_out.shape[-2:])
    scale2 = scale.reshape(h2.shape[0], -1)
    d_scale = (d_out2 * xhat).sum(axis=1)
    d_shift = d_out2.sum(axis=1)
    d_xhat = (d_out2 * scale2[:, None, :]).sum(axis=0)
    g = {
        "W_scale": h2.T @ d_scale,
        "b_scale": d_scale.sum(axis=0),
        "W_shift": h2.T @ d_shift,
        "b_shift": d_shift.sum(axis=0),
        "base": layers.layer_norm_backward(xhat, inv, d_xhat),
    }
    d_h = d_scale @ p.W_scale.T + d_shift @ p.W_shift.T
    return g, d_h.reshape(h.shape)


PARAM_KEYS = ("log_gamma", "W_scale", "b_scale", "W_shift", "b_shift", "base")


@dataclass
class ContextNet:
    rbf: RbfLayer
    saln: SalnParams

    @classmethod
    def init(cls, n_tokens=1, dim=32, n_centers=16, seed=0):
        return cls(RbfLayer.init(n_centers), SalnParams.init(n_centers, n_tokens, dim, seed))

    @property
    def n_tokens(self):
        return self.saln.base.shape[0]

    @property
    def dim(self):
        return self.saln.base.shape[1]

    def params(self):
        """Live views of the trainable arrays, keyed by name."""
        return {
            "log_gamma": self.rbf.log_gamma,
            "W_scale": self.saln.W_scale,
            "b_scale": self.saln.b_scale,
            "W_shift": self.saln.W_shift,
            "b_shift": self.saln.b_shift,
            "base": self.saln.base,
        }

    def copy(self):
        p = {k: v.copy() for k, v in self.params().items()}
        return ContextNet.from_params(p, self.saln.eps)

    @classmethod
    def from_params(cls, p, eps=1e-5):
        return cls(
            RbfLayer(np.asarray(p["log_gamma"], dtype=float)),
            SalnParams(*(np.asarray(p[k], dtype=float) for k in PARAM_KEYS[1:]), eps=eps),
        )

    def forward(self, v):
        phi = rbf_encode(v, self.rbf)
        tokens, cache = saln_forward(self.saln, phi)
        return tokens, (np.asarray(v, dtype=float), phi, cache)

    def backward(self, cache, d_tokens):
        v, phi, saln_cache = cache
        g, d_phi = saln_backward(self.saln, saln_cache, d_tokens)
        g["log_gamma"] = rbf_backward(v, self.rbf, phi, d_phi)
        return g

    def tokens(self, v):
        return self.forward(v)[0]

    def save(self, path, meta=None):
        save_container(path, "context_net", self.params(), {"eps": self.saln.eps, **(meta or {})})

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path, "context_net")
        return cls.from_params(arrays, meta.get("eps", 1e-5))


def context_tokens(a, scheme, net, clamp=False):
    """Token set ``D*`` for altitude ``a`` in degrees."""
    v = normalize(a, scheme, clamp=clamp).value
    return TokenSet("D*", net.tokens(v))
