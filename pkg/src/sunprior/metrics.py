"""Noise estimation, noise increments and a Frechet distance over image features.

The Frechet distance here is computed on eight handcrafted features, not on
Inception activations, so its scale is unrelated to published FID values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import spearmanr

from .binning import denormalize
from .dataprep import SceneConfig, generate_scene, item_seed
from .diffusion import DEFAULT_GUIDANCE, DEFAULT_STEPS, DEFAULT_SWITCH, sample_partial
from .encoder import context_tokens
from .errors import ContractError, NumericError

SWEEP_ALTITUDES = (0.0, 0.33, 0.66, 1.0)

IMMERKAER_MASK = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])

FEATURE_NAMES = (
    "mean",
    "std",
    "noise_sigma",
    "grad_x",
    "grad_y",
    "top_quartile_mean",
    "bottom_quartile_mean",
    "half_contrast",
)


def estimate_noise_sigma(image):
    """Blind Gaussian noise estimate (Immerkaer 1996).

    The 3x3 mask is the difference of two Laplacians and annihilates affine
    images, so for natural images the response is dominated by noise.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ContractError(f"noise estimation needs a 2-D image of at least 3x3, got {img.shape}")
    h, w = img.shape
    resp = convolve2d(img, IMMERKAER_MASK, mode="valid")
    return float(math.sqrt(math.pi / 2.0) * np.abs(resp).sum() / (6.0 * (w - 2) * (h - 2)))


def mean_noise_sigma(images):
    return float(np.mean([estimate_noise_sigma(im) for im in images]))


def delta_sigma(sigmas):
    s = np.asarray(sigmas, dtype=float)
    if s.ndim != 1 or s.size < 2:
        raise ContractError("delta_sigma needs at least two noise levels")
    return s[1:] - s[:-1]


def extract_features(image):
    img = np.asarray(image, dtype=float)
    flat = np.sort(img.ravel())
    q = max(1, flat.size // 4)
    h = img.shape[0]
    return np.array(
        [
            img.mean(),
            img.std(),
            estimate_noise_sigma(img),
            np.abs(np.diff(img, axis=1)).mean(),
            np.abs(np.diff(img, axis=0)).mean(),
            flat[-q:].mean(),
            flat[:q].mean(),
            img[: h // 2].mean() - img[h // 2 :].mean(),
        ]
    )


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def fit_stats(features):
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ContractError("fit_stats needs at least two samples")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return FeatureStats(mu, 0.5 * (cov + cov.T), x.shape[0])


def _psd_sqrt(m, what):
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    tol = 1e-10 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise NumericError(f"{what} is not positive semidefinite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_gaussian(s1, s2, ridge=0.0):
    """Squared Frechet distance between two Gaussians fitted to features."""
    mu1, mu2 = np.atleast_1d(s1.mean), np.atleast_1d(s2.mean)
    c1, c2 = np.atleast_2d(s1.cov), np.atleast_2d(s2.cov)
    if mu1.shape != mu2.shape or c1.shape != c2.shape:
        raise ContractError(f"dimension mismatch: {mu1.shape} vs {mu2.shape}")
    if ridge:
        eye = ridge * np.eye(c1.shape[0])
        c1, c2 = c1 + eye, c2 + eye
    r1 = _psd_sqrt(c1, "first covariance")
    _psd_sqrt(c2, "second covariance")
    inner = _psd_sqrt(r1 @ c2 @ r1, "covariance product")
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * np.trace(inner))
    if d < -1e-8:
        raise NumericError(f"negative Frechet distance {d}")
    return max(d, 0.0)


def feature_stats(images):
    return fit_stats(np.stack([extract_features(im) for im in images]))


def spearman(x, y):
    r = spearmanr(x, y).statistic
    return 0.0 if math.isnan(r) else float(r)


@dataclass
class EvalReport:
    """Per-condition generated and ground-truth statistics for one sweep."""

    rows: list
    delta_sigma: list
    delta_sigma_gt: list
    images: dict
    settings: dict

    def to_json(self):
        return {"rows": self.rows, "delta_sigma": self.delta_sigma, "delta_sigma_gt": self.delta_sigma_gt, "settings": self.settings}

    def table(self):
        """Aligned text table: one column per condition, one row per quantity."""
        heads = [f"{r['normalized']:.2f}" for r in self.rows]
        lines = [
            ("altitude (deg)", [f"{r['altitude_deg']:.2f}" for r in self.rows]),
            ("luminance", [f"{r['luminance']:.4f}" for r in self.rows]),
            ("luminance (GT)", [f"{r['luminance_gt']:.4f}" for r in self.rows]),
            ("sigma", [f"{r['sigma']:.5f}" for r in self.rows]),
            ("sigma (GT)", [f"{r['sigma_gt']:.5f}" for r in self.rows]),
            ("delta sigma", [""] + [f"{d:+.5f}" for d in self.delta_sigma]),
            ("delta sigma (GT)", [""] + [f"{d:+.5f}" for d in self.delta_sigma_gt]),
            ("frechet proxy", [f"{r['frechet_proxy']:.5f}" for r in self.rows]),
        ]
        width = max(12, *(len(h) for h in heads))
        label_w = max(len(name) for name, _ in lines)
        out = ["condition".ljust(label_w) + "".join(h.rjust(width) for h in heads)]
        out.append("-" * len(out[0]))
        for name, cells in lines:
            out.append(name.ljust(label_w) + "".join(c.rjust(width) for c in cells))
        return "\n".join(out) + "\n"


def eval_sweep(
    model,
    tokens,
    net,
    scheme,
    altitudes=SWEEP_ALTITUDES,
    n_per_condition=64,
    seed=0,
    scene_cfg=SceneConfig(),
    steps=DEFAULT_STEPS,
    switch_step=DEFAULT_SWITCH,
    w=DEFAULT_GUIDANCE,
    ridge=1e-6,
):
    """Generate ``n_per_condition`` images per normalized altitude and score them.

    Each condition samples with the context tokens of its altitude for the
    first ``switch_step`` steps and the structure tokens ``tokens`` after,
    from a seed derived from ``(seed, condition index)``. Ground truth comes
    from the scene generator at the same altitude.
    """
    if len(altitudes) < 2:
        raise ContractError("eval_sweep needs at least two conditions")
    structure = model.context(tokens)
    rows, images = [], {}
    for i, v in enumerate(altitudes):
        a = denormalize(v, scheme)
        ctx = model.context(context_tokens(a, scheme, net))
        gen = sample_partial(model, ctx, structure, steps, switch_step, w, seed=int(item_seed(seed, i)), n=n_per_condition)
        gt_seed = int(item_seed(seed + 1, i))
        gt = np.stack([generate_scene(a, scene_cfg, int(item_seed(gt_seed, j)))[0] for j in range(n_per_condition)])
        rows.append(
            {
                "normalized": float(v),
                "altitude_deg": float(a),
                "luminance": float(gen.mean()),
                "luminance_gt": float(gt.mean()),
                "sigma": mean_noise_sigma(gen),
                "sigma_gt": mean_noise_sigma(gt),
                "frechet_proxy": frechet_gaussian(feature_stats(gen), feature_stats(gt), ridge=ridge),
            }
        )
        images[float(v)] = gen
    settings = {
        "n_per_condition": n_per_condition,
        "seed": seed,
        "steps": steps,
        "switch_step": switch_step,
        "guidance": w,
        "ridge": ridge,
        "noise_estimator": "Immerkaer (1996) fast blind estimator",
        "frechet_features": list(FEATURE_NAMES),
    }
    return EvalReport(
        rows,
        delta_sigma([r["sigma"] for r in rows]).tolist(),
        delta_sigma([r["sigma_gt"] for r in rows]).tolist(),
        images,
        settings,
    )
