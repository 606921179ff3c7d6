"""Synthetic illumination scenes and metadata ingestion.

The synthetic ground truth encodes the premise being tested: luminance
follows a logistic in solar altitude (steep through twilight, flat near the
zenith) and sensor noise falls as the scene gets brighter.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from .binning import bin_indices, normalize_values
from .errors import ContractError, DomainError, ParseError
from .records import GeoSample, sample_from_dict

# building reflectances relative to the sky luminance
ALBEDOS = (0.35, 0.5, 0.65)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 32
    height: int = 32
    l_day: float = 0.8
    l_night: float = 0.05
    twilight_slope: float = 1.0 / 3.0
    sigma_min: float = 0.005
    sigma_max: float = 0.06
    # sensor black level; keeps night noise away from the clamp at 0
    black_level: float = 0.1
    geometry_seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.l_night < self.l_day <= 1.0:
            raise DomainError("need 0 <= l_night < l_day <= 1")
        if not 0.0 <= self.sigma_min <= self.sigma_max:
            raise DomainError("need 0 <= sigma_min <= sigma_max")
        if self.twilight_slope <= 0:
            raise DomainError("twilight slope must be positive")
        if not 0.0 <= self.black_level < 1.0:
            raise DomainError("black level must lie in [0, 1)")


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def brightness_model(altitude_deg, cfg=SceneConfig()):
    s = _logistic(cfg.twilight_slope * np.asarray(altitude_deg, dtype=float))
    out = cfg.l_night + (cfg.l_day - cfg.l_night) * s
    return float(out) if np.ndim(out) == 0 else out


def noise_model(altitude_deg, cfg=SceneConfig()):
    s = _logistic(cfg.twilight_slope * np.asarray(altitude_deg, dtype=float))
    out = cfg.sigma_min + (cfg.sigma_max - cfg.sigma_min) * (1.0 - s)
    return float(out) if np.ndim(out) == 0 else out


def synthetic_timestamp(altitude_deg):
    """A morning equinox time at (0, 0) whose sun roughly sits at ``altitude_deg``."""
    noon = datetime(2024, 3, 20, 12, 7, tzinfo=timezone.utc)
    return noon - timedelta(hours=(90.0 - altitude_deg) / 15.0)


def _layout(rng, cfg):
    h, w = cfg.height, cfg.width
    horizon = int(round(0.62 * h)) + int(rng.integers(-2, 3))
    buildings = []
    for _ in range(int(rng.integers(1, 4))):
        bw = int(rng.integers(max(2, w // 8), max(3, w // 3)))
        bh = int(rng.integers(max(2, h // 8), max(3, int(0.45 * h))))
        x0 = int(rng.integers(0, w - bw + 1))
        albedo = ALBEDOS[int(rng.integers(len(ALBEDOS)))]
        buildings.append((x0, bw, bh, albedo))
    return horizon, buildings


def render_reflectance(rng, cfg):
    """Relative reflectance map in [0, 1] before lighting and noise."""
    h, w = cfg.height, cfg.width
    horizon, buildings = _layout(rng, cfg)
    rows = np.arange(h, dtype=float)[:, None]
    refl = np.where(rows < horizon, 1.0 - 0.35 * rows / max(horizon, 1), 0.45 + 0.1 * (rows - horizon) / h)
    refl = np.broadcast_to(refl, (h, w)).copy()
    refl[horizon : horizon + 2, :] = 0.12
    for x0, bw, bh, albedo in buildings:
        refl[max(0, horizon - bh) : horizon, x0 : x0 + bw] = albedo
    return refl


def generate_scene(altitude_deg, cfg=SceneConfig(), seed=0):
    """Render one grayscale scene; returns ``(image, GeoSample)``."""
    rng = np.random.default_rng(seed)
    geo_rng = rng if cfg.geometry_seed is None else np.random.default_rng(cfg.geometry_seed)
    refl = render_reflectance(geo_rng, cfg)
    lum = brightness_model(altitude_deg, cfg)
    sigma = noise_model(altitude_deg, cfg)
    clean = cfg.black_level + lum * refl
    noisy = clean + sigma * rng.standard_normal(clean.shape) if sigma > 0 else clean
    image = np.clip(noisy, 0.0, 1.0)
    rec = GeoSample(0.0, 0.0, synthetic_timestamp(altitude_deg), frozenset({"synthetic"}), float(altitude_deg))
    return image, rec


@dataclass
class Corpus:
    images: np.ndarray  # (N, H, W) in [0, 1]
    altitudes: np.ndarray  # (N,) degrees

    def __len__(self):
        return len(self.altitudes)

    def subset(self, mask_or_index):
        return Corpus(self.images[mask_or_index], self.altitudes[mask_or_index])


def item_seed(base_seed, index):
    return np.random.SeedSequence([base_seed, index]).generate_state(1)[0]


def build_corpus(scheme, per_bin, cfg=SceneConfig(), seed=0):
    """``per_bin`` scenes per bin, altitudes uniform inside each bin."""
    if per_bin < 1:
        raise ContractError("per_bin must be >= 1")
    rng = np.random.default_rng(seed)
    alts = np.concatenate([rng.uniform(*scheme.interval(k), size=per_bin) for k in range(scheme.K)])
    images = np.stack([generate_scene(a, cfg, item_seed(seed, i))[0] for i, a in enumerate(alts)])
    return Corpus(images, alts)


def ingest_metadata(lines, strict=False):
    """Parse JSONL records into :class:`GeoSample` objects.

    Returns ``(samples, errors)`` where errors are :class:`ParseError` with
    1-based line numbers. Blank lines are skipped.
    """
    samples, errors = [], []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            samples.append(sample_from_dict(obj, lineno))
        except ParseError as exc:
            if strict:
                raise
            errors.append(exc)
    return samples, errors


def filter_rain(samples):
    return [s for s in samples if "rain" not in s.tags]


def daytime_mask(altitudes, threshold=0.0):
    """True for daytime samples (altitude above ``threshold``)."""
    return np.asarray(altitudes) > threshold


def mini_subset(n, fraction, seed=0):
    """Sorted indices of a seeded ``fraction`` of ``n`` items (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError("subset fraction must lie in (0, 1]")
    if n < 1:
        raise ContractError("cannot take a subset of nothing")
    k = max(1, int(round(fraction * n)))
    return np.sort(np.random.default_rng(seed).permutation(n)[:k])


def write_manifest(path, paths, altitudes, scheme):
    norm = normalize_values(altitudes, scheme)
    bins = bin_indices(altitudes, scheme)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "altitude_deg", "normalized", "bin"])
        for p, a, v, b in zip(paths, altitudes, norm, bins):
            w.writerow([p, f"{a:.6f}", f"{v:.6f}", int(b)])


def read_manifest(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["altitude_deg"] = float(r["altitude_deg"])
        r["normalized"] = float(r["normalized"])
        r["bin"] = int(r["bin"])
    return rows

