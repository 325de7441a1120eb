"""Differentiable volume rendering.

Rays are sampled inside [t_n, t_f]; per-sample density and color are
alpha-composited with the standard quadrature

    alpha_i = 1 - exp(-sigma_i * delta_i),   delta_i = t_{i+1} - t_i,
    T_i     = exp(-sum_{j<i} sigma_j delta_j),
    w_i     = T_i * alpha_i,

the last interval width being t_f - t_N.  Transmittance is computed from
the exclusive prefix sum of sigma*delta, which makes T_1 = 1 and the
weight total 1 - exp(-sum tau) <= 1 exact by construction.  Color is
sum w_i c_i, expected depth is sum w_i t_i; a background-completed depth
(misses pushed to t_f) is carried alongside for depth supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import gnerf


@dataclass(frozen=True)
class QuadratureConfig:
    n_samples: int = 64
    stratified: bool = False
    t_n: float = 1.0
    t_f: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least two samples per ray")
        if not (self.t_n < self.t_f):
            raise ValueError("require t_n < t_f")


def sample_ts(config, n_rays=None, rng=None):
    """Quadrature depths: [S] midpoints, or [N,S] stratified draws."""
    edges = np.linspace(config.t_n, config.t_f, config.n_samples + 1)
    if not config.stratified:
        return 0.5 * (edges[:-1] + edges[1:])
    rng = rng or np.random.default_rng(config.seed)
    n = n_rays or 1
    width = (config.t_f - config.t_n) / config.n_samples
    u = rng.uniform(0.0, 1.0, size=(n, config.n_samples))
    ts = edges[:-1][None, :] + u * width
    return ts if n_rays is not None else ts[0]


def sample_along_ray(ray, config, rng=None):
    """Sorted sample depths for one ray (clipped to the ray's own bounds)."""
    cfg = replace(config, t_n=max(config.t_n, ray.t_n), t_f=min(config.t_f, ray.t_f))
    return sample_ts(cfg, rng=rng)


@dataclass
class CompositeResult:
    """Per-ray compositing outputs (tensors when recorded on a tape)."""

    color: ad.Tensor          # [...,3]
    depth: ad.Tensor          # [...]   expected termination depth, raw integrand
    depth_bg: ad.Tensor       # [...]   depth with missed mass assigned to t_f
    weights: ad.Tensor        # [...,S]
    transmittance: ad.Tensor  # [...,S]
    opacity: ad.Tensor        # [...]   accumulated weight total
    t: np.ndarray

    def check_invariants(self, atol=1e-6):
        T = self.transmittance.values
        if not np.allclose(T[..., 0], 1.0, atol=atol):
            raise AssertionError("transmittance must start at 1")
        if np.any(np.diff(T, axis=-1) > atol):
            raise AssertionError("transmittance must be nonincreasing")
        acc = self.opacity.values
        if np.any(acc < -atol) or np.any(acc > 1 + atol):
            raise AssertionError("weight total outside [0, 1]")


def composite(sigma, color, t, t_f):
    """Alpha-composite per-sample (sigma, color) along the last sample axis.

    sigma: [...,S] nonnegative densities; color: [...,S,3]; t: [S] or
    [...,S] sample depths (data, not differentiated); t_f: far bound used
    for the final interval width.
    """
    sigma = ad.as_tensor(sigma)
    color = ad.as_tensor(color)
    t = np.asarray(t, dtype=np.float64)
    s = sigma.values.shape[-1]
    if t.shape[-1] != s or color.values.shape[-2] != s:
        raise ValueError("sigma, color and t must agree on the sample count")
    if sigma.values.size == 0:
        raise ValueError("composite needs at least one sample")
    if np.any(sigma.values < 0):
        raise ValueError("negative density passed to composite")
    delta = np.concatenate([np.diff(t, axis=-1),
                            np.broadcast_to(t_f - t[..., -1:], t.shape[:-1] + (1,))],
                           axis=-1)
    if np.any(delta < -1e-9):
        raise ValueError("sample depths must be increasing and below t_f")
    delta = np.maximum(delta, 0.0).astype(sigma.dtype)
    tau = ad.mul(sigma, delta)
    transmittance = ad.exp(ad.neg(ad.cumsum_exclusive(tau, axis=-1)))
    alpha = ad.sub(1.0, ad.exp(ad.neg(tau)))
    weights = ad.mul(transmittance, alpha)
    w3 = ad.reshape(weights, weights.values.shape + (1,))
    out_color = ad.reduce_sum(ad.mul(w3, color), axes=(-2,))
    t_cast = np.broadcast_to(t, sigma.values.shape).astype(sigma.dtype)
    depth = ad.reduce_sum(ad.mul(weights, t_cast), axes=(-1,))
    opacity = ad.reduce_sum(weights, axes=(-1,))
    depth_bg = ad.add(depth, ad.mul(ad.sub(1.0, opacity), float(t_f)))
    return CompositeResult(out_color, depth, depth_bg, weights, transmittance,
                           opacity, t)


def composite_mixed(sigma_a, color_a, sigma_b, color_b, t, t_f,
                    sigma_source="a", color_source="a"):
    """Composite with density and color drawn from two evaluations A and B
    of the same rays on the same sample grid (the mixing ablation)."""
    sa, sb = ad.as_tensor(sigma_a), ad.as_tensor(sigma_b)
    ca, cb = ad.as_tensor(color_a), ad.as_tensor(color_b)
    if sa.values.shape != sb.values.shape or ca.values.shape != cb.values.shape:
        raise ValueError("A and B evaluations must share the sample grid")
    if sigma_source not in ("a", "b") or color_source not in ("a", "b"):
        raise ValueError("sigma_source/color_source must be 'a' or 'b'")
    sigma = sa if sigma_source == "a" else sb
    color = ca if color_source == "a" else cb
    return composite(sigma, color, t, t_f)


# ---------------------------------------------------------------------------
# model-driven rendering


def full_frame_pixels(intr):
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


def render_samples(weights_params, config, sources, pose, intr, qcfg,
                   pixels, deltas=None, rng=None, encoded=None):
    """Per-sample field evaluation along the rays of the given pixels.

    Returns (sigma [N,S], color [N,S,3], t, dirs [N,3]).  `encoded` can
    carry (featmaps, images_chw) from `gnerf.encode_sources` to reuse one
    encoding across many batches.
    """
    from . import geometry as geo

    pixels = np.asarray(pixels)
    n = pixels.shape[0]
    origins, dirs = geo.rays_for_pixels(intr, pose, pixels.astype(np.float64))
    ts = sample_ts(qcfg, n_rays=n if qcfg.stratified else None, rng=rng)
    tpts = ts if ts.ndim == 2 else np.broadcast_to(ts, (n, qcfg.n_samples))
    pts = origins[:, None, :] + tpts[:, :, None] * dirs[:, None, :]
    flat_pts = pts.reshape(-1, 3)
    flat_dirs = np.repeat(dirs, qcfg.n_samples, axis=0)
    if encoded is None:
        encoded = gnerf.encode_sources(weights_params, config, sources, deltas)
    featmaps, images_chw = encoded
    featset = gnerf.gather_features(featmaps, sources.poses, sources.intrinsics,
                                    flat_pts)
    sigma, color = gnerf.field_eval(weights_params, config, flat_pts, flat_dirs,
                                    featset, source_images_chw=images_chw)
    sigma = ad.reshape(sigma, (n, qcfg.n_samples))
    color = ad.reshape(color, (n, qcfg.n_samples, 3))
    return sigma, color, ts, dirs


def render_view(weights_params, config, sources, pose, intr, qcfg,
                pixels=None, deltas=None, rng=None, encoded=None):
    """Render a pixel batch (or the full frame) through the model.

    Returns a CompositeResult whose leading axis matches the pixel batch.
    Attaching an all-zero perturbation is bit-identical to no perturbation.
    """
    if pixels is None:
        pixels = full_frame_pixels(intr)
    sigma, color, ts, _ = render_samples(weights_params, config, sources, pose,
                                         intr, qcfg, pixels, deltas=deltas,
                                         rng=rng, encoded=encoded)
    return composite(sigma, color, ts, qcfg.t_f)


def render_image(weights, sources, pose, intr, qcfg, deltas=None, chunk=2048):
    """Full-frame render without gradient recording.

    Returns (image [H,W,3], depth_bg [H,W], opacity [H,W]) as float
    arrays; chunking keeps memory flat and does not change values.
    """
    params = weights.params
    config = weights.config
    pixels = full_frame_pixels(intr)
    encoded = gnerf.encode_sources(params, config, sources, deltas)
    colors, depths, accs = [], [], []
    for start in range(0, pixels.shape[0], chunk):
        res = render_view(params, config, sources, pose, intr, qcfg,
                          pixels=pixels[start:start + chunk], encoded=encoded)
        colors.append(res.color.values)
        depths.append(res.depth_bg.values)
        accs.append(res.opacity.values)
    h, w = intr.height, intr.width
    image = np.concatenate(colors, axis=0).reshape(h, w, 3)
    depth = np.concatenate(depths, axis=0).reshape(h, w)
    acc = np.concatenate(accs, axis=0).reshape(h, w)
    return image, depth, acc
