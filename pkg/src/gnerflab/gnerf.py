"""Source-view-conditioned radiance field.

A small convolutional encoder turns each source view into a same-resolution
feature map.  Query points are projected into every source view, features
are gathered by bilinear lookup, pooled across views by a masked
mean+variance (permutation invariant), and an MLP maps positional
encodings plus pooled features to density and color.

Two color heads are available:

* ``regress`` (default): the MLP regresses RGB directly.
* ``blend``: the MLP scores each source view and the output color blends
  the source-view RGB values sampled at the projections.

Model parameters are plain numpy arrays; wrap them in tracked tensors
(``weights.bind(trainable=True)``) for a training step, or pass them as-is
for frozen evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import geometry as geo

COLOR_MODES = ("regress", "blend")


@dataclass(frozen=True)
class ModelConfig:
    enc_channels: tuple = (16, 16, 16)
    kernel: int = 3
    mlp_width: int = 64
    mlp_depth: int = 4
    pe_x: int = 6
    pe_d: int = 2
    color_mode: str = "regress"

    def __post_init__(self):
        if self.color_mode not in COLOR_MODES:
            raise ValueError(f"color_mode must be one of {COLOR_MODES}")
        if self.kernel % 2 == 0:
            raise ValueError("encoder kernel must be odd")

    @property
    def feat_dim(self):
        return self.enc_channels[-1]

    @property
    def mlp_in_dim(self):
        return (3 + 6 * self.pe_x) + (3 + 6 * self.pe_d) + 2 * self.feat_dim

    def to_dict(self):
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        return ModelConfig(**d)


@dataclass
class ModelWeights:
    """Encoder + field parameters with their architecture descriptor."""

    config: ModelConfig
    params: dict

    def bind(self, trainable=False):
        """Tensor view of the parameters (tracked leaves when trainable)."""
        return {k: ad.Tensor(v, requires_grad=trainable) for k, v in self.params.items()}

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def check_finite(self):
        for k, v in self.params.items():
            if not np.isfinite(v).all():
                raise ValueError(f"parameter {k} contains non-finite values")


def init_weights(config=None, seed=0, dtype=np.float32):
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    params = {}
    cin = 3
    for i, cout in enumerate(config.enc_channels):
        std = np.sqrt(2.0 / (cin * config.kernel ** 2))
        params[f"enc{i}.w"] = rng.normal(0, std, (cout, cin, config.kernel, config.kernel))
        params[f"enc{i}.b"] = np.zeros(cout)
        cin = cout
    din = config.mlp_in_dim
    for i in range(config.mlp_depth):
        dout = config.mlp_width
        lim = np.sqrt(6.0 / (din + dout))
        params[f"trunk{i}.w"] = rng.uniform(-lim, lim, (din, dout))
        params[f"trunk{i}.b"] = np.zeros(dout)
        din = dout
    w = config.mlp_width
    params["sigma.w"] = rng.uniform(-1, 1, (w, 1)) * np.sqrt(6.0 / (w + 1))
    params["sigma.b"] = np.full(1, -1.0)
    if config.color_mode == "regress":
        params["color.w"] = rng.uniform(-1, 1, (w, 3)) * np.sqrt(6.0 / (w + 3))
        params["color.b"] = np.zeros(3)
    else:
        bin_dim = w + config.feat_dim
        params["blend.w"] = rng.uniform(-1, 1, (bin_dim, 1)) * np.sqrt(6.0 / (bin_dim + 1))
        params["blend.b"] = np.zeros(1)
    params = {k: v.astype(dtype) for k, v in params.items()}
    return ModelWeights(config, params)


def save_weights(path, weights):
    names = list(weights.params.keys())
    arrays = [weights.params[k] for k in names]
    meta = {"arch": weights.config.to_dict(), "names": names}
    ad.save_nft1(path, arrays, meta=meta)


def load_weights(path):
    arrays, meta = ad.load_nft1(path)
    config = ModelConfig.from_dict(meta["arch"])
    params = dict(zip(meta["names"], arrays))
    return ModelWeights(config, params)


# ---------------------------------------------------------------------------
# source views


@dataclass
class SourceViewSet:
    """The N posed images a rendering is conditioned on."""

    images: list          # [H,W,3] float arrays in [0,1]
    poses: list
    intrinsics: list

    def __post_init__(self):
        n = len(self.images)
        if n < 1:
            raise ValueError("need at least one source view")
        if not (len(self.poses) == len(self.intrinsics) == n):
            raise ValueError("images/poses/intrinsics length mismatch")
        shape = np.shape(self.images[0])
        for img in self.images:
            if np.shape(img) != shape:
                raise ValueError("source images must share extents")
            lo, hi = float(np.min(img)), float(np.max(img))
            if lo < -1e-6 or hi > 1 + 1e-6:
                raise ValueError("source pixels must lie in [0,1] before perturbation")

    def __len__(self):
        return len(self.images)


def encode(params, config, image):
    """Encoder feature map for one image ([H,W,3] -> [C,H,W], stride 1)."""
    x = ad.as_tensor(image)
    if x.values.ndim != 3 or x.values.shape[2] != 3:
        raise ValueError("encode expects an [H,W,3] image")
    h = ad.transpose(x, (2, 0, 1))
    pad = config.kernel // 2
    last = len(config.enc_channels) - 1
    for i in range(len(config.enc_channels)):
        w, b = params[f"enc{i}.w"], params[f"enc{i}.b"]
        cout = ad.as_tensor(w).values.shape[0]
        h = ad.conv2d(h, w, stride=1, padding=pad)
        h = ad.add(h, ad.reshape(b, (cout, 1, 1)))
        if i != last:
            h = ad.relu(h)
    return h


def encode_sources(params, config, sources, deltas=None):
    """Feature maps and [3,H,W] inputs for every source view.

    When perturbations are attached, each model input is
    clamp(image + delta, 0, 1); gradients flow into the deltas.
    """
    featmaps, images_chw = [], []
    for i, img in enumerate(sources.images):
        x = ad.as_tensor(img)
        if deltas is not None and deltas[i] is not None:
            x = ad.clamp(ad.add(x, deltas[i]), 0.0, 1.0)
        featmaps.append(encode(params, config, x))
        images_chw.append(ad.transpose(x, (2, 0, 1)))
    return featmaps, images_chw


@dataclass
class FeatureSet:
    """Per-point, per-view gathered features with validity masks.

    feats[i] is the [N,C] tensor for view i with masked-out rows exactly
    zero; valid is the [V,N] boolean mask (in-bounds and in front of the
    camera); coords[i] holds the [N,2] center-origin sample coordinates.
    """

    feats: list
    valid: np.ndarray
    coords: list


def gather_features(featmaps, poses, intrinsics, pts):
    """Project points into each view and bilinearly gather features.

    Behind-camera projections are pushed to a far out-of-bounds coordinate,
    so the bilinear lookup itself returns exact zeros for every invalid
    point; no separate masking pass is needed.
    """
    pts = np.asarray(pts, dtype=np.float64)
    feats, valids, coords = [], [], []
    for fm, pose, intr in zip(featmaps, poses, intrinsics):
        h, w = intr.height, intr.width
        u, v, depth, behind = geo.project(intr, pose, pts)
        cu, cv = u - 0.5, v - 0.5
        ok = (~behind & (cu >= 0) & (cu <= w - 1) & (cv >= 0) & (cv <= h - 1))
        cc = np.stack([np.where(ok, cu, -1e9), np.where(ok, cv, -1e9)], axis=1)
        samples, inside = ad.bilinear_sample(fm, cc)
        feats.append(samples)
        valids.append(ok)
        coords.append(cc)
    return FeatureSet(feats, np.stack(valids, axis=0), coords)


def positional_encoding(x, n_freq):
    """[x, sin(2^j x), cos(2^j x)] for j < n_freq, concatenated per channel."""
    x = np.asarray(x)
    parts = [x]
    for j in range(n_freq):
        parts.append(np.sin((2.0 ** j) * x))
        parts.append(np.cos((2.0 ** j) * x))
    return np.concatenate(parts, axis=-1)


def aggregate_mean_var(featset):
    """Masked mean and population variance across views.

    Summation runs over view-sorted values, which makes the result exactly
    invariant to source-view permutation; excluded views contribute nothing
    and zero valid views produce zero aggregates.
    """
    stacked = ad.stack(featset.feats, axis=0)          # [V,N,C]
    valid = featset.valid.astype(stacked.dtype)        # [V,N]
    cnt = valid.sum(axis=0)                            # [N]
    inv = (1.0 / np.maximum(cnt, 1.0)).astype(stacked.dtype)[:, None]
    mean = ad.mul(ad.sorted_sum(stacked, axis=0), inv)
    dev = ad.mul(ad.sub(stacked, mean), valid[:, :, None])
    var = ad.mul(ad.sorted_sum(ad.mul(dev, dev), axis=0), inv)
    return mean, var, cnt


def field_eval(params, config, pts, dirs, featset, source_images_chw=None):
    """Density and color at query points: (sigma [N], color [N,3]).

    dirs must be unit vectors.  With the blend color head,
    source_images_chw supplies the per-view RGB maps to mix.
    """
    pts = np.asarray(pts, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-5):
        raise ValueError("view directions must be unit length")
    dtype = ad.as_tensor(params["trunk0.w"]).dtype
    pe = np.concatenate([positional_encoding(pts.astype(dtype), config.pe_x),
                         positional_encoding(dirs.astype(dtype), config.pe_d)],
                        axis=1)
    mean, var, cnt = aggregate_mean_var(featset)
    h = ad.concat([ad.Tensor(pe), mean, var], axis=1)
    for i in range(config.mlp_depth):
        h = ad.add(ad.matmul(h, params[f"trunk{i}.w"]), params[f"trunk{i}.b"])
        h = ad.relu(h)
    sigma = ad.softplus(ad.add(ad.matmul(h, params["sigma.w"]), params["sigma.b"]))
    sigma = ad.reshape(sigma, (pts.shape[0],))
    if config.color_mode == "regress":
        color = ad.sigmoid(ad.add(ad.matmul(h, params["color.w"]), params["color.b"]))
    else:
        color = _blend_color(params, h, featset, source_images_chw)
    return sigma, color


def _blend_color(params, h, featset, source_images_chw):
    if source_images_chw is None:
        raise ValueError("blend color head needs the source images")
    logits, rgbs = [], []
    for i, feats in enumerate(featset.feats):
        li = ad.add(ad.matmul(ad.concat([h, feats], axis=1), params["blend.w"]),
                    params["blend.b"])
        logits.append(li)
        samples, _ = ad.bilinear_sample(source_images_chw[i], featset.coords[i])
        rgbs.append(samples)
    stacked = ad.stack(logits, axis=0)                 # [V,N,1]
    valid = featset.valid[:, :, None]
    # max over valid views, treated as data, keeps exp in range
    m = np.where(valid, stacked.values, -np.inf).max(axis=0)
    m = np.where(np.isfinite(m), m, 0.0).astype(stacked.dtype)
    e = ad.mul(ad.exp(ad.sub(stacked, m)), valid.astype(stacked.dtype))
    z = ad.reduce_sum(e, axes=(0,))                    # [N,1]
    zero = (featset.valid.sum(axis=0) == 0)[:, None]
    z = ad.add(z, zero.astype(stacked.dtype))
    w = ad.div(e, z)                                   # [V,N,1]
    colors = ad.stack(rgbs, axis=0)                    # [V,N,3]
    return ad.reduce_sum(ad.mul(w, colors), axes=(0,))
