"""Source-view perturbation attacks on a trained model, and their evaluation.

The view-specific attack maximizes the squared error between the rendering
from perturbed sources and the pseudo ground truth (the clean-source
rendering of the same rays) for one target pose, by Adam ascent on the
per-view perturbations followed by an L-inf clip after every step.

The universal attack runs the same loop but draws a freshly interpolated
camera pose every iteration (linear translation + quaternion slerp between
two anchor poses) and can add a depth-error term that pushes the rendered
expected depth away from a geometry reference.

Both modes share one loop and compute the pseudo ground truth per sampled
ray batch with a cached clean encoding; with a single anchor pose and no
depth term the universal loop consumes exactly the same random streams as
the view-specific one and reproduces its result bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import gnerf
from . import metrics as mt
from . import renderer as rd
from . import scenes as sc
from .training import Adam, DivergenceError, rgb_loss, sample_pixel_batch, source_set

ATTACK_MODES = ("view-specific", "universal")
DEPTH_REFS = ("model", "oracle")
ABLATION_MODES = ("both", "density-only", "color-only")


@dataclass
class PerturbationSet:
    """Additive per-source-view image perturbations under an L-inf budget."""

    deltas: list
    eps: float

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("budget must be nonnegative")
        self.validate()

    def validate(self):
        for i, d in enumerate(self.deltas):
            worst = float(np.abs(d).max()) if d.size else 0.0
            if worst > self.eps + 1e-7:
                raise ValueError(f"delta {i} violates the L-inf budget "
                                 f"({worst:.5f} > {self.eps:.5f})")

    @staticmethod
    def zeros(sources, eps):
        return PerturbationSet([np.zeros_like(img, dtype=np.float32)
                                for img in sources.images], eps)

    def copy(self):
        return PerturbationSet([d.copy() for d in self.deltas], self.eps)

    def save(self, path, meta=None):
        header = {"eps": self.eps}
        header.update(meta or {})
        ad.save_nft1(path, self.deltas, meta=header)

    @staticmethod
    def load(path):
        arrays, meta = ad.load_nft1(path)
        return PerturbationSet(arrays, float(meta["eps"])), meta


@dataclass
class AttackConfig:
    eps: float = 8.0 / 255.0
    lr: float = 1e-3
    iterations: int = 500
    rays_per_iter: int = 512
    seed: int = 0
    mode: str = "view-specific"
    lambda_depth: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_samples: int = 64
    depth_ref: str = "model"
    psnr_checkpoints: tuple = ()
    check_box: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lambda_depth < 0:
            raise ValueError("depth weight must be nonnegative")
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"mode must be one of {ATTACK_MODES}")
        if self.depth_ref not in DEPTH_REFS:
            raise ValueError(f"depth_ref must be one of {DEPTH_REFS}")


@dataclass
class DepthReference:
    """Geometry supervision for the depth-error term: either the clean
    model's rendered depth or the oracle scene depth, per ray batch."""

    source: str = "model"

    def batch(self, clean_depth_bg, dataset, pose, intr, pixels, qcfg):
        if self.source == "model":
            return clean_depth_bg
        if dataset.scene is None:
            raise ValueError("oracle depth reference needs the analytic scene")
        _, depth = sc.oracle_render(dataset.scene, pose, intr, qcfg.t_n,
                                    qcfg.t_f, n_quad=512, pixels=pixels)
        return depth


def adv_rgb_loss(pred_color, pseudo_pixels):
    """Squared error against the pseudo ground truth (weights stay frozen)."""
    return rgb_loss(pred_color, pseudo_pixels)


def depth_loss(pred_depth, ref_depth):
    """Sum of squared depth errors over a ray batch."""
    pred_depth = ad.as_tensor(pred_depth)
    ref = np.asarray(ref_depth)
    if pred_depth.values.shape != ref.shape:
        raise ValueError("depth batch shape mismatch")
    if ref.size == 0:
        raise ValueError("missing depth reference for the batch")
    err = ad.sub(pred_depth, ref.astype(pred_depth.dtype))
    return ad.reduce_sum(ad.mul(err, err))


def attack_step(pset, grads, adam, lr, eps):
    """Adam ascent on the perturbations, then clip to the L-inf box."""
    for i, g in enumerate(grads):
        if g is None or not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for delta {i}")
    direction = adam.direction(dict(enumerate(grads)))
    new = [np.clip(d + lr * direction[i], -eps, eps).astype(d.dtype)
           for i, d in enumerate(pset.deltas)]
    return PerturbationSet(new, pset.eps)


class PseudoGtCache:
    """Full-frame clean renderings keyed by target pose+intrinsics."""

    def __init__(self):
        self._store = {}
        self.hits = 0
        self.misses = 0

    def key(self, pose, intr):
        return (pose.R.tobytes(), pose.T.tobytes(), intr.to_dict().__repr__())

    def get(self, weights, sources, pose, intr, qcfg):
        k = self.key(pose, intr)
        if k not in self._store:
            self.misses += 1
            self._store[k] = rd.render_image(weights, sources, pose, intr, qcfg)
        else:
            self.hits += 1
        return self._store[k]


def pseudo_ground_truth(weights, sources, pose, intr, qcfg, cache=None):
    """Clean-source rendering of a target view: (image, depth), cached."""
    cache = cache if cache is not None else PseudoGtCache()
    image, depth, _ = cache.get(weights, sources, pose, intr, qcfg)
    return image, depth


# ---------------------------------------------------------------------------
# the shared attack loop


def _attack_loop(weights, dataset, config, sources, pose_for_iteration,
                 eval_view_id=None):
    """Optimize a PerturbationSet; pose_for_iteration(i, rng_pose) -> (pose, intr)."""
    seeds = np.random.SeedSequence([config.seed, 0xA77AC4]).spawn(3)
    rng_init = np.random.default_rng(seeds[0])
    rng_pix = np.random.default_rng(seeds[1])
    rng_pose = np.random.default_rng(seeds[2])
    eps = config.eps
    pset = PerturbationSet(
        [rng_init.uniform(-eps, eps, size=img.shape).astype(np.float32)
         for img in sources.images], eps)
    adam = Adam(config.beta1, config.beta2, config.adam_eps)
    qcfg = rd.QuadratureConfig(n_samples=config.n_samples, stratified=False,
                               t_n=dataset.t_n, t_f=dataset.t_f)
    clean_encoded = gnerf.encode_sources(weights.params, weights.config, sources)
    depth_ref = DepthReference(config.depth_ref)
    trace = {"loss": [], "psnr": {}}

    def checkpoint_psnr(it):
        if eval_view_id is None:
            return
        view = dataset.views[eval_view_id]
        img, _, _ = rd.render_image(weights, sources, view.pose, view.intrinsics,
                                    qcfg, deltas=pset.deltas)
        trace["psnr"][it] = mt.psnr(img, view.image)

    if 0 in config.psnr_checkpoints:
        checkpoint_psnr(0)
    for it in range(config.iterations):
        pose, intr = pose_for_iteration(it, rng_pose)
        pixels = sample_pixel_batch(rng_pix, intr, config.rays_per_iter)
        clean = rd.render_view(weights.params, weights.config, sources, pose,
                               intr, qcfg, pixels=pixels, encoded=clean_encoded)
        pseudo_rgb = clean.color.values
        leaves = [ad.Tensor(d, requires_grad=True) for d in pset.deltas]
        with ad.Tape() as tape:
            res = rd.render_view(weights.params, weights.config, sources, pose,
                                 intr, qcfg, pixels=pixels, deltas=leaves)
            loss = adv_rgb_loss(res.color, pseudo_rgb)
            if config.lambda_depth > 0:
                ref = depth_ref.batch(clean.depth_bg.values, dataset, pose,
                                      intr, pixels, qcfg)
                loss = ad.add(loss, ad.mul(
                    depth_loss(res.depth_bg, ref), config.lambda_depth))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise DivergenceError(f"attack loss became non-finite at iteration {it}")
        tape.backward(loss)
        pset = attack_step(pset, [leaf.grad for leaf in leaves], adam,
                           config.lr, eps)
        if config.check_box:
            pset.validate()
        trace["loss"].append(loss_val)
        if (it + 1) in config.psnr_checkpoints:
            checkpoint_psnr(it + 1)
    return pset, trace


def attack_view_specific(weights, dataset, target_view_id, config,
                         source_ids=None):
    """Perturbations optimized to corrupt one target view (the per-view attack)."""
    src_ids = list(source_ids if source_ids is not None else dataset.source_ids)
    sources = source_set(dataset, src_ids)
    view = dataset.views[target_view_id]

    def pose_for_iteration(it, rng_pose):
        return view.pose, view.intrinsics

    pset, trace = _attack_loop(weights, dataset, config, sources,
                               pose_for_iteration, eval_view_id=target_view_id)
    trace["target_view"] = target_view_id
    trace["source_ids"] = src_ids
    return pset, trace


def attack_universal(weights, dataset, config, source_ids=None,
                     anchor_pose_ids=None, checkpoint_view_id=None):
    """Perturbations optimized across freshly interpolated target poses.

    Anchors default to the (fixed) source views' poses; every iteration
    draws an unordered anchor pair and one alpha ~ U(0,1) shared by the
    translation lerp and the rotation slerp.
    """
    src_ids = list(source_ids if source_ids is not None else dataset.source_ids)
    sources = source_set(dataset, src_ids)
    anchor_ids = list(anchor_pose_ids if anchor_pose_ids is not None else src_ids)
    anchors = [dataset.views[i].pose for i in anchor_ids]
    intr = dataset.views[anchor_ids[0]].intrinsics

    def pose_for_iteration(it, rng_pose):
        if len(anchors) == 1:
            return anchors[0], intr
        i, j = rng_pose.choice(len(anchors), size=2, replace=False)
        alpha = rng_pose.uniform(0.0, 1.0)
        return geo.interpolate_pose(anchors[i], anchors[j], alpha), intr

    pset, trace = _attack_loop(weights, dataset, config, sources,
                               pose_for_iteration,
                               eval_view_id=checkpoint_view_id)
    trace["anchor_ids"] = anchor_ids
    trace["source_ids"] = src_ids
    return pset, trace


# ---------------------------------------------------------------------------
# evaluation


def render_ablated_image(weights, sources, deltas, pose, intr, qcfg,
                         ablation="both", chunk=2048):
    """Full-frame render mixing clean/perturbed density and color sources."""
    if ablation not in ABLATION_MODES:
        raise ValueError(f"ablation must be one of {ABLATION_MODES}")
    params, config = weights.params, weights.config
    adv_encoded = gnerf.encode_sources(params, config, sources, deltas)
    clean_encoded = None
    if ablation != "both":
        clean_encoded = gnerf.encode_sources(params, config, sources)
    pixels = rd.full_frame_pixels(intr)
    colors, depths = [], []
    for start in range(0, pixels.shape[0], chunk):
        sub = pixels[start:start + chunk]
        sig_b, col_b, ts, _ = rd.render_samples(params, config, sources, pose,
                                                intr, qcfg, sub,
                                                encoded=adv_encoded)
        if ablation == "both":
            res = rd.composite(sig_b, col_b, ts, qcfg.t_f)
        else:
            sig_a, col_a, _, _ = rd.render_samples(params, config, sources, pose,
                                                   intr, qcfg, sub,
                                                   encoded=clean_encoded)
            sigma_source = "b" if ablation == "density-only" else "a"
            color_source = "b" if ablation == "color-only" else "a"
            res = rd.composite_mixed(sig_a, col_a, sig_b, col_b, ts, qcfg.t_f,
                                     sigma_source=sigma_source,
                                     color_source=color_source)
        colors.append(res.color.values)
        depths.append(res.depth_bg.values)
    image = np.concatenate(colors, axis=0).reshape(intr.height, intr.width, 3)
    depth = np.concatenate(depths, axis=0).reshape(intr.height, intr.width)
    return image, depth


def evaluate_attack(weights, dataset, pset, view_ids, config=None,
                    ground_truth="oracle", ablations=("both",),
                    source_ids=None, include_clean=True):
    """Metrics rows for the given views under the perturbation set.

    ground_truth: 'oracle' compares to the dataset images, 'pseudo' to the
    clean-source renderings.  Each requested ablation adds a condition row
    per view; the unperturbed baseline rows use condition 'clean'.
    """
    if ground_truth not in ("oracle", "pseudo"):
        raise ValueError("ground_truth must be 'oracle' or 'pseudo'")
    config = config or AttackConfig(eps=pset.eps)
    src_ids = list(source_ids if source_ids is not None else dataset.source_ids)
    sources = source_set(dataset, src_ids)
    qcfg = rd.QuadratureConfig(n_samples=config.n_samples, stratified=False,
                               t_n=dataset.t_n, t_f=dataset.t_f)
    rows = []
    for vid in view_ids:
        view = dataset.views[vid]
        clean_img = None
        if include_clean or ground_truth == "pseudo":
            clean_img, _, _ = rd.render_image(weights, sources, view.pose,
                                              view.intrinsics, qcfg)
        gt = view.image if ground_truth == "oracle" else clean_img
        if include_clean:
            rows.append(mt.MetricsRow(dataset.scene_id, str(vid), "clean", 0.0,
                                      mt.psnr(clean_img, gt), mt.ssim(clean_img, gt)))
        for ablation in ablations:
            img, _ = render_ablated_image(weights, sources, pset.deltas,
                                          view.pose, view.intrinsics, qcfg,
                                          ablation=ablation)
            condition = "attacked" if ablation == "both" else ablation
            rows.append(mt.MetricsRow(dataset.scene_id, str(vid), condition,
                                      pset.eps, mt.psnr(img, gt), mt.ssim(img, gt)))
    return rows


def mean_psnr(rows, condition):
    vals = [r.psnr for r in rows if r.condition == condition]
    if not vals:
        raise ValueError(f"no rows with condition {condition!r}")
    return float(np.mean(vals))
