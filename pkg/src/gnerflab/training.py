"""Ground-truth-supervised optimization of the radiance-field weights.

Three modes share one step loop: cross-scene pretraining, per-scene
finetuning (targets restricted to the scene's non-held-out views), and
adversarial training, which precedes every weight update with an inner
maximization over source-view perturbations (Adam-ascent + clip, matching
the attack's update rule) and then descends on the perturbed loss.

All randomness flows from the config seed through named child streams, so
a zero-budget adversarial run consumes exactly the same data-sampling
stream as a clean run and reproduces it bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import gnerf
from . import renderer as rd


class DivergenceError(RuntimeError):
    """Raised when a training or attack loss stops being finite."""


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rays_per_step: int = 512
    steps: int = 2000
    seed: int = 0
    n_sources: int = 4
    n_samples: int = 64
    lr_final_scale: float = 0.05
    adversarial: bool = False
    adv_eps: float = 0.0          # L-inf budget in [0,1] pixel units
    adv_inner_iters: int = 1
    adv_inner_lr: float | None = None   # None: full-budget steps (= adv_eps)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.adv_eps < 0:
            raise ValueError("perturbation budget must be nonnegative")
        if self.adversarial and self.adv_inner_iters < 1:
            raise ValueError("adversarial training needs at least one inner iteration")


class Adam:
    """Textbook Adam over a dict of arrays; emits bias-corrected directions."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def direction(self, grads):
        """m_hat / (sqrt(v_hat) + eps) after absorbing the new gradients."""
        self.t += 1
        out = {}
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[k] + (1 - b2) * g * g
            self.m[k] = m
            self.v[k] = v
            out[k] = (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def cosine_lr(step, config):
    frac = step / max(config.steps, 1)
    floor = config.lr * config.lr_final_scale
    return floor + 0.5 * (config.lr - floor) * (1.0 + math.cos(math.pi * frac))


def rgb_loss(pred, target):
    """Sum of squared RGB errors over a ray batch (the training objective)."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target)
    if pred.values.shape != target.shape:
        raise ValueError(f"batch shape mismatch: {pred.values.shape} vs {target.shape}")
    if target.size == 0:
        raise ValueError("empty ray batch")
    err = ad.sub(pred, target.astype(pred.dtype))
    return ad.reduce_sum(ad.mul(err, err))


def nearest_sources(dataset, target_id, k, pool=None):
    """Ids of the k views with camera centers closest to the target view."""
    pool = [i for i in (pool if pool is not None else range(len(dataset.views)))
            if i != target_id]
    center = dataset.views[target_id].pose.center
    dists = [(float(np.linalg.norm(dataset.views[i].pose.center - center)), i)
             for i in pool]
    dists.sort()
    return [i for _, i in dists[:k]]


def source_set(dataset, ids):
    views = [dataset.views[i] for i in ids]
    return gnerf.SourceViewSet([v.image for v in views], [v.pose for v in views],
                               [v.intrinsics for v in views])


def sample_pixel_batch(rng, intr, n):
    idx = rng.choice(intr.width * intr.height, size=min(n, intr.width * intr.height),
                     replace=False)
    return np.stack([idx % intr.width, idx // intr.width], axis=1)


def _quad_config(dataset, config):
    return rd.QuadratureConfig(n_samples=config.n_samples, stratified=False,
                               t_n=dataset.t_n, t_f=dataset.t_f)


def _train_loop(weights, datasets, config, mode, target_pools=None):
    """Shared step loop. datasets: list of SceneDataset; target_pools maps
    dataset index -> candidate target view ids."""
    weights = weights.copy()
    seeds = np.random.SeedSequence([config.seed, 0xC0FFEE]).spawn(2)
    rng_data = np.random.default_rng(seeds[0])
    rng_adv = np.random.default_rng(seeds[1])
    adam = Adam(config.beta1, config.beta2, config.adam_eps)
    history = []
    adversarial = config.adversarial and config.adv_eps > 0
    for step in range(config.steps):
        ds_idx = int(rng_data.integers(len(datasets)))
        dataset = datasets[ds_idx]
        pool = (target_pools[ds_idx] if target_pools is not None
                else list(range(len(dataset.views))))
        target_id = int(pool[rng_data.integers(len(pool))])
        view = dataset.views[target_id]
        src_ids = nearest_sources(dataset, target_id, config.n_sources, pool=pool)
        sources = source_set(dataset, src_ids)
        pixels = sample_pixel_batch(rng_data, view.intrinsics, config.rays_per_step)
        gt = view.image[pixels[:, 1], pixels[:, 0]].astype(np.float64)
        qcfg = _quad_config(dataset, config)

        deltas = None
        if adversarial:
            deltas = _inner_maximize(weights, sources, view, pixels, gt, qcfg,
                                     config, rng_adv)

        bound = weights.bind(trainable=True)
        with ad.Tape() as tape:
            res = rd.render_view(bound, weights.config, sources, view.pose,
                                 view.intrinsics, qcfg, pixels=pixels,
                                 deltas=deltas)
            loss = rgb_loss(res.color, gt)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise DivergenceError(f"{mode} loss became non-finite at step {step}")
        tape.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
                 for k, t in bound.items()}
        direction = adam.direction(grads)
        lr = cosine_lr(step, config)
        for k in weights.params:
            weights.params[k] = weights.params[k] - (lr * direction[k]).astype(
                weights.params[k].dtype)
        history.append({"step": step, "loss": loss_val, "mode": mode})
    return weights, history


def _inner_maximize(weights, sources, view, pixels, gt, qcfg, config, rng_adv):
    """One-or-few-step PGD on the source views: Adam ascent then clip."""
    eps = config.adv_eps
    shape = sources.images[0].shape
    deltas = [rng_adv.uniform(-eps, eps, size=shape).astype(np.float32)
              for _ in sources.images]
    inner_lr = config.adv_inner_lr if config.adv_inner_lr is not None else eps
    adam = Adam(config.beta1, config.beta2, config.adam_eps)
    for _ in range(config.adv_inner_iters):
        leaves = [ad.Tensor(d, requires_grad=True) for d in deltas]
        with ad.Tape() as tape:
            res = rd.render_view(weights.params, weights.config, sources,
                                 view.pose, view.intrinsics, qcfg,
                                 pixels=pixels, deltas=leaves)
            loss = rgb_loss(res.color, gt)
        if not np.isfinite(loss.item()):
            raise DivergenceError("inner maximization loss became non-finite")
        tape.backward(loss)
        grads = {i: leaf.grad for i, leaf in enumerate(leaves)}
        direction = adam.direction(grads)
        deltas = [np.clip(d + inner_lr * direction[i], -eps, eps).astype(np.float32)
                  for i, d in enumerate(deltas)]
    return deltas


def pretrain(datasets, config, weights=None):
    """Cross-scene pretraining; needs at least two training scenes."""
    datasets = list(datasets)
    if len(datasets) < 2:
        raise ValueError("pretraining needs at least two scenes")
    weights = weights or gnerf.init_weights(gnerf.ModelConfig(), seed=config.seed)
    return _train_loop(weights, datasets, config, mode="pretrain")


def finetune(weights, dataset, config):
    """Per-scene finetuning restricted to the scene's non-held-out views."""
    pool = [i for i, v in enumerate(dataset.views) if v.tag != "test"]
    return _train_loop(weights, [dataset], config, mode="finetune",
                       target_pools=[pool])


def adversarial_train(weights, datasets, config, mode="pretrain"):
    """Min-max training: inner perturbation ascent, outer descent on the
    perturbed loss.  A zero budget reduces bit-exactly to the clean loop."""
    config = replace(config, adversarial=True)
    datasets = list(datasets)
    if mode == "finetune":
        if len(datasets) != 1:
            raise ValueError("adversarial finetuning expects exactly one scene")
        pools = [[i for i, v in enumerate(datasets[0].views) if v.tag != "test"]]
        return _train_loop(weights, datasets, config, mode="adv-finetune",
                           target_pools=pools)
    if len(datasets) < 2:
        raise ValueError("adversarial pretraining needs at least two scenes")
    weights = weights or gnerf.init_weights(gnerf.ModelConfig(), seed=config.seed)
    return _train_loop(weights, datasets, config, mode="adv-pretrain")


def save_history_csv(path, history):
    from .fsio import atomic_write_text

    lines = ["step,loss,mode"]
    for row in history:
        lines.append(f"{row['step']},{row['loss']:.8f},{row['mode']}")
    atomic_write_text(path, "\n".join(lines) + "\n")
