"""Procedural analytic scenes and the oracle renderer.

Scenes are unions of homogeneous-density primitives (sphere, box, axis
slab) with simple albedo fields (constant, checker, axis gradient) over a
black background.  Density inside a primitive is constant, so closed-form
transmittance checks are possible.  Where primitives overlap, the densest
one wins both density and color (ties to the earliest in the list).

`oracle_render` applies the renderer's discrete compositing rule to
densely quadratured analytic samples and is the source of ground-truth
images and depths; `generate_dataset` persists posed views (8-bit PNG,
NFT1 depth, JSON manifest) deterministically from a seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import renderer
from .fsio import atomic_write_text, save_png, load_png

BLACK = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Primitive:
    """One analytic solid: homogeneous density + simple albedo field.

    kind: 'sphere' (center, radius), 'box' (center, half extents) or
    'slab' (axis, lo, hi — infinite in the other two axes).
    albedo: ('constant', rgb) | ('checker', scale, rgb_a, rgb_b)
            | ('gradient', axis, lo, hi, rgb_a, rgb_b).
    """

    kind: str
    density: float
    albedo: tuple
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    half: tuple = (1.0, 1.0, 1.0)
    axis: int = 1
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "slab"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.density < 0:
            raise ValueError("density must be nonnegative")
        if self.kind == "sphere" and self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if self.kind == "box" and any(h <= 0 for h in self.half):
            raise ValueError("box half extents must be positive")
        if self.kind == "slab" and not self.lo < self.hi:
            raise ValueError("slab needs lo < hi")

    def contains(self, pts):
        pts = np.asarray(pts)
        if self.kind == "sphere":
            d2 = ((pts - np.asarray(self.center)) ** 2).sum(axis=-1)
            return d2 <= self.radius ** 2
        if self.kind == "box":
            rel = np.abs(pts - np.asarray(self.center))
            return (rel <= np.asarray(self.half)).all(axis=-1)
        coord = pts[..., self.axis]
        return (coord >= self.lo) & (coord <= self.hi)

    def albedo_at(self, pts):
        pts = np.asarray(pts)
        n = pts.shape[0]
        spec = self.albedo
        if spec[0] == "constant":
            return np.broadcast_to(np.asarray(spec[1], dtype=np.float64), (n, 3)).copy()
        if spec[0] == "checker":
            _, scale, ca, cb = spec
            idx = np.floor(pts / scale).astype(np.int64).sum(axis=-1)
            out = np.where((idx % 2 == 0)[:, None], np.asarray(ca), np.asarray(cb))
            return out.astype(np.float64)
        if spec[0] == "gradient":
            _, axis, lo, hi, ca, cb = spec
            w = np.clip((pts[..., axis] - lo) / (hi - lo), 0.0, 1.0)[:, None]
            return (1 - w) * np.asarray(ca, dtype=np.float64) + w * np.asarray(cb)
        raise ValueError(f"unknown albedo spec {spec[0]!r}")

    def to_dict(self):
        return {"kind": self.kind, "density": self.density,
                "albedo": list(self.albedo), "center": list(self.center),
                "radius": self.radius, "half": list(self.half),
                "axis": self.axis, "lo": self.lo, "hi": self.hi}

    @staticmethod
    def from_dict(d):
        return Primitive(kind=d["kind"], density=d["density"],
                         albedo=tuple(d["albedo"]), center=tuple(d["center"]),
                         radius=d["radius"], half=tuple(d["half"]),
                         axis=d["axis"], lo=d["lo"], hi=d["hi"])


@dataclass(frozen=True)
class AnalyticScene:
    scene_id: str
    primitives: tuple
    background: tuple = BLACK

    def __post_init__(self):
        if len(self.primitives) < 1:
            raise ValueError("a scene needs at least one primitive")

    def to_dict(self):
        return {"scene_id": self.scene_id,
                "primitives": [p.to_dict() for p in self.primitives],
                "background": list(self.background)}

    @staticmethod
    def from_dict(d):
        return AnalyticScene(d["scene_id"],
                             tuple(Primitive.from_dict(p) for p in d["primitives"]),
                             tuple(d["background"]))


def eval_scene(scene, pts):
    """Exact density and color at world points: (sigma [N], rgb [N,3]).

    sigma is the max density over containing primitives; the color is the
    densest containing primitive's albedo (earliest wins ties), or the
    background where nothing contains the point.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    sigma = np.zeros(n)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (n, 3)).copy()
    best = np.full(n, -1.0)
    for prim in scene.primitives:
        inside = prim.contains(pts)
        if not inside.any():
            continue
        take = inside & (prim.density > best)
        if take.any():
            rgb[take] = prim.albedo_at(pts[take])
            best[take] = prim.density
            sigma[take] = prim.density
    return sigma, rgb


def ray_surface_distance(scene, origin, direction, t_n, t_f, steps=8192):
    """Distance to the first occupied point along a ray (brute enumeration).

    Test oracle only: dense marching plus one bisection refinement.
    """
    ts = np.linspace(t_n, t_f, steps)
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    sigma, _ = eval_scene(scene, pts)
    hit = np.nonzero(sigma > 0)[0]
    if hit.size == 0:
        return None
    i = hit[0]
    if i == 0:
        return float(ts[0])
    lo, hi = ts[i - 1], ts[i]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        s, _ = eval_scene(scene, mid[None] * direction[None, :] + origin[None, :])
        if s[0] > 0:
            hi = mid
        else:
            lo = mid
    return float(hi)


def oracle_render(scene, pose, intr, t_n, t_f, n_quad=512, pixels=None,
                  chunk=512):
    """Ground-truth render: dense midpoint quadrature of the analytic field.

    Returns (image [H,W,3], depth [H,W]) — or per-pixel rows when a pixel
    subset is given.  Depth carries missed mass at t_f (sentinel for rays
    that hit nothing).
    """
    if n_quad < 512:
        raise ValueError("oracle quadrature must use at least 512 samples")
    full = pixels is None
    if full:
        pixels = renderer.full_frame_pixels(intr)
    qcfg = renderer.QuadratureConfig(n_samples=n_quad, stratified=False,
                                     t_n=t_n, t_f=t_f)
    ts = renderer.sample_ts(qcfg)
    images, depths = [], []
    for start in range(0, pixels.shape[0], chunk):
        sub = pixels[start:start + chunk].astype(np.float64)
        origins, dirs = geo.rays_for_pixels(intr, pose, sub)
        pts = origins[:, None, :] + ts[None, :, None] * dirs[:, None, :]
        sigma, rgb = eval_scene(scene, pts.reshape(-1, 3))
        res = renderer.composite(sigma.reshape(-1, n_quad),
                                 rgb.reshape(-1, n_quad, 3), ts, t_f)
        images.append(res.color.values)
        depths.append(res.depth_bg.values)
    image = np.concatenate(images, axis=0)
    depth = np.concatenate(depths, axis=0)
    if full:
        image = image.reshape(intr.height, intr.width, 3)
        depth = depth.reshape(intr.height, intr.width)
    return np.clip(image, 0.0, 1.0), depth


# ---------------------------------------------------------------------------
# camera rigs

RIGS = ("forward-facing-arc", "hemisphere")


def rig_poses(rig, n_views, seed, radius=3.6, target=(0.0, 0.0, 0.0)):
    """Deterministic camera poses looking at the scene centroid."""
    rng = np.random.default_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    poses = []
    if rig == "forward-facing-arc":
        span = np.deg2rad(40.0)
        angles = np.linspace(-span, span, n_views)
        heights = 0.45 * np.sin(np.linspace(0, 2.4 * np.pi, n_views) + rng.uniform(0, np.pi))
        for phi, h in zip(angles, heights):
            eye = target + np.array([radius * np.sin(phi), h, -radius * np.cos(phi)])
            poses.append(geo.look_at(eye, target))
    elif rig == "hemisphere":
        az = rng.uniform(0, 2 * np.pi, n_views)
        el = rng.uniform(np.deg2rad(20), np.deg2rad(70), n_views)
        for a, e in zip(np.sort(az), el):
            eye = target + radius * np.array([np.cos(e) * np.sin(a), np.sin(e),
                                              -np.cos(e) * np.cos(a)])
            poses.append(geo.look_at(eye, target))
    else:
        raise ValueError(f"unknown rig {rig!r}; expected one of {RIGS}")
    return poses


# ---------------------------------------------------------------------------
# datasets


@dataclass
class View:
    image: np.ndarray        # [H,W,3] float32 in [0,1] (dequantized PNG)
    pose: geo.Pose
    intrinsics: geo.Intrinsics
    tag: str                 # 'source' | 'train' | 'test'
    depth: np.ndarray | None = None


@dataclass
class SceneDataset:
    scene_id: str
    views: list
    t_n: float
    t_f: float
    scene: AnalyticScene | None = None

    def __post_init__(self):
        if not self.t_n < self.t_f:
            raise ValueError("require t_n < t_f")
        shape = self.views[0].image.shape
        for v in self.views:
            if v.image.shape != shape:
                raise ValueError("views must share image extents")

    def ids_by_tag(self, tag):
        return [i for i, v in enumerate(self.views) if v.tag == tag]

    @property
    def source_ids(self):
        return self.ids_by_tag("source")

    @property
    def eval_ids(self):
        return self.ids_by_tag("test")


DEFAULT_VIEW_TAGS = {
    # 16-view arc: 4 conditioning sources, 8 held-out eval views (incl.
    # both arc boundaries), the rest available for per-scene finetuning
    "source": (2, 6, 9, 13),
    "test": (0, 1, 5, 7, 8, 10, 14, 15),
}


def view_tags(n_views, tags=None):
    tags = tags or DEFAULT_VIEW_TAGS
    out = []
    for i in range(n_views):
        if i in tags["source"]:
            out.append("source")
        elif i in tags["test"]:
            out.append("test")
        else:
            out.append("train")
    return out


def default_intrinsics(size=64):
    return geo.Intrinsics(fx=1.25 * size, fy=1.25 * size,
                          cx=size / 2.0, cy=size / 2.0,
                          width=size, height=size)


def generate_dataset(scene, n_views=16, rig="forward-facing-arc", seed=0,
                     image_size=64, t_n=1.2, t_f=6.5, n_quad=512,
                     out_dir=None, tags=None):
    """Render a posed dataset from the analytic scene; optionally persist it.

    Deterministic given the seed: identical seeds produce byte-identical
    artifacts on disk.
    """
    if n_views < 2:
        raise ValueError("need at least two views")
    intr = default_intrinsics(image_size)
    poses = rig_poses(rig, n_views, seed)
    labels = view_tags(n_views, tags)
    views = []
    for pose, tag in zip(poses, labels):
        image, depth = oracle_render(scene, pose, intr, t_n, t_f, n_quad=n_quad)
        quant = np.round(image * 255.0).astype(np.uint8)
        views.append(View(image=(quant.astype(np.float32) / 255.0), pose=pose,
                          intrinsics=intr, tag=tag,
                          depth=depth.astype(np.float32)))
    dataset = SceneDataset(scene.scene_id, views, t_n, t_f, scene=scene)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    return dataset


def save_dataset(dataset, out_dir):
    from . import autodiff as ad

    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "scene_id": dataset.scene_id,
        "bounds": {"t_n": dataset.t_n, "t_f": dataset.t_f},
        "scene": dataset.scene.to_dict() if dataset.scene else None,
        "views": [],
    }
    for i, v in enumerate(dataset.views):
        img_name = f"view_{i:03d}.png"
        depth_name = f"view_{i:03d}_depth.nft1"
        save_png(os.path.join(out_dir, img_name),
                 np.round(v.image * 255.0).astype(np.uint8))
        if v.depth is not None:
            ad.save_nft1(os.path.join(out_dir, depth_name), [v.depth])
        manifest["views"].append({
            "image": img_name,
            "depth": depth_name if v.depth is not None else None,
            "pose": v.pose.to_list(),
            "pose_convention": v.pose.convention,
            "intrinsics": v.intrinsics.to_dict(),
            "tag": v.tag,
        })
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path):
    from . import autodiff as ad

    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    views = []
    for entry in manifest["views"]:
        image = load_png(os.path.join(path, entry["image"])).astype(np.float32) / 255.0
        depth = None
        if entry.get("depth"):
            depth = ad.load_nft1(os.path.join(path, entry["depth"]))[0][0]
        views.append(View(image=image,
                          pose=geo.Pose.from_list(entry["pose"], entry["pose_convention"]),
                          intrinsics=geo.Intrinsics.from_dict(entry["intrinsics"]),
                          tag=entry["tag"], depth=depth))
    scene = AnalyticScene.from_dict(manifest["scene"]) if manifest.get("scene") else None
    return SceneDataset(manifest["scene_id"], views,
                        manifest["bounds"]["t_n"], manifest["bounds"]["t_f"],
                        scene=scene)


# ---------------------------------------------------------------------------
# the built-in registry: 4 training scenes + 2 held-out scenes

RED = (0.85, 0.15, 0.12)
GREEN = (0.15, 0.75, 0.25)
BLUE = (0.2, 0.35, 0.85)
YELLOW = (0.9, 0.8, 0.15)
WHITE = (0.92, 0.92, 0.92)
TEAL = (0.1, 0.7, 0.7)
ORANGE = (0.95, 0.55, 0.1)
PURPLE = (0.6, 0.2, 0.8)


def builtin_scenes():
    """Six analytic scenes: at least one complex (>=5 primitives on >=3
    depth layers) and one simple (<=2 primitives)."""
    back_wall = Primitive("box", 60.0, ("checker", 0.55, WHITE, BLUE),
                          center=(0.0, 0.0, 1.45), half=(1.55, 1.15, 0.12))
    scenes = [
        AnalyticScene("orb-duo", (
            Primitive("sphere", 70.0, ("constant", RED), center=(-0.45, 0.05, 0.1), radius=0.55),
            Primitive("sphere", 70.0, ("gradient", 1, -0.5, 0.6, BLUE, YELLOW),
                      center=(0.55, -0.1, 0.45), radius=0.45),
        )),
        AnalyticScene("checker-court", (
            Primitive("box", 60.0, ("checker", 0.4, WHITE, GREEN),
                      center=(0.0, -0.85, 0.3), half=(1.5, 0.12, 1.2)),
            Primitive("sphere", 70.0, ("constant", ORANGE), center=(-0.3, -0.15, 0.2), radius=0.5),
            Primitive("box", 65.0, ("constant", PURPLE), center=(0.75, -0.45, 0.65),
                      half=(0.28, 0.28, 0.28)),
        )),
        AnalyticScene("tower-field", (
            back_wall,
            Primitive("box", 70.0, ("gradient", 1, -0.8, 0.8, TEAL, WHITE),
                      center=(-0.65, -0.2, 0.7), half=(0.22, 0.6, 0.22)),
            Primitive("box", 70.0, ("constant", RED), center=(0.55, -0.35, 0.55),
                      half=(0.25, 0.45, 0.25)),
            Primitive("sphere", 75.0, ("constant", YELLOW), center=(0.05, 0.15, -0.15), radius=0.32),
        )),
        AnalyticScene("layered-grove", (
            # complex geometry: six primitives across three depth layers
            back_wall,
            Primitive("box", 60.0, ("checker", 0.45, WHITE, ORANGE),
                      center=(0.0, -0.9, 0.2), half=(1.5, 0.1, 1.25)),
            Primitive("sphere", 75.0, ("constant", GREEN), center=(-0.7, -0.25, 0.75), radius=0.4),
            Primitive("box", 70.0, ("constant", BLUE), center=(0.7, -0.3, 0.6),
                      half=(0.26, 0.5, 0.26)),
            Primitive("sphere", 80.0, ("gradient", 0, -0.6, 0.6, RED, YELLOW),
                      center=(0.1, 0.0, 0.0), radius=0.38),
            Primitive("sphere", 85.0, ("constant", PURPLE), center=(-0.25, 0.3, -0.65), radius=0.26),
        )),
        AnalyticScene("slab-sentinel", (
            Primitive("slab", 55.0, ("checker", 0.5, WHITE, TEAL), axis=1, lo=-1.05, hi=-0.85),
            Primitive("sphere", 75.0, ("constant", BLUE), center=(0.15, -0.1, 0.15), radius=0.52),
            Primitive("box", 70.0, ("gradient", 0, -0.8, 0.4, ORANGE, WHITE),
                      center=(-0.7, -0.5, 0.7), half=(0.3, 0.35, 0.3)),
        )),
        AnalyticScene("gradient-duo", (
            Primitive("sphere", 70.0, ("gradient", 1, -0.55, 0.55, GREEN, WHITE),
                      center=(-0.35, 0.0, 0.25), radius=0.58),
            Primitive("box", 65.0, ("checker", 0.35, RED, YELLOW),
                      center=(0.6, -0.25, 0.05), half=(0.3, 0.3, 0.3)),
        )),
    ]
    return scenes


TRAIN_SCENES = ("checker-court", "tower-field", "layered-grove", "slab-sentinel")
HELDOUT_SCENES = ("orb-duo", "gradient-duo")
COMPLEX_SCENE = "layered-grove"
SIMPLE_SCENE = "orb-duo"


def generate_registry(out_dir, seed=0, image_size=64, n_quad=512, n_views=16):
    """Generate the six built-in scenes and write a registry manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    datasets = {}
    for i, scene in enumerate(builtin_scenes()):
        scene_dir = os.path.join(out_dir, scene.scene_id)
        ds = generate_dataset(scene, n_views=n_views, rig="forward-facing-arc",
                              seed=seed + 101 * i, image_size=image_size,
                              n_quad=n_quad, out_dir=scene_dir)
        datasets[scene.scene_id] = ds
        entries.append({"scene_id": scene.scene_id, "path": scene.scene_id,
                        "split": "train" if scene.scene_id in TRAIN_SCENES else "heldout"})
    registry = {"seed": seed, "image_size": image_size, "scenes": entries,
                "complex_scene": COMPLEX_SCENE, "simple_scene": SIMPLE_SCENE}
    atomic_write_text(os.path.join(out_dir, "registry.json"),
                      json.dumps(registry, indent=1, sort_keys=True))
    return datasets


def load_registry(path):
    with open(os.path.join(path, "registry.json")) as f:
        registry = json.load(f)
    datasets = {}
    for entry in registry["scenes"]:
        datasets[entry["scene_id"]] = load_dataset(os.path.join(path, entry["path"]))
    return registry, datasets
