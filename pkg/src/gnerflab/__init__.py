"""Desk-scale laboratory for adversarial robustness of generalizable radiance fields.

Submodules
----------
autodiff   reverse-mode AD over dense numpy tensors (tape + primitives)
geometry   pinhole cameras, rays, projection, pose interpolation
scenes     procedural analytic scenes, oracle renderer, dataset persistence
gnerf      source-view-conditioned radiance field (encoder + field MLP)
renderer   differentiable volume rendering and mixed compositing
training   clean / per-scene / adversarial optimization of model weights
attack     view-specific and universal source-view perturbation attacks
metrics    PSNR / SSIM and CSV report generation
cli        operator entry point (`python -m gnerflab.cli` or `gnerflab`)
"""

__version__ = "0.1.0"
