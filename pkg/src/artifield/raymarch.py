"""Differentiable rendering: pixel rays, recurrent raymarching, image assembly.

A render is a pure function of (latent code, weights, E, K, H, W). Each ray
starts at its near bound and takes n_march learned steps; the step length is
softplus(linear(h_t)) of the recurrent state, so marching is strictly
monotone in depth and d_final >= d_near by construction. Per-step depths are
kept for the depth regularizer. Rays are processed in scanline order and one
graph covers a whole ray batch, which keeps gradient accumulation
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .neuralfield import (
    ArchConfig,
    LatentCode,
    ModelWeights,
    RaymarcherWeights,
    code_features_t,
    field_eval_layers,
    hyper_map,
    rgb_head,
    seg_head,
    slice_field_weights,
)
from .worldgen import camera_center


@dataclass
class Ray:
    """One camera ray in the world frame with its march interval."""

    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,) unit
    d_near: float
    d_far: float

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0.0 < self.d_near < self.d_far):
            raise ValueError("require 0 < d_near < d_far")


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray     # (R, 3) unit
    d_near: np.ndarray   # (R, 1)
    d_far: np.ndarray    # (R, 1)

    @property
    def count(self) -> int:
        return self.dirs.shape[0]


@dataclass
class MarchResult:
    """Where each ray landed: surface point, final features, depths."""

    x_surface: Tensor          # (R, 3)
    v_final: Tensor            # (R, n)
    d_final: Tensor            # (R, 1)
    step_depths: list[Tensor]  # per-step (R, 1), for regularization


def march_bounds(origin: np.ndarray, scene_radius: float) -> tuple[float, float]:
    """Near/far march interval for a camera at `origin` looking at the scene
    center (the world origin, by dataset convention)."""
    d_mid = float(np.linalg.norm(origin))
    return max(0.05, d_mid - scene_radius), d_mid + scene_radius


def pixel_ray(e: np.ndarray, k: np.ndarray, u: int, v: int,
              scene_radius: float = 1.5) -> Ray:
    """Unit ray through the center of pixel (u, v); u is the column index."""
    if k[0, 0] == 0 or k[1, 1] == 0:
        raise ValueError("degenerate camera: zero focal length")
    d_cam = np.linalg.inv(k) @ np.array([u + 0.5, v + 0.5, 1.0])
    d_world = e[:, :3].T @ d_cam
    d_world /= np.linalg.norm(d_world)
    origin = camera_center(e)
    near, far = march_bounds(origin, scene_radius)
    return Ray(origin=origin, direction=d_world, d_near=near, d_far=far)


def pixel_rays(e: np.ndarray, k: np.ndarray, height: int, width: int,
               flat_pixels: np.ndarray | None = None,
               scene_radius: float = 1.5) -> RayBatch:
    """Rays through pixel centers, scanline order; optionally a subset given
    as flat indices into that order."""
    if k[0, 0] == 0 or k[1, 1] == 0:
        raise ValueError("degenerate camera: zero focal length")
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(height * width)], axis=1)
    if flat_pixels is not None:
        pix = pix[np.asarray(flat_pixels, dtype=np.int64)]
    dirs = (pix @ np.linalg.inv(k).T) @ e[:, :3]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = camera_center(e)
    near, far = march_bounds(origin, scene_radius)
    r = dirs.shape[0]
    return RayBatch(origins=np.broadcast_to(origin, dirs.shape).copy(), dirs=dirs,
                    d_near=np.full((r, 1), near), d_far=np.full((r, 1), far))


def march(theta: Tensor, rm: RaymarcherWeights, rays: RayBatch,
          arch: ArchConfig,
          field_layers: list[tuple[Tensor, Tensor]] | None = None) -> MarchResult:
    """Recurrent raymarch: query the field, step by softplus(linear(h)),
    repeat n_march times, then evaluate features at the landing points.

    Callers marching several batches against one theta can pass the
    pre-sliced field layers to share the slicing nodes.
    """
    if field_layers is None:
        field_layers = slice_field_weights(theta, arch)
    r = rays.count
    origins = Tensor(rays.origins)
    dirs = Tensor(rays.dirs)
    d = Tensor(rays.d_near.copy())
    state = gc.lstm_zero_state(r, arch.lstm_hidden)
    step_depths: list[Tensor] = []
    for _ in range(arch.n_march):
        x = gc.add(origins, gc.mul(d, dirs))
        v = field_eval_layers(field_layers, x)
        state, h = gc.lstm_step(rm.lstm, state, v)
        delta = gc.softplus(gc.affine(h, rm.step_w, rm.step_b))
        d = gc.add(d, delta)
        step_depths.append(d)
    x_final = gc.add(origins, gc.mul(d, dirs))
    v_final = field_eval_layers(field_layers, x_final)
    return MarchResult(x_surface=x_final, v_final=v_final, d_final=d,
                       step_depths=step_depths)


def render_rays(weights: ModelWeights, theta: Tensor, rays: RayBatch,
                want_rgb: bool = True, want_seg: bool = True,
                field_layers: list[tuple[Tensor, Tensor]] | None = None
                ) -> tuple[Tensor | None, Tensor | None, MarchResult]:
    """March a ray batch and decode features into RGB and/or seg logits."""
    result = march(theta, weights.raymarcher, rays, weights.arch, field_layers)
    rgb = rgb_head(weights.rgb, result.v_final) if want_rgb else None
    logits = seg_head(weights.seg, result.v_final) if want_seg else None
    return rgb, logits, result


def _theta_for(weights: ModelWeights, code: LatentCode) -> Tensor:
    feats = code_features_t(Tensor(code.z_art), Tensor(code.z_obj))
    return hyper_map(weights.hyper, feats)


def render_image(weights: ModelWeights, code: LatentCode, e: np.ndarray,
                 k: np.ndarray, height: int, width: int,
                 chunk: int = 4096) -> np.ndarray:
    """Full-frame RGB render as a plain (H, W, 3) array (no graph kept)."""
    with gc.no_grad():
        theta = _theta_for(weights, code)
        out = np.empty((height * width, 3))
        grid = pixel_rays(e, k, height, width, scene_radius=weights.arch.scene_radius)
        for lo in range(0, height * width, chunk):
            hi = min(lo + chunk, height * width)
            sub = RayBatch(grid.origins[lo:hi], grid.dirs[lo:hi],
                           grid.d_near[lo:hi], grid.d_far[lo:hi])
            rgb, _, _ = render_rays(weights, theta, sub, want_seg=False)
            out[lo:hi] = rgb.data
    return out.reshape(height, width, 3)


def render_segmentation(weights: ModelWeights, code: LatentCode, e: np.ndarray,
                        k: np.ndarray, height: int, width: int,
                        chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Full-frame class-id image plus raw logits.

    Ties in the argmax resolve to the lowest class index (numpy argmax rule),
    so exactly uniform logits yield class 0.
    """
    c = weights.arch.n_classes
    with gc.no_grad():
        theta = _theta_for(weights, code)
        logits = np.empty((height * width, c))
        grid = pixel_rays(e, k, height, width, scene_radius=weights.arch.scene_radius)
        for lo in range(0, height * width, chunk):
            hi = min(lo + chunk, height * width)
            sub = RayBatch(grid.origins[lo:hi], grid.dirs[lo:hi],
                           grid.d_near[lo:hi], grid.d_far[lo:hi])
            _, lg, _ = render_rays(weights, theta, sub, want_rgb=False)
            logits[lo:hi] = lg.data
    classes = np.argmax(logits, axis=1).astype(np.uint8)
    return classes.reshape(height, width), logits.reshape(height, width, c)
