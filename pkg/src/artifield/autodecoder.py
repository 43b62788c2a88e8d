"""Joint training of latent codes and network weights, frozen-weight latent
inference for new instances, and checkpoint persistence.

Training follows the auto-decoder scheme: per-object shape codes are free
optimization variables updated alongside all network weights, while the
articulation part of each code is injected from the ground-truth articulation
scalar. At inference the weights are frozen, the segmentation and keypoint
loss terms are switched off, and the full code (articulation and object
parts) is fit to the observed images alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import Adam, NonFiniteError, Tensor
from .neuralfield import (
    ArchConfig,
    LatentCode,
    ModelWeights,
    RaymarcherWeights,
    articulation_to_code,
    code_features_t,
    hyper_map,
    keypoint_head,
)
from .raymarch import RayBatch, pixel_rays, render_rays
from .worldgen import DatasetManifest, PosedView

CHECKPOINT_MAGIC = b"AFLD"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossBreakdown:
    """All loss components of one step; ``total`` is their weighted sum."""

    image: float
    latent: float
    depth: float
    seg: float
    kp: float
    lam_seg: float
    lam_kp: float
    lam_latent: float
    lam_depth: float

    @property
    def total(self) -> float:
        return (self.image + self.lam_latent * self.latent + self.lam_depth * self.depth
                + self.lam_seg * self.seg + self.lam_kp * self.kp)

    def as_row(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


@dataclass
class ViewSample:
    """Sampled rays of one view plus their ground-truth pixels."""

    rays: RayBatch
    target_rgb: np.ndarray          # (R, 3)
    target_seg: np.ndarray | None   # (R,) class ids


@dataclass
class InstanceBatch:
    """One (object, articulation) instance inside a minibatch.

    z_art is a constant tensor during training (injected from ground truth)
    and a trainable one during inference.
    """

    z_art: Tensor
    z_obj: Tensor
    views: list[ViewSample]
    target_keypoints: np.ndarray | None = None  # (N_kp, 3)
    z_art_free: bool = False


def _merge_views(views: list[ViewSample]) -> ViewSample:
    """Stack sampled rays of several views into one batch (one march graph)."""
    if len(views) == 1:
        return views[0]
    rays = RayBatch(
        origins=np.concatenate([v.rays.origins for v in views]),
        dirs=np.concatenate([v.rays.dirs for v in views]),
        d_near=np.concatenate([v.rays.d_near for v in views]),
        d_far=np.concatenate([v.rays.d_far for v in views]))
    rgb = np.concatenate([v.target_rgb for v in views])
    segs = [v.target_seg for v in views]
    seg = np.concatenate(segs) if all(s is not None for s in segs) else None
    return ViewSample(rays=rays, target_rgb=rgb, target_seg=seg)


def total_loss(batch: list[InstanceBatch], weights: ModelWeights,
               lam_seg: float, lam_kp: float, lam_latent: float, lam_depth: float
               ) -> tuple[Tensor, LossBreakdown]:
    """Weighted training objective over a minibatch; returns the scalar graph
    node and a float breakdown satisfying the composition identity."""
    arch = weights.arch
    img_sse = None      # sum of squared rgb errors
    img_count = 0
    seg_terms = []      # per-instance mean cross-entropies (equal ray counts)
    depth_terms = []    # per-instance mean overshoot penalties
    kp_terms = []
    latent_terms = []

    for inst in batch:
        feats = code_features_t(inst.z_art, inst.z_obj)
        theta = hyper_map(weights.hyper, feats)
        want_seg = lam_seg > 0
        merged = _merge_views(inst.views)
        if want_seg and merged.target_seg is None:
            raise ValueError("segmentation loss requested but view has no ground truth")
        rgb, logits, marchres = render_rays(weights, theta, merged.rays,
                                            want_seg=want_seg)
        sse = gc.tsum(gc.square(gc.sub(rgb, merged.target_rgb)))
        img_sse = sse if img_sse is None else gc.add(img_sse, sse)
        img_count += merged.target_rgb.size
        if want_seg:
            seg_terms.append(gc.cross_entropy_logits(logits, merged.target_seg))
        over = gc.relu(gc.sub(marchres.d_final, merged.rays.d_far))
        depth_terms.append(gc.tmean(gc.square(over)))
        if lam_kp > 0:
            if inst.target_keypoints is None:
                raise ValueError("keypoint loss requested but instance has no ground truth")
            pts = keypoint_head(weights.keypoint, feats, arch)
            kp_terms.append(gc.tsum(gc.square(gc.sub(pts, inst.target_keypoints))))
        prior = gc.mul(gc.tsum(gc.square(inst.z_obj)), 1.0 / arch.k_obj)
        if inst.z_art_free:
            norm = gc.sqrt(gc.tsum(gc.square(inst.z_art)))
            prior = gc.add(prior, gc.square(gc.sub(norm, 1.0)))
        latent_terms.append(prior)

    def mean_of(terms):
        if not terms:
            return Tensor(np.float64(0.0))
        acc = terms[0]
        for t in terms[1:]:
            acc = gc.add(acc, t)
        return gc.mul(acc, 1.0 / len(terms))

    l_img = gc.mul(img_sse, 1.0 / img_count)
    l_seg = mean_of(seg_terms)
    l_depth = mean_of(depth_terms)
    l_kp = mean_of(kp_terms)
    l_latent = mean_of(latent_terms)

    total = gc.add(l_img, gc.mul(l_latent, lam_latent))
    total = gc.add(total, gc.mul(l_depth, lam_depth))
    if lam_seg > 0:
        total = gc.add(total, gc.mul(l_seg, lam_seg))
    if lam_kp > 0:
        total = gc.add(total, gc.mul(l_kp, lam_kp))

    breakdown = LossBreakdown(
        image=float(l_img.data), latent=float(l_latent.data),
        depth=float(l_depth.data), seg=float(l_seg.data), kp=float(l_kp.data),
        lam_seg=lam_seg, lam_kp=lam_kp, lam_latent=lam_latent, lam_depth=lam_depth)
    return total, breakdown


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 6000
    seed: int = 0
    batch_instances: int = 4
    views_per_instance: int = 2
    rays_per_view: int = 512
    lr_weights: float = 4e-4
    lr_codes: float = 1e-3
    lam_seg: float = 0.5       # segmentation weight (zeroed at inference)
    lam_kp: float = 1.0        # keypoint weight (zeroed at inference)
    lam_latent: float = 1e-3
    lam_depth: float = 0.1
    code_init_std: float = 0.01
    checkpoint_every: int = 2000

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    weights: ModelWeights
    codes: np.ndarray          # (N_obj, k_obj) trained object codes
    arch: ArchConfig
    train_config: dict
    iteration: int
    rng_state: dict

    def object_code(self, index: int, q: float) -> LatentCode:
        return LatentCode.from_articulation(q, self.codes[index])

    def mean_object_code(self) -> np.ndarray:
        return self.codes.mean(axis=0)


@dataclass
class LoadedInstance:
    object_index: int
    q: float
    keypoints: np.ndarray  # (N_kp, 3)
    views: list[PosedView]


def load_training_set(manifest: DatasetManifest) -> list[LoadedInstance]:
    """Pull the whole dataset into memory (desk scale: tens of MB)."""
    out = []
    for inst in manifest.instances:
        q, kps = manifest.keypoints(inst)
        views = [manifest.load_view(rec) for rec in inst["views"]]
        out.append(LoadedInstance(object_index=inst["object"], q=q,
                                  keypoints=kps.positions, views=views))
    return out


def _sample_view(view: PosedView, rng: np.random.Generator, rays_per_view: int,
                 scene_radius: float, with_seg: bool) -> ViewSample:
    h, w = view.height, view.width
    n = min(rays_per_view, h * w)
    flat = rng.choice(h * w, size=n, replace=False)
    rays = pixel_rays(view.e, view.k, h, w, flat_pixels=flat, scene_radius=scene_radius)
    rgb = view.image.reshape(-1, 3)[flat]
    seg = view.seg.reshape(-1)[flat] if (with_seg and view.seg is not None) else None
    return ViewSample(rays=rays, target_rgb=rgb, target_seg=seg)


def train(manifest: DatasetManifest, config: TrainConfig,
          arch: ArchConfig | None = None, out_dir=None,
          log_fn=None) -> tuple[Checkpoint, list[LossBreakdown]]:
    """Fit codes and weights jointly with Adam; deterministic for a seed.

    Writes periodic checkpoints and a per-iteration CSV log when out_dir is
    given. Divergence (non-finite loss or gradient) aborts with a
    TrainingDivergedError pointing at the last good checkpoint.
    """
    if arch is None:
        arch = ArchConfig(category=manifest.category)
    elif arch.category != manifest.category:
        raise ValueError(f"arch category {arch.category!r} != dataset {manifest.category!r}")
    rng = np.random.default_rng(config.seed)
    instances = load_training_set(manifest)
    n_obj = manifest.n_objects

    weights = ModelWeights.init(arch, rng)
    codes = [Tensor(rng.normal(0.0, config.code_init_std, size=arch.k_obj),
                    requires_grad=True) for _ in range(n_obj)]
    art_codes = {}  # articulation scalar -> constant tensor, shared
    for inst in instances:
        if inst.q not in art_codes:
            art_codes[inst.q] = Tensor(articulation_to_code(inst.q))

    opt_w = Adam(weights.named_parameters(), lr=config.lr_weights)
    opt_z = Adam([(f"codes.{i}", c) for i, c in enumerate(codes)], lr=config.lr_codes)

    out_dir = Path(out_dir) if out_dir is not None else None
    last_ckpt_path = None
    history: list[LossBreakdown] = []
    csv_writer = None
    csv_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / "train_log.csv", "w", newline="")
        fieldnames = ["iteration", "image", "latent", "depth", "seg", "kp",
                      "lam_seg", "lam_kp", "lam_latent", "lam_depth", "total",
                      "lr_weights", "lr_codes"]
        csv_writer = csv.DictWriter(csv_file, fieldnames=fieldnames)
        csv_writer.writeheader()

    def make_checkpoint(iteration: int) -> Checkpoint:
        return Checkpoint(weights=weights,
                          codes=np.stack([c.data for c in codes]),
                          arch=arch, train_config=config.to_dict(),
                          iteration=iteration,
                          rng_state=rng.bit_generator.state)

    try:
        for it in range(1, config.iterations + 1):
            idx = rng.choice(len(instances), size=min(config.batch_instances, len(instances)),
                             replace=False)
            batch = []
            for i in idx:
                inst = instances[i]
                n_views = min(config.views_per_instance, len(inst.views))
                view_idx = rng.choice(len(inst.views), size=n_views, replace=False)
                views = [_sample_view(inst.views[v], rng, config.rays_per_view,
                                      arch.scene_radius, config.lam_seg > 0)
                         for v in view_idx]
                batch.append(InstanceBatch(z_art=art_codes[inst.q],
                                           z_obj=codes[inst.object_index],
                                           views=views,
                                           target_keypoints=inst.keypoints))
            try:
                loss, breakdown = total_loss(batch, weights, config.lam_seg,
                                             config.lam_kp, config.lam_latent,
                                             config.lam_depth)
                if not np.isfinite(breakdown.total):
                    raise NonFiniteError("total loss is not finite")
                opt_w.zero_grad()
                opt_z.zero_grad()
                gc.backward(loss)
                opt_w.step()
                opt_z.step()
            except NonFiniteError as err:
                raise TrainingDivergedError(
                    f"training diverged at iteration {it}: {err}",
                    last_checkpoint=last_ckpt_path) from err

            history.append(breakdown)
            if csv_writer is not None:
                row = breakdown.as_row()
                row.update(iteration=it, lr_weights=config.lr_weights,
                           lr_codes=config.lr_codes)
                csv_writer.writerow(row)
            if log_fn is not None and (it % 100 == 0 or it == 1):
                log_fn(it, breakdown)
            if out_dir is not None and config.checkpoint_every > 0 \
                    and it % config.checkpoint_every == 0 and it < config.iterations:
                last_ckpt_path = out_dir / f"checkpoint_{it:06d}.bin"
                save_checkpoint(make_checkpoint(it), last_ckpt_path)
    finally:
        if csv_file is not None:
            csv_file.close()

    ckpt = make_checkpoint(config.iterations)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    return ckpt, history


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferConfig:
    iterations: int = 400
    lr: float = 1e-2
    seed: int = 0
    rays_per_view: int = 128
    lam_latent: float = 1e-3
    loss_threshold: float = 0.05   # final image loss above this sets the warning flag
    q_inits: tuple[float, ...] = (0.5,)


@dataclass
class InferResult:
    code: LatentCode
    final_image_loss: float        # full-frame mean squared rgb error
    iterations: int
    converged: bool                # False = warning flag, not an error
    history: list[float]           # sampled-ray image loss per iteration


def _full_frame_image_loss(weights: ModelWeights, z_art: np.ndarray,
                           z_obj: np.ndarray, views: list[PosedView]) -> float:
    from .raymarch import render_image  # local import to avoid cycle at module load
    code = LatentCode(z_art, z_obj)
    errs = []
    for view in views:
        img = render_image(weights, code, view.e, view.k, view.height, view.width)
        errs.append(np.mean((img - view.image) ** 2))
    return float(np.mean(errs))


def infer_latent(checkpoint: Checkpoint, views: list[PosedView],
                 config: InferConfig) -> InferResult:
    """Fit a latent code to posed images with all network weights frozen.

    Only the image term (plus the latent prior) is optimized: the
    segmentation and keypoint weights are fixed at zero here. The object part
    starts at the mean trained code and the articulation part at mid-range;
    extra entries in q_inits run independent restarts, keeping the fit with
    the lowest final loss.
    """
    if not views:
        raise ValueError("need at least one posed view")
    weights = checkpoint.weights
    arch = checkpoint.arch
    frozen = [t for _, t in weights.named_parameters()]
    saved_flags = [t.requires_grad for t in frozen]
    for t in frozen:
        t.requires_grad = False

    best: InferResult | None = None
    try:
        for start_i, q0 in enumerate(config.q_inits):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, start_i]))
            z_art = Tensor(articulation_to_code(q0), requires_grad=True)
            z_obj = Tensor(checkpoint.mean_object_code().copy(), requires_grad=True)
            opt = Adam([("z_art", z_art), ("z_obj", z_obj)], lr=config.lr)
            history = []
            for _ in range(config.iterations):
                batch_views = [_sample_view(v, rng, config.rays_per_view,
                                            arch.scene_radius, with_seg=False)
                               for v in views]
                inst = InstanceBatch(z_art=z_art, z_obj=z_obj, views=batch_views,
                                     z_art_free=True)
                loss, breakdown = total_loss([inst], weights, lam_seg=0.0, lam_kp=0.0,
                                             lam_latent=config.lam_latent,
                                             lam_depth=0.0)
                opt.zero_grad()
                gc.backward(loss)
                opt.step()
                history.append(breakdown.image)
            final = _full_frame_image_loss(weights, z_art.data, z_obj.data, views)
            result = InferResult(code=LatentCode(z_art.data.copy(), z_obj.data.copy()),
                                 final_image_loss=final,
                                 iterations=config.iterations,
                                 converged=final <= config.loss_threshold,
                                 history=history)
            if best is None or result.final_image_loss < best.final_image_loss:
                best = result
    finally:
        for t, f in zip(frozen, saved_flags):
            t.requires_grad = f
    return best


# ---------------------------------------------------------------------------
# checkpoint serialization


def _arch_hash(arch: ArchConfig) -> str:
    blob = json.dumps(arch.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _checkpoint_tensors(cp: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in cp.weights.named_parameters()]
    out.append(("codes", cp.codes))
    return out


def save_checkpoint(cp: Checkpoint, path) -> None:
    """Binary layout: magic, version u32, header-length u64, JSON header,
    then raw little-endian float64 payloads in header directory order."""
    tensors = _checkpoint_tensors(cp)
    directory = []
    offset = 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "arch": cp.arch.to_dict(),
        "train_config": cp.train_config,
        "iteration": cp.iteration,
        "rng_state": cp.rng_state,
        "tensors": directory,
        "total_values": offset,
        "arch_hash": _arch_hash(cp.arch),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected_arch: ArchConfig | None = None) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path.name}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path.name}: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()

    arch = ArchConfig.from_dict(header["arch"])
    if header.get("arch_hash") != _arch_hash(arch):
        raise CheckpointError(f"{path.name}: architecture hash mismatch (corrupt header)")
    if expected_arch is not None and arch != expected_arch:
        ours = expected_arch.to_dict()
        theirs = arch.to_dict()
        diff = {k: (theirs[k], ours[k]) for k in ours if theirs.get(k) != ours[k]}
        raise CheckpointError(f"{path.name}: architecture mismatch: {diff}")

    expected_bytes = header["total_values"] * 8
    if len(payload) != expected_bytes:
        raise CheckpointError(
            f"{path.name}: corrupt checkpoint, payload {len(payload)} bytes, "
            f"expected {expected_bytes}")
    flat = np.frombuffer(payload, dtype="<f8")

    rng = np.random.default_rng(0)
    weights = ModelWeights.init(arch, rng)
    by_name = {rec["name"]: rec for rec in header["tensors"]}
    for name, t in weights.named_parameters():
        rec = by_name[name]
        n = int(np.prod(rec["shape"]))
        t.data = flat[rec["offset"]:rec["offset"] + n].reshape(rec["shape"]).copy()
    rec = by_name["codes"]
    n = int(np.prod(rec["shape"]))
    codes = flat[rec["offset"]:rec["offset"] + n].reshape(rec["shape"]).copy()
    return Checkpoint(weights=weights, codes=codes, arch=arch,
                      train_config=header["train_config"],
                      iteration=header["iteration"],
                      rng_state=header["rng_state"])
