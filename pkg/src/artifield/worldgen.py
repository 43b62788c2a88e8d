"""Procedural articulated scenes and their analytic ground truth.

Two object categories: cabinets with a revolute front door ("closet") and
cabinets with a prismatic front panel ("drawer"). Geometry is restricted to
boxes so that ray intersections, depths, segmentations and keypoints are all
exact; this module doubles as the verification oracle for everything the
learned model predicts.

Conventions (shared by every consumer):
  * world frame: z up, scene body centered at the origin, front face at
    y = -hy; cameras are sampled on the front hemisphere (y < 0).
  * articulation q in [0, 1]. Revolute: door angle alpha(q) = -q * pi/2
    about the vertical (+z) hinge axis, so q=0 is closed (0 deg) and q=1 is
    fully open (90 deg), swinging toward the cameras. Prismatic: the panel
    translates by q * travel along the outward slide axis (0, -1, 0).
  * cameras use the pinhole model with +z forward and +y down;
    E = [R | t] maps world to camera, K is upper triangular.
  * segmentation classes: 0 background, 1 body, 2 door, 3 handle.
  * depth images store hit distance along the (unit) ray; background is +inf.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

SEG_CLASSES = ("background", "body", "door", "handle")
CLOSET_KEYPOINT_NAMES = ("handle", "hinge_top", "hinge_bottom", "goal")
DRAWER_KEYPOINT_NAMES = ("handle", "rail_front", "rail_back", "goal")

# Documented sampling ranges for sample_scene.
BODY_EXTENT_RANGE = (0.3, 1.0)      # full extents per axis, meters
ALBEDO_RANGE = (0.1, 0.9)
DOOR_THICKNESS_RANGE = (0.015, 0.03)
DEFAULT_LIGHT_DIR = (0.35, -0.45, 0.82)  # unit-normalized below, toward the light
AMBIENT = 0.35


def keypoint_names(category: str) -> tuple[str, ...]:
    if category == "closet":
        return CLOSET_KEYPOINT_NAMES
    if category == "drawer":
        return DRAWER_KEYPOINT_NAMES
    raise ValueError(f"unknown category {category!r}")


@dataclass
class KeypointSet:
    """Named 3D keypoints in the world frame, in the category's fixed order."""

    names: tuple[str, ...]
    positions: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.names = tuple(self.names)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(len(self.names), 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("keypoint coordinates must be finite")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.positions[self.names.index(name)]

    def as_dict(self) -> dict[str, list[float]]:
        return {n: [float(v) for v in p] for n, p in zip(self.names, self.positions)}

    @classmethod
    def from_dict(cls, names: tuple[str, ...], d: dict) -> "KeypointSet":
        return cls(names, np.array([d[n] for n in names], dtype=np.float64))


@dataclass
class SceneModel:
    """Analytic articulated box model; the data-generation and eval oracle."""

    category: str                  # closet | drawer
    joint_kind: str                # revolute | prismatic
    body_half: np.ndarray          # (3,) half extents, body centered at origin
    door_origin: np.ndarray        # (3,) world position of the door frame origin (q=0)
    door_lo: np.ndarray            # (3,) panel AABB in the door frame
    door_hi: np.ndarray
    handle_local: np.ndarray       # (3,) handle center in the door frame, on the outer face
    handle_half: np.ndarray        # (3,) handle box half extents
    goal: np.ndarray               # (3,) point strictly inside the body
    albedo: dict[str, np.ndarray]  # part name -> rgb in [0,1]
    light_dir: np.ndarray          # (3,) unit vector toward the light
    travel: float = 0.0            # prismatic travel, meters
    slide_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))

    def __post_init__(self):
        for name in ("body_half", "door_origin", "door_lo", "door_hi",
                     "handle_local", "handle_half", "goal", "slide_axis"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.albedo = {k: np.asarray(v, dtype=np.float64) for k, v in self.albedo.items()}
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.category not in ("closet", "drawer"):
            raise ValueError(f"unknown category {self.category!r}")
        if self.joint_kind not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint kind {self.joint_kind!r}")
        if self.joint_kind == "prismatic" and self.travel <= 0:
            raise ValueError("prismatic travel must be positive")
        lo, hi = self.door_lo, self.door_hi
        hl = self.handle_local
        on_panel = (lo[0] - 1e-9 <= hl[0] <= hi[0] + 1e-9
                    and lo[2] - 1e-9 <= hl[2] <= hi[2] + 1e-9
                    and abs(hl[1] - lo[1]) < 1e-9)  # outer face is the -y side
        if not on_panel:
            raise ValueError("handle center must lie on the door panel's outer face")
        if not np.all(np.abs(self.goal) < self.body_half):
            raise ValueError("goal point must lie strictly inside the body")

    @property
    def diagonal(self) -> float:
        """Body bounding-box diagonal, the normalizer for percentage errors."""
        return float(np.linalg.norm(2.0 * self.body_half))

    def door_frame(self, q: float) -> tuple[np.ndarray, np.ndarray]:
        """Rigid transform (R, p) of the door frame at articulation q."""
        if not (0.0 <= q <= 1.0):
            raise ValueError(f"articulation q={q} outside [0, 1]")
        if self.joint_kind == "revolute":
            alpha = -q * np.pi / 2.0
            ca, sa = np.cos(alpha), np.sin(alpha)
            r = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
            return r, self.door_origin.copy()
        return np.eye(3), self.door_origin + q * self.travel * self.slide_axis

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        d["albedo"] = {k: list(map(float, v)) for k, v in self.albedo.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneModel":
        return cls(**d)


def sample_scene(seed: int, category: str = "closet") -> SceneModel:
    """Draw a random scene; deterministic for a fixed seed.

    Body full extents are uniform in 0.3-1.0 m per axis and per-part albedo
    uniform in [0.1, 0.9]; the remaining ranges are internal choices sized so
    every sample satisfies the model invariants.
    """
    rng = np.random.default_rng(seed)
    ext = rng.uniform(*BODY_EXTENT_RANGE, size=3)
    half = ext / 2.0
    hx, hy, hz = half
    t = rng.uniform(*DOOR_THICKNESS_RANGE)

    if category == "closet":
        # Door frame origin on the vertical hinge line at the left front edge.
        door_origin = np.array([-hx, -hy - t / 2.0, 0.0])
        door_lo = np.array([0.0, -t / 2.0, -hz])
        door_hi = np.array([2.0 * hx, t / 2.0, hz])
        handle_local = np.array([rng.uniform(0.75, 0.92) * 2.0 * hx,
                                 -t / 2.0,
                                 rng.uniform(-0.3, 0.3) * hz])
        travel, joint = 0.0, "revolute"
    elif category == "drawer":
        door_origin = np.array([0.0, -hy - t / 2.0, 0.0])
        door_lo = np.array([-hx, -t / 2.0, -hz])
        door_hi = np.array([hx, t / 2.0, hz])
        handle_local = np.array([rng.uniform(-0.25, 0.25) * hx,
                                 -t / 2.0,
                                 rng.uniform(-0.25, 0.25) * hz])
        travel, joint = float(rng.uniform(0.4, 0.7) * ext[1]), "prismatic"
    else:
        raise ValueError(f"unknown category {category!r}")

    handle_half = np.array([0.012, 0.018, rng.uniform(0.03, 0.06)])
    goal = rng.uniform(-0.5, 0.5, size=3) * half
    albedo = {part: rng.uniform(*ALBEDO_RANGE, size=3)
              for part in ("body", "door", "handle")}
    light = np.asarray(DEFAULT_LIGHT_DIR, dtype=np.float64)
    return SceneModel(category=category, joint_kind=joint, body_half=half,
                      door_origin=door_origin, door_lo=door_lo, door_hi=door_hi,
                      handle_local=handle_local, handle_half=handle_half,
                      goal=goal, albedo=albedo,
                      light_dir=light / np.linalg.norm(light), travel=travel)


def keypoints_analytic(model: SceneModel, q: float) -> KeypointSet:
    """Exact keypoints at articulation q.

    Hinge/rail and goal points carry no q dependence at all; only the handle
    moves (rotation about the hinge axis, or translation along the slide).
    """
    r, p = model.door_frame(q)  # validates q
    handle = r @ model.handle_local + p
    if model.category == "closet":
        top = model.door_origin + np.array([0.0, 0.0, model.door_hi[2]])
        bottom = model.door_origin + np.array([0.0, 0.0, model.door_lo[2]])
        pts = np.stack([handle, top, bottom, model.goal])
        return KeypointSet(CLOSET_KEYPOINT_NAMES, pts)
    hy = model.body_half[1]
    rail_front = np.array([0.0, -hy, 0.0])
    rail_back = np.array([0.0, hy, 0.0])
    pts = np.stack([handle, rail_front, rail_back, model.goal])
    return KeypointSet(DRAWER_KEYPOINT_NAMES, pts)


# ---------------------------------------------------------------------------
# cameras


def make_intrinsics(height: int, width: int, fov_deg: float = 45.0) -> np.ndarray:
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return np.array([[f, 0.0, width / 2.0],
                     [0.0, f, height / 2.0],
                     [0.0, 0.0, 1.0]])


def look_at_extrinsic(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera [R | t] looking from position toward target, +y down."""
    position = np.asarray(position, dtype=np.float64)
    z_c = np.asarray(target, dtype=np.float64) - position
    z_c = z_c / np.linalg.norm(z_c)
    x_c = np.cross(z_c, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x_c)
    if nx < 1e-9:
        raise ValueError("camera looking along the up axis")
    x_c = x_c / nx
    y_c = np.cross(z_c, x_c)
    r = np.stack([x_c, y_c, z_c])
    return np.hstack([r, (-r @ position)[:, None]])


def camera_center(e: np.ndarray) -> np.ndarray:
    r, t = e[:, :3], e[:, 3]
    return -r.T @ t


def project_points(e: np.ndarray, k: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns ((N, 2) pixel coords, (N,) camera-z)."""
    pts = np.atleast_2d(pts)
    cam = pts @ e[:, :3].T + e[:, 3]
    z = cam[:, 2]
    uv = (cam @ k.T)[:, :2] / z[:, None]
    return uv, z


def sample_camera(rng: np.random.Generator, model: SceneModel, height: int, width: int,
                  radius_range=(1.5, 2.5), elev_range_deg=(10.0, 45.0),
                  azim_range_deg=(-90.0, 90.0), fov_deg: float = 45.0
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Random front-hemisphere camera looking at the scene center."""
    radius = rng.uniform(*radius_range) * model.diagonal
    azim = np.deg2rad(rng.uniform(*azim_range_deg))
    elev = np.deg2rad(rng.uniform(*elev_range_deg))
    horiz = np.array([np.sin(azim), -np.cos(azim), 0.0])
    position = radius * (np.cos(elev) * horiz + np.sin(elev) * np.array([0.0, 0.0, 1.0]))
    return look_at_extrinsic(position, (0.0, 0.0, 0.0)), make_intrinsics(height, width, fov_deg)


# ---------------------------------------------------------------------------
# raycasting


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray,
             eps: float = 1e-9) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab-method ray/AABB intersection, vectorized over rays.

    Returns (t_enter, hit_mask, normals). Axis-parallel rays are handled
    exactly: a parallel axis contributes (-inf, +inf) when the origin lies
    inside its slab and kills the hit otherwise.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    par = np.abs(dirs) < 1e-15
    inside = (origins >= lo) & (origins <= hi)
    tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = tmin_ax.max(axis=1)
    t_exit = tmax_ax.min(axis=1)
    hit = (t_exit >= t_enter) & (t_exit > eps) & (t_enter > eps)
    axis = np.argmax(tmin_ax, axis=1)
    normals = np.zeros_like(dirs)
    rows = np.arange(dirs.shape[0])
    normals[rows, axis] = -np.sign(dirs[rows, axis])
    return t_enter, hit, normals


def _part_geometry(model: SceneModel, q: float):
    """Per-part (class_id, local lo/hi, rigid R, p); identity for the body."""
    r, p = model.door_frame(q)
    body_lo, body_hi = -model.body_half, model.body_half
    handle_lo = model.handle_local - model.handle_half
    handle_hi = model.handle_local + model.handle_half
    return [
        ("body", 1, body_lo, body_hi, np.eye(3), np.zeros(3)),
        ("door", 2, model.door_lo, model.door_hi, r, p),
        ("handle", 3, handle_lo, handle_hi, r, p),
    ]


def raycast_scene(model: SceneModel, q: float, origins: np.ndarray, dirs: np.ndarray,
                  parts: tuple[str, ...] = ("body", "door", "handle")
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest intersection over the selected parts.

    Returns (t (R,), class_id (R,) with 0 for miss, world normals (R, 3)).
    ``parts`` lets callers probe a subset (e.g. door only) for oracle checks.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_cls = np.zeros(n, dtype=np.uint8)
    best_nrm = np.zeros((n, 3))
    for name, cls, lo, hi, r, p in _part_geometry(model, q):
        if name not in parts:
            continue
        o_local = (origins - p) @ r
        d_local = dirs @ r
        t, hit, nrm_local = ray_aabb(o_local, d_local, lo, hi)
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        best_cls[closer] = cls
        best_nrm[closer] = nrm_local[closer] @ r.T
    return best_t, best_cls, best_nrm


@dataclass
class PosedView:
    """One observation: image, optional ground-truth seg/depth, and camera."""

    image: np.ndarray            # (H, W, 3) in [0, 1]
    e: np.ndarray                # (3, 4) world-to-camera
    k: np.ndarray                # (3, 3)
    seg: np.ndarray | None = None    # (H, W) class ids
    depth: np.ndarray | None = None  # (H, W) hit distance, +inf background

    def __post_init__(self):
        r = self.e[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or np.linalg.det(r) < 0:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")
        if self.k[0, 0] <= 0 or self.k[1, 1] <= 0 or abs(self.k[1, 0]) + abs(self.k[2, 0]) + abs(self.k[2, 1]) > 0:
            raise ValueError("intrinsics must be upper triangular with positive focals")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def view_ray_grid(e: np.ndarray, k: np.ndarray, height: int, width: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-frame rays through all pixel centers (row-major order)."""
    if k[0, 0] == 0 or k[1, 1] == 0:
        raise ValueError("degenerate camera: zero focal length")
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(height * width)], axis=1)
    cam_dirs = pix @ np.linalg.inv(k).T
    world_dirs = cam_dirs @ e[:, :3]
    world_dirs /= np.linalg.norm(world_dirs, axis=1, keepdims=True)
    return camera_center(e), world_dirs


def raycast_render(model: SceneModel, q: float, e: np.ndarray, k: np.ndarray,
                   height: int, width: int) -> PosedView:
    """Render RGB/seg/depth with per-pixel nearest ray-box intersections.

    Lambert shading with a single directional light plus a constant ambient
    term; background pixels are white with class 0 and depth +inf.
    """
    if height < 8 or width < 8:
        raise ValueError("image must be at least 8x8")
    origin, dirs = view_ray_grid(e, k, height, width)
    origins = np.broadcast_to(origin, dirs.shape)
    t, cls, nrm = raycast_scene(model, q, origins, dirs)

    shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, nrm @ model.light_dir)
    rgb = np.ones((dirs.shape[0], 3))
    for name, cid in (("body", 1), ("door", 2), ("handle", 3)):
        mask = cls == cid
        rgb[mask] = model.albedo[name] * shade[mask, None]
    return PosedView(image=rgb.reshape(height, width, 3), e=e, k=k,
                     seg=cls.reshape(height, width),
                     depth=t.reshape(height, width))


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class GenConfig:
    """Dataset generation parameters; all defaults are desk scale."""

    category: str = "closet"
    n_objects: int = 20
    n_articulations: int = 10
    n_views: int = 8
    height: int = 32
    width: int = 32
    seed: int = 0
    radius_range: tuple[float, float] = (1.5, 2.5)
    elev_range_deg: tuple[float, float] = (10.0, 45.0)
    azim_range_deg: tuple[float, float] = (-90.0, 90.0)
    fov_deg: float = 45.0
    light_jitter_deg: float = 0.0

    @property
    def n_instances(self) -> int:
        return self.n_objects * self.n_articulations

    @property
    def n_files_expected(self) -> int:
        return self.n_instances * self.n_views

    def articulation_grid(self) -> np.ndarray:
        if self.n_articulations == 1:
            return np.array([0.5])
        return np.linspace(0.0, 1.0, self.n_articulations)


@dataclass
class DatasetManifest:
    root: Path
    category: str
    n_objects: int
    n_articulations: int
    n_views: int
    height: int
    width: int
    seed: int
    objects: list[dict]    # {index, scene_file, diagonal}
    instances: list[dict]  # {object, articulation, q, keypoints_file, views: [...]}

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    def scene(self, object_index: int) -> SceneModel:
        rec = self.objects[object_index]
        with open(self.root / rec["scene_file"]) as f:
            return SceneModel.from_dict(json.load(f))

    def keypoints(self, instance: dict) -> tuple[float, KeypointSet]:
        with open(self.root / instance["keypoints_file"]) as f:
            d = json.load(f)
        return d["q"], KeypointSet.from_dict(keypoint_names(self.category), d["points"])

    def load_view(self, view_rec: dict, with_seg: bool = True) -> PosedView:
        image = read_ppm(self.root / view_rec["image"])
        seg = read_pgm(self.root / view_rec["seg"]) if with_seg else None
        with open(self.root / view_rec["camera"]) as f:
            cam = json.load(f)
        return PosedView(image=image, seg=seg,
                         e=np.array(cam["E"], dtype=np.float64),
                         k=np.array(cam["K"], dtype=np.float64))


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _jitter_light(model: SceneModel, rng: np.random.Generator, jitter_deg: float) -> None:
    if jitter_deg <= 0:
        return
    scale = np.sin(np.deg2rad(jitter_deg))
    light = model.light_dir + rng.uniform(-scale, scale, size=3)
    model.light_dir = light / np.linalg.norm(light)


def generate_dataset(config: GenConfig, out_dir) -> DatasetManifest:
    """Write a full posed-image dataset and its manifest under out_dir.

    Layout: obj_###/scene.json, obj_###/art_##/{keypoints.json,
    view_##.ppm, view_##_seg.pgm, view_##_cam.json}, manifest.json at the
    root. Every byte is a pure function of the config, so regeneration with
    the same seed is file-identical.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    q_grid = config.articulation_grid()
    objects, instances = [], []
    for oi in range(config.n_objects):
        model = sample_scene(_derived_seed(config.seed, oi), config.category)
        _jitter_light(model, np.random.default_rng(_derived_seed(config.seed, oi, 91)),
                      config.light_jitter_deg)
        obj_dir = root / f"obj_{oi:03d}"
        obj_dir.mkdir(exist_ok=True)
        scene_file = f"obj_{oi:03d}/scene.json"
        with open(root / scene_file, "w") as f:
            json.dump(model.to_dict(), f, indent=1, sort_keys=True)
        objects.append({"index": oi, "scene_file": scene_file,
                        "diagonal": model.diagonal})
        for ai, q in enumerate(q_grid):
            art_dir = obj_dir / f"art_{ai:02d}"
            art_dir.mkdir(exist_ok=True)
            kps = keypoints_analytic(model, float(q))
            kp_file = f"obj_{oi:03d}/art_{ai:02d}/keypoints.json"
            with open(root / kp_file, "w") as f:
                json.dump({"q": float(q), "points": kps.as_dict()}, f, indent=1, sort_keys=True)
            views = []
            for vi in range(config.n_views):
                rng = np.random.default_rng(_derived_seed(config.seed, oi, ai, vi))
                e, k = sample_camera(rng, model, config.height, config.width,
                                     config.radius_range, config.elev_range_deg,
                                     config.azim_range_deg, config.fov_deg)
                view = raycast_render(model, float(q), e, k, config.height, config.width)
                base = f"obj_{oi:03d}/art_{ai:02d}/view_{vi:02d}"
                write_ppm(root / f"{base}.ppm", view.image)
                write_pgm(root / f"{base}_seg.pgm", view.seg)
                with open(root / f"{base}_cam.json", "w") as f:
                    json.dump({"E": e.tolist(), "K": k.tolist()}, f, indent=1, sort_keys=True)
                views.append({"image": f"{base}.ppm", "seg": f"{base}_seg.pgm",
                              "camera": f"{base}_cam.json"})
            instances.append({"object": oi, "articulation": ai, "q": float(q),
                              "keypoints_file": kp_file, "views": views})

    manifest = {
        "category": config.category,
        "n_objects": config.n_objects,
        "n_articulations": config.n_articulations,
        "n_views": config.n_views,
        "height": config.height,
        "width": config.width,
        "seed": config.seed,
        "config": asdict(config),
        "objects": objects,
        "instances": instances,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return load_manifest(root / "manifest.json")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    with open(path) as f:
        d = json.load(f)
    manifest = DatasetManifest(
        root=path.parent, category=d["category"], n_objects=d["n_objects"],
        n_articulations=d["n_articulations"], n_views=d["n_views"],
        height=d["height"], width=d["width"], seed=d["seed"],
        objects=d["objects"], instances=d["instances"])
    if check_files:
        n_images = 0
        for inst in manifest.instances:
            for rec in inst["views"]:
                for key in ("image", "seg", "camera"):
                    if not (manifest.root / rec[key]).exists():
                        raise FileNotFoundError(f"dataset file missing: {rec[key]}")
                n_images += 1
        expected = manifest.n_objects * manifest.n_articulations * manifest.n_views
        if n_images != expected:
            raise ValueError(f"manifest lists {n_images} views, expected {expected}")
    return manifest


def dataset_digest(manifest: DatasetManifest) -> str:
    """SHA-256 over every file referenced by the manifest (order-stable)."""
    h = hashlib.sha256()
    for inst in manifest.instances:
        for rec in inst["views"]:
            for key in ("image", "seg", "camera"):
                h.update((manifest.root / rec[key]).read_bytes())
    for obj in manifest.objects:
        h.update((manifest.root / obj["scene_file"]).read_bytes())
    return h.hexdigest()
