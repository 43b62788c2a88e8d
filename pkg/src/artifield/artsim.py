"""Forward simulation of object motion by latent-code manipulation.

Movement is simulated purely in latent space: the articulation part of the
code walks from the current articulation to a target along the unit circle
while the object part stays fixed, and each intermediate code is decoded
into keypoints, images and segmentation maps. Interpolation is linear in the
articulation scalar q (a geodesic on the normalized circle); interpolating
the raw 2-vector instead could leave the circle and alias through the
normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodecoder import Checkpoint
from .neuralfield import LatentCode, articulation_to_code, keypoint_predict
from .netpbm import write_pgm, write_ppm
from .raymarch import render_image, render_segmentation
from .worldgen import KeypointSet


@dataclass
class KeypointTrajectory:
    """Predicted keypoints along an articulation sweep (T+1 entries)."""

    steps: list[tuple[float, KeypointSet]]
    source_object_code: np.ndarray

    @property
    def t_steps(self) -> int:
        return len(self.steps) - 1

    @property
    def articulations(self) -> np.ndarray:
        return np.array([q for q, _ in self.steps])

    def handle_path(self) -> np.ndarray:
        return np.stack([kps["handle"] for _, kps in self.steps])

    def to_dict(self) -> dict:
        return {"t_steps": self.t_steps,
                "source_object_code": self.source_object_code.tolist(),
                "steps": [{"q": q, "points": kps.as_dict()} for q, kps in self.steps]}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, names: tuple[str, ...]) -> "KeypointTrajectory":
        steps = [(rec["q"], KeypointSet.from_dict(names, rec["points"]))
                 for rec in d["steps"]]
        return cls(steps=steps,
                   source_object_code=np.array(d["source_object_code"]))


def interpolate_codes(z_current: LatentCode, q_target: float, t_steps: int
                      ) -> list[LatentCode]:
    """T+1 codes walking q linearly from the current value to the target.

    The object part is passed through untouched; endpoints reproduce
    q_current and q_target exactly.
    """
    if not (0.0 <= q_target <= 1.0):
        raise ValueError(f"target articulation {q_target} outside [0, 1]")
    if t_steps < 1:
        raise ValueError("need at least one interpolation step")
    q_current = z_current.q
    codes = []
    for t in range(t_steps + 1):
        q_t = q_current + (t / t_steps) * (q_target - q_current)
        codes.append(LatentCode(articulation_to_code(min(1.0, max(0.0, q_t))),
                                z_current.z_obj))
    return codes


def simulate_keypoints(checkpoint: Checkpoint, codes: list[LatentCode]
                       ) -> KeypointTrajectory:
    """Decode each code into named keypoints.

    Static points (hinges/rails, goal) are reported per step; their
    constancy is an evaluated property of the trained model, not enforced
    here.
    """
    if not codes:
        raise ValueError("need at least one latent code")
    steps = [(code.q, keypoint_predict(checkpoint.weights, code)) for code in codes]
    return KeypointTrajectory(steps=steps, source_object_code=codes[0].z_obj.copy())


def render_motion(checkpoint: Checkpoint, codes: list[LatentCode],
                  e: np.ndarray, k: np.ndarray, height: int, width: int,
                  out_dir) -> list[tuple[Path, Path]]:
    """One RGB + segmentation frame per code, written as step-indexed files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, code in enumerate(codes):
        img = render_image(checkpoint.weights, code, e, k, height, width)
        seg, _ = render_segmentation(checkpoint.weights, code, e, k, height, width)
        rgb_path = out_dir / f"frame_{i:04d}.ppm"
        seg_path = out_dir / f"frame_{i:04d}_seg.pgm"
        write_ppm(rgb_path, img)
        write_pgm(seg_path, seg)
        frames.append((rgb_path, seg_path))
    return frames
