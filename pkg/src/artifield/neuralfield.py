"""Learned scene representation: structured latent code, hypernetwork,
coordinate field and its output heads.

The latent code z = [z_art; z_obj] splits into a 2-vector articulation part
and a k_obj shape/appearance part. z_art is normalized onto the unit circle
before any downstream use; the scalar articulation is recovered as
q = (1 - x) / 2 from the normalized code, which is continuous everywhere on
the circle and mirror symmetric between the two half circles, so gradient
descent on z_art can never fall off a parameterization cliff.

All learned maps run on gradcore tensors so they are differentiable with
respect to both their weights and the latent code.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import LSTMParams, Tensor
from .worldgen import KeypointSet, SEG_CLASSES, keypoint_names

EPS_NORM = 1e-8


# ---------------------------------------------------------------------------
# articulation code algebra


def normalize_articulation(z_art: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a raw 2-vector onto the unit circle and read off q.

    Near-zero inputs (norm < 1e-8) fall back to the closed pose (1, 0),
    q = 0, instead of producing NaNs.
    """
    z_art = np.asarray(z_art, dtype=np.float64).reshape(2)
    norm = np.linalg.norm(z_art)
    if norm < EPS_NORM:
        return np.array([1.0, 0.0]), 0.0
    z_hat = z_art / norm
    return z_hat, float((1.0 - z_hat[0]) / 2.0)


def articulation_to_code(q: float) -> np.ndarray:
    """Inverse map onto the canonical upper half circle: q -> (1-2q, sin(acos(1-2q)))."""
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"articulation q={q} outside [0, 1]")
    x = 1.0 - 2.0 * q
    return np.array([x, np.sqrt(max(0.0, 1.0 - x * x))])


def normalize_articulation_t(z_art: Tensor) -> Tensor:
    """Graph version of the unit-circle projection; returns z_hat as a (2,) tensor."""
    if float(np.linalg.norm(z_art.data)) < EPS_NORM:
        return Tensor(np.array([1.0, 0.0]))  # documented fallback, constant
    norm = gc.sqrt(gc.tsum(gc.square(z_art)))
    return gc.div(z_art, norm)


def articulation_q_t(z_art: Tensor) -> Tensor:
    """Graph version of q = (1 - z_hat.x) / 2 (scalar tensor)."""
    z_hat = normalize_articulation_t(z_art)
    return gc.mul(gc.sub(1.0, gc.narrow(z_hat, 0, 0, 1)), 0.5)


@dataclass
class LatentCode:
    """z = [z_art; z_obj] plus the derived normalized articulation."""

    z_art: np.ndarray  # (2,)
    z_obj: np.ndarray  # (k_obj,)

    def __post_init__(self):
        self.z_art = np.asarray(self.z_art, dtype=np.float64).reshape(2)
        self.z_obj = np.asarray(self.z_obj, dtype=np.float64).ravel()

    @property
    def z_art_hat(self) -> np.ndarray:
        return normalize_articulation(self.z_art)[0]

    @property
    def q(self) -> float:
        return normalize_articulation(self.z_art)[1]

    @property
    def features(self) -> np.ndarray:
        """concat(z_art_hat, z_obj): the only form downstream maps consume."""
        return np.concatenate([self.z_art_hat, self.z_obj])

    @classmethod
    def from_articulation(cls, q: float, z_obj: np.ndarray) -> "LatentCode":
        return cls(articulation_to_code(q), np.asarray(z_obj, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"z_art": self.z_art.tolist(), "z_obj": self.z_obj.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentCode":
        return cls(np.array(d["z_art"]), np.array(d["z_obj"]))


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class ArchConfig:
    """Network sizes; defaults are sized for desk-scale training."""

    category: str = "closet"
    k_obj: int = 16
    feature_dim: int = 32          # n, the field output width
    field_hidden: int = 64
    hyper_hidden: int = 128
    rgb_hidden: int = 64
    seg_hidden: int = 64
    kp_hidden: int = 64
    lstm_hidden: int = 16
    n_march: int = 10
    scene_radius: float = 1.5      # meters, bounds the march interval
    init_step: float = 0.2         # initial raymarch step length, meters
    hyper_out_std: float = 1e-2    # final hypernetwork layer weight scale

    @property
    def latent_dim(self) -> int:
        return self.k_obj + 2

    @property
    def n_classes(self) -> int:
        return len(SEG_CLASSES)

    @property
    def keypoint_names(self) -> tuple[str, ...]:
        return keypoint_names(self.category)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_names)

    @property
    def field_shapes(self) -> list[tuple[int, int]]:
        """(in, out) per field layer: 3 -> hidden -> hidden -> feature_dim."""
        h, n = self.field_hidden, self.feature_dim
        return [(3, h), (h, h), (h, n)]

    @property
    def field_param_count(self) -> int:
        return sum(i * o + o for i, o in self.field_shapes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def _init_layers(shapes: Sequence[tuple[int, int]], rng: np.random.Generator
                 ) -> list[tuple[Tensor, Tensor]]:
    layers = []
    for fan_in, fan_out in shapes:
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((Tensor(w, requires_grad=True),
                       Tensor(np.zeros(fan_out), requires_grad=True)))
    return layers


def _flat_field_init(arch: ArchConfig, rng: np.random.Generator) -> np.ndarray:
    """A standard fan-in scaled draw of the whole field weight vector."""
    parts = []
    for fan_in, fan_out in arch.field_shapes:
        parts.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def mlp_forward(layers: Sequence[tuple[Tensor, Tensor]], x: Tensor,
                out_activation: str = "identity") -> Tensor:
    """tanh-hidden MLP; the output layer is identity or sigmoid."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = gc.affine(h, w, b)
        if i < len(layers) - 1:
            h = gc.tanh(h)
    if out_activation == "sigmoid":
        return gc.sigmoid(h)
    if out_activation == "identity":
        return h
    raise ValueError(f"unknown activation {out_activation!r}")


@dataclass
class RaymarcherWeights:
    """Recurrent step-length predictor: LSTM cell plus softplus step head."""

    lstm: LSTMParams
    step_w: Tensor  # (hidden, 1)
    step_b: Tensor  # (1,)


@dataclass
class ModelWeights:
    """Every trainable weight vector of the model, by role."""

    arch: ArchConfig
    hyper: list[tuple[Tensor, Tensor]]     # latent features -> field weights
    raymarcher: RaymarcherWeights
    rgb: list[tuple[Tensor, Tensor]]
    seg: list[tuple[Tensor, Tensor]]
    keypoint: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, arch: ArchConfig, rng: np.random.Generator) -> "ModelWeights":
        k, n = arch.latent_dim, arch.feature_dim
        hyper = _init_layers([(k, arch.hyper_hidden)], rng)
        # Small final weights keep early fields near the bias point; the bias
        # itself is a standard field init so hidden units are not symmetric.
        w_out = rng.standard_normal((arch.hyper_hidden, arch.field_param_count)) * arch.hyper_out_std
        b_out = _flat_field_init(arch, rng)
        hyper.append((Tensor(w_out, requires_grad=True), Tensor(b_out, requires_grad=True)))

        lstm = gc.lstm_init(n, arch.lstm_hidden, rng)
        step_w = Tensor(rng.standard_normal((arch.lstm_hidden, 1)) / np.sqrt(arch.lstm_hidden),
                        requires_grad=True)
        # softplus(step_b) == init_step
        step_b = Tensor(np.array([np.log(np.expm1(arch.init_step))]), requires_grad=True)

        rgb = _init_layers([(n, arch.rgb_hidden), (arch.rgb_hidden, 3)], rng)
        seg = _init_layers([(n, arch.seg_hidden), (arch.seg_hidden, arch.n_classes)], rng)
        kp = _init_layers([(k, arch.kp_hidden), (arch.kp_hidden, arch.kp_hidden),
                           (arch.kp_hidden, 3 * arch.n_keypoints)], rng)
        return cls(arch=arch, hyper=hyper,
                   raymarcher=RaymarcherWeights(lstm, step_w, step_b),
                   rgb=rgb, seg=seg, keypoint=kp)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Fixed, documented order: serialization and Adam both rely on it."""
        out: list[tuple[str, Tensor]] = []
        for group, layers in (("hyper", self.hyper), ("rgb", self.rgb),
                              ("seg", self.seg), ("keypoint", self.keypoint)):
            for i, (w, b) in enumerate(layers):
                out.append((f"{group}.{i}.w", w))
                out.append((f"{group}.{i}.b", b))
        rm = self.raymarcher
        out.append(("raymarcher.lstm.w", rm.lstm.w))
        out.append(("raymarcher.lstm.b", rm.lstm.b))
        out.append(("raymarcher.step.w", rm.step_w))
        out.append(("raymarcher.step.b", rm.step_b))
        return out


# ---------------------------------------------------------------------------
# learned maps


def code_features_t(z_art: Tensor | np.ndarray, z_obj: Tensor | np.ndarray) -> Tensor:
    """Graph-side concat(z_art_hat, z_obj) as a (1, k) tensor."""
    z_art = gc.as_tensor(z_art)
    z_obj = gc.as_tensor(z_obj)
    z_hat = normalize_articulation_t(z_art)
    return gc.reshape(gc.concat([z_hat, z_obj], axis=0), (1, -1))


def hyper_map(hyper: Sequence[tuple[Tensor, Tensor]], feats: Tensor) -> Tensor:
    """Map latent features (1, k) to the flat field weight vector (l,)."""
    theta = mlp_forward(hyper, feats)
    return gc.reshape(theta, (-1,))


def slice_field_weights(theta: Tensor, arch: ArchConfig) -> list[tuple[Tensor, Tensor]]:
    """Carve the flat field weight vector into per-layer (W, b) graph views.

    Slicing once and reusing the views amortizes the narrow/reshape nodes
    over the many field queries a raymarch performs.
    """
    theta = gc.as_tensor(theta)
    if theta.data.shape != (arch.field_param_count,):
        raise gc.ShapeMismatchError(
            f"field weight vector has {theta.data.shape}, expected ({arch.field_param_count},)")
    layers = []
    off = 0
    for fan_in, fan_out in arch.field_shapes:
        w = gc.reshape(gc.narrow(theta, 0, off, fan_in * fan_out), (fan_in, fan_out))
        off += fan_in * fan_out
        b = gc.narrow(theta, 0, off, fan_out)
        off += fan_out
        layers.append((w, b))
    return layers


def field_eval_layers(layers: Sequence[tuple[Tensor, Tensor]], x: Tensor | np.ndarray) -> Tensor:
    h = gc.as_tensor(x)
    for i, (w, b) in enumerate(layers):
        h = gc.affine(h, w, b)
        if i < len(layers) - 1:
            h = gc.tanh(h)
    return h


def field_eval(theta: Tensor, x: Tensor | np.ndarray, arch: ArchConfig) -> Tensor:
    """Evaluate the coordinate field at points x (P, 3) -> features (P, n).

    theta stays a graph tensor, so gradients flow back through the
    hypernetwork that produced it.
    """
    return field_eval_layers(slice_field_weights(theta, arch), x)


def rgb_head(rgb_layers: Sequence[tuple[Tensor, Tensor]], v: Tensor) -> Tensor:
    """Features (P, n) -> RGB (P, 3) in [0, 1] via a sigmoid output."""
    return mlp_forward(rgb_layers, v, out_activation="sigmoid")


def seg_head(seg_layers: Sequence[tuple[Tensor, Tensor]], v: Tensor) -> Tensor:
    """Features (P, n) -> raw class logits (P, C); softmax lives in the loss."""
    return mlp_forward(seg_layers, v)


def keypoint_head(kp_layers: Sequence[tuple[Tensor, Tensor]], feats: Tensor,
                  arch: ArchConfig) -> Tensor:
    """Latent features (1, k) -> keypoint positions (N_kp, 3)."""
    out = mlp_forward(kp_layers, feats)
    return gc.reshape(out, (arch.n_keypoints, 3))


def keypoint_predict(weights: ModelWeights, code: LatentCode) -> KeypointSet:
    """Named keypoints for a latent code (plain arrays, fixed name order)."""
    if code.z_obj.size != weights.arch.k_obj:
        raise gc.ShapeMismatchError(
            f"object code has {code.z_obj.size} dims, expected {weights.arch.k_obj}")
    with gc.no_grad():
        feats = code_features_t(Tensor(code.z_art), Tensor(code.z_obj))
        pts = keypoint_head(weights.keypoint, feats, weights.arch)
    return KeypointSet(weights.arch.keypoint_names, pts.data)
