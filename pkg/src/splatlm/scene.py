"""Scene representation, flat parameter layouts, and synthetic dataset generation.

A scene is a set of 3D Gaussians stored as arrays (one row per Gaussian) plus a
shared SH degree and background color. All optimizer-facing parameters are
unconstrained: opacity is kept as a logit, scale in log space, and the
quaternion is stored unnormalized (normalization happens during projection).

The flat parameter vector comes in two layouts related by a permutation:

* attribute-major: ``[x_1^a, ..., x_G^a, ..., x_1^z, ..., x_G^z]`` -- all
  values of one attribute are contiguous. This is the layout the products and
  solvers write to.
* gaussian-major: ``[x_1^a, ..., x_1^z, ..., x_G^a, ..., x_G^z]`` -- all
  values of one Gaussian are contiguous. This is the layout the forward
  Jacobian product reads from.

Per-Gaussian attribute order: position (3), rotation quaternion wxyz (4),
log scale (3), opacity logit (1), then SH coefficients channel-major
(R coeffs, G coeffs, B coeffs), giving ``11 + 3 (L+1)^2`` parameters.
"""

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import sh

GEOM_PARAMS = 11

POS_SLICE = slice(0, 3)
ROT_SLICE = slice(3, 7)
SCALE_SLICE = slice(7, 10)
OPACITY_INDEX = 10
SH_START = 11


def params_per_gaussian(sh_degree: int) -> int:
    return GEOM_PARAMS + 3 * sh.num_coefficients(sh_degree)


class Layout(enum.Enum):
    ATTRIBUTE_MAJOR = "attribute_major"
    GAUSSIAN_MAJOR = "gaussian_major"


class LayoutError(ValueError):
    """A parameter vector arrived in the wrong layout."""


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector with an explicit layout tag."""

    values: np.ndarray
    layout: Layout
    gaussian_count: int
    params_per_gaussian: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        expected = self.gaussian_count * self.params_per_gaussian
        if values.shape != (expected,):
            raise ValueError(f"expected vector of length {expected}, got shape {values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return replace(self, values=values)

    def require_layout(self, layout: Layout) -> None:
        if self.layout is not layout:
            raise LayoutError(f"expected {layout.value} vector, got {self.layout.value}")


def sort_x(v: ParamVector) -> ParamVector:
    """Permute an attribute-major vector into gaussian-major order."""
    v.require_layout(Layout.ATTRIBUTE_MAJOR)
    g, p = v.gaussian_count, v.params_per_gaussian
    values = v.values.reshape(p, g).T.reshape(-1).copy()
    return ParamVector(values, Layout.GAUSSIAN_MAJOR, g, p)


def sort_x_inverse(v: ParamVector) -> ParamVector:
    """Permute a gaussian-major vector back into attribute-major order."""
    v.require_layout(Layout.GAUSSIAN_MAJOR)
    g, p = v.gaussian_count, v.params_per_gaussian
    values = v.values.reshape(g, p).T.reshape(-1).copy()
    return ParamVector(values, Layout.ATTRIBUTE_MAJOR, g, p)


@dataclass(frozen=True)
class Gaussian:
    """A single anisotropic 3D Gaussian primitive.

    Attributes:
        position: World-space center, shape (3,).
        rotation: Quaternion (w, x, y, z); normalized during projection, not
            in storage, so it is a free parameter.
        log_scale: Per-axis log standard deviation, shape (3,).
        opacity_logit: Opacity in logit space; opacity = sigmoid(logit).
        sh_coeffs: SH color coefficients, shape (3, (L+1)^2).
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "log_scale", np.asarray(self.log_scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        if coeffs.ndim != 2 or coeffs.shape[0] != 3:
            raise ValueError(f"sh_coeffs must have shape (3, K), got {coeffs.shape}")
        object.__setattr__(self, "sh_coeffs", coeffs)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def param_count(self) -> int:
        return GEOM_PARAMS + 3 * self.sh_coeffs.shape[1]


@dataclass(frozen=True)
class GaussianScene:
    """An ordered set of Gaussians sharing one SH degree and a background color.

    Stored struct-of-arrays; instances are immutable value objects and safe to
    share across workers.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        g = self.positions.shape[0] if hasattr(self.positions, "shape") else len(self.positions)
        k = sh.num_coefficients(self.sh_degree)
        conv = {
            "positions": (np.asarray(self.positions, dtype=np.float64), (g, 3)),
            "rotations": (np.asarray(self.rotations, dtype=np.float64), (g, 4)),
            "log_scales": (np.asarray(self.log_scales, dtype=np.float64), (g, 3)),
            "opacity_logits": (np.asarray(self.opacity_logits, dtype=np.float64), (g,)),
            "sh_coeffs": (np.asarray(self.sh_coeffs, dtype=np.float64), (g, 3, k)),
            "background": (np.asarray(self.background, dtype=np.float64), (3,)),
        }
        for name, (arr, shape) in conv.items():
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0)) -> "GaussianScene":
        if not gaussians:
            raise ValueError("scene must contain at least one Gaussian")
        degree = gaussians[0].sh_degree
        if any(g.sh_degree != degree for g in gaussians):
            raise ValueError("all Gaussians in a scene must share one SH degree")
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh_coeffs=np.stack([g.sh_coeffs for g in gaussians]),
            sh_degree=degree,
            background=np.asarray(background, dtype=np.float64),
        )

    @property
    def num_gaussians(self) -> int:
        return self.positions.shape[0]

    @property
    def params_per_gaussian(self) -> int:
        return params_per_gaussian(self.sh_degree)

    @property
    def param_count(self) -> int:
        return self.num_gaussians * self.params_per_gaussian

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def gaussians(self) -> list[Gaussian]:
        return [
            Gaussian(self.positions[i], self.rotations[i], self.log_scales[i],
                     self.opacity_logits[i], self.sh_coeffs[i])
            for i in range(self.num_gaussians)
        ]

    def is_finite(self) -> bool:
        return all(
            np.isfinite(a).all()
            for a in (self.positions, self.rotations, self.log_scales,
                      self.opacity_logits, self.sh_coeffs, self.background)
        )


def flatten(scene: GaussianScene, layout: Layout = Layout.ATTRIBUTE_MAJOR) -> ParamVector:
    """Pack a scene into a flat parameter vector in the requested layout."""
    g = scene.num_gaussians
    k = sh.num_coefficients(scene.sh_degree)
    # (P, G) matrix whose row r holds attribute r of every Gaussian.
    mat = np.concatenate([
        scene.positions.T,
        scene.rotations.T,
        scene.log_scales.T,
        scene.opacity_logits[None, :],
        scene.sh_coeffs.reshape(g, 3 * k).T,
    ])
    if layout is Layout.ATTRIBUTE_MAJOR:
        values = mat.reshape(-1).copy()
    else:
        values = mat.T.reshape(-1).copy()
    return ParamVector(values, layout, g, mat.shape[0])


def unflatten(v: ParamVector, sh_degree: int, background=(0.0, 0.0, 0.0)) -> GaussianScene:
    """Rebuild a scene from a flat parameter vector; inverse of :func:`flatten`."""
    g, p = v.gaussian_count, v.params_per_gaussian
    if p != params_per_gaussian(sh_degree):
        raise ValueError(f"vector has {p} params per Gaussian, degree {sh_degree} needs "
                         f"{params_per_gaussian(sh_degree)}")
    if v.layout is Layout.ATTRIBUTE_MAJOR:
        mat = v.values.reshape(p, g)
    else:
        mat = v.values.reshape(g, p).T
    k = sh.num_coefficients(sh_degree)
    return GaussianScene(
        positions=mat[POS_SLICE].T,
        rotations=mat[ROT_SLICE].T,
        log_scales=mat[SCALE_SLICE].T,
        opacity_logits=mat[OPACITY_INDEX],
        sh_coeffs=mat[SH_START:].T.reshape(g, 3, k),
        sh_degree=sh_degree,
        background=background,
    )


def scene_with_offset(scene: GaussianScene, delta: ParamVector) -> GaussianScene:
    """Return ``scene`` with the attribute-major update ``delta`` added."""
    delta.require_layout(Layout.ATTRIBUTE_MAJOR)
    base = flatten(scene, Layout.ATTRIBUTE_MAJOR)
    return unflatten(base.with_values(base.values + delta.values), scene.sh_degree, scene.background)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    The camera looks down +z; pixel (row r, col c) has its center at
    (c + 0.5, r + 0.5) in pixel coordinates.
    """

    rotation: np.ndarray      # (3, 3) world-to-camera rotation
    translation: np.ndarray   # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def num_pixels(self) -> int:
        return self.width * self.height


def look_at_camera(eye, target, up, fx, fy, width, height) -> Camera:
    """Build a camera at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Camera(rotation=rot, translation=-rot @ eye, fx=fx, fy=fy,
                  cx=width / 2.0, cy=height / 2.0, width=width, height=height)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# Additive noise scale per parameter class, multiplied by the perturbation
# magnitude argument.
PERTURB_SCALES = {
    "position": 0.12,
    "rotation": 0.15,
    "log_scale": 0.15,
    "opacity_logit": 0.3,
    "sh_dc": 0.25,
    "sh_rest": 0.08,
}


def perturb(scene: GaussianScene, seed: int, magnitude: float) -> GaussianScene:
    """Additive Gaussian noise on every parameter, scaled per parameter class."""
    if magnitude < 0:
        raise ValueError("perturbation magnitude must be >= 0")
    if magnitude == 0:
        return scene
    rng = np.random.default_rng(seed)
    g = scene.num_gaussians
    k = sh.num_coefficients(scene.sh_degree)
    sh_noise = np.zeros((g, 3, k))
    sh_noise[:, :, 0] = PERTURB_SCALES["sh_dc"] * rng.standard_normal((g, 3))
    if k > 1:
        sh_noise[:, :, 1:] = PERTURB_SCALES["sh_rest"] * rng.standard_normal((g, 3, k - 1))
    return GaussianScene(
        positions=scene.positions + magnitude * PERTURB_SCALES["position"] * rng.standard_normal((g, 3)),
        rotations=scene.rotations + magnitude * PERTURB_SCALES["rotation"] * rng.standard_normal((g, 4)),
        log_scales=scene.log_scales + magnitude * PERTURB_SCALES["log_scale"] * rng.standard_normal((g, 3)),
        opacity_logits=scene.opacity_logits + magnitude * PERTURB_SCALES["opacity_logit"] * rng.standard_normal(g),
        sh_coeffs=scene.sh_coeffs + magnitude * sh_noise,
        sh_degree=scene.sh_degree,
        background=scene.background,
    )


def make_camera_ring(camera_count: int, width: int, height: int, radius: float = 4.0) -> list[Camera]:
    """Cameras on a ring around the origin, all looking at the scene center."""
    cameras = []
    f = 1.2 * max(width, height)
    for i in range(camera_count):
        angle = 2.0 * np.pi * i / camera_count
        elevation = 0.35 * np.sin(2.1 * angle + 0.4)
        eye = np.array([radius * np.cos(angle), elevation * radius * 0.4, radius * np.sin(angle)])
        cameras.append(look_at_camera(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                                      fx=f, fy=f, width=width, height=height))
    return cameras


def make_synthetic_dataset(seed: int, gaussian_count: int, camera_count: int,
                           resolution: tuple[int, int], sh_degree: int = 1,
                           background=(0.0, 0.0, 0.0)):
    """Generate a ground-truth scene, a camera ring, and rendered target images.

    Deterministic for a fixed seed. Gaussians are placed in a box around the
    origin that all cameras see; scales stay moderately anisotropic so that
    projections are well conditioned.

    Returns:
        (truth_scene, cameras, images) where images are float64 renders of the
        truth scene, one per camera, shape (H, W, 3).
    """
    from . import rasterizer  # local import: rasterizer depends on this module

    if gaussian_count < 1 or camera_count < 1:
        raise ValueError("gaussian_count and camera_count must be >= 1")
    width, height = resolution
    if width < 1 or height < 1:
        raise ValueError("resolution must be at least 1x1")

    rng = np.random.default_rng(seed)
    g = gaussian_count
    k = sh.num_coefficients(sh_degree)
    base = rng.uniform(-2.3, -1.55, size=g)
    sh_coeffs = np.zeros((g, 3, k))
    sh_coeffs[:, :, 0] = rng.uniform(-0.5, 1.0, size=(g, 3))
    if k > 1:
        sh_coeffs[:, :, 1:] = rng.uniform(-0.15, 0.15, size=(g, 3, k - 1))
    truth = GaussianScene(
        positions=rng.uniform(-0.9, 0.9, size=(g, 3)),
        rotations=rng.standard_normal((g, 4)) + np.array([2.0, 0.0, 0.0, 0.0]),
        log_scales=base[:, None] + rng.uniform(0.0, 1.0, size=(g, 3)),
        opacity_logits=rng.uniform(-1.0, 2.0, size=g),
        sh_coeffs=sh_coeffs,
        sh_degree=sh_degree,
        background=np.asarray(background, dtype=np.float64),
    )
    cameras = make_camera_ring(camera_count, width, height)
    images = [rasterizer.render(truth, cam).image.rgb for cam in cameras]
    return truth, cameras, images


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scene_to_json(scene: GaussianScene) -> str:
    """Serialize a scene to JSON with full float round-trip precision."""
    payload = {
        "sh_degree": scene.sh_degree,
        "background": scene.background.tolist(),
        "gaussians": [
            {
                "pos": scene.positions[i].tolist(),
                "rot": scene.rotations[i].tolist(),
                "log_scale": scene.log_scales[i].tolist(),
                "opacity_logit": float(scene.opacity_logits[i]),
                "sh": scene.sh_coeffs[i].tolist(),
            }
            for i in range(scene.num_gaussians)
        ],
    }
    return json.dumps(payload, indent=1)


def scene_from_json(text: str) -> GaussianScene:
    payload = json.loads(text)
    gaussians = [
        Gaussian(position=g["pos"], rotation=g["rot"], log_scale=g["log_scale"],
                 opacity_logit=g["opacity_logit"], sh_coeffs=g["sh"])
        for g in payload["gaussians"]
    ]
    scene = GaussianScene.from_gaussians(gaussians, background=payload["background"])
    if scene.sh_degree != payload["sh_degree"]:
        raise ValueError("sh_degree field does not match coefficient count")
    return scene


def cameras_to_json(cameras: list[Camera]) -> str:
    payload = [
        {
            "world_to_camera": np.hstack([c.rotation, c.translation[:, None]]).tolist(),
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
        }
        for c in cameras
    ]
    return json.dumps(payload, indent=1)


def cameras_from_json(text: str) -> list[Camera]:
    payload = json.loads(text)
    cameras = []
    for c in payload:
        w2c = np.asarray(c["world_to_camera"], dtype=np.float64).reshape(3, 4)
        cameras.append(Camera(rotation=w2c[:, :3], translation=w2c[:, 3],
                              fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                              width=int(c["width"]), height=int(c["height"])))
    return cameras
