"""Forward differentiable rendering.

Pipeline per view: evaluate view-dependent SH color, project each 3D Gaussian
to a 2D splat (EWA-style affine approximation), depth-sort, then alpha-blend
front to back at pixel centers. Rendering also emits the per-pixel splat
traversal records (which splat contributed, with what alpha and transmittance)
that the gradient cache is built from.

Pixels are point-sampled at their centers; there is no tile binning. Pixels
are independent, so row bands may be computed by parallel workers with
bitwise-identical results.
"""

from dataclasses import dataclass

import numpy as np

from . import _parallel, sh
from .scene import Camera, Gaussian, GaussianScene


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer thresholds.

    The defaults reproduce the stock splatting rasterizer behavior: skip
    contributions below ``alpha_min``, stop a ray once transmittance falls
    below ``t_stop``, clamp alpha at ``alpha_clamp`` (with zero gradient
    through an active clamp), and add ``cov_eps`` to the 2D covariance
    diagonal as a low-pass filter.
    """

    alpha_min: float = 1.0 / 255.0
    t_stop: float = 1e-4
    alpha_clamp: float = 0.99
    cov_eps: float = 0.3
    z_near: float = 0.01
    # Footprint culling radius in Mahalanobis sigmas; None disables the cull.
    cull_sigma: float | None = 3.33
    dtype: type = np.float64

    @staticmethod
    def smooth() -> "RenderConfig":
        """Thresholds for derivative checks: no skip/termination kinks."""
        return RenderConfig(alpha_min=0.0, t_stop=0.0, cull_sigma=None)


DEFAULT_CONFIG = RenderConfig()


@dataclass(frozen=True)
class Splat2D:
    """A 3D Gaussian projected into one view."""

    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) pixels^2, low-pass regularized
    depth: float            # camera-space z
    color: np.ndarray       # (3,) SH color for this view direction
    opacity: float
    gaussian_id: int


@dataclass
class ProjectedSplats:
    """All Gaussians of a scene projected into one view (struct of arrays)."""

    mean2d: np.ndarray        # (G, 2)
    cov2d: np.ndarray         # (G, 3) packed symmetric (a, b, c)
    conic: np.ndarray         # (G, 3) packed inverse covariance
    depth: np.ndarray         # (G,)
    color: np.ndarray         # (G, 3) after the 0.5 offset and zero clamp
    color_clamped: np.ndarray  # (G, 3) bool, True where the zero clamp is active
    opacity: np.ndarray       # (G,)
    valid: np.ndarray         # (G,) bool, False for culled Gaussians
    cam_points: np.ndarray    # (G, 3) camera-space positions


def quat_to_rotation(quats: np.ndarray) -> np.ndarray:
    """Rows of unnormalized quaternions (w, x, y, z) to rotation matrices."""
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("quaternion with (near-)zero norm")
    w, x, y, z = (quats / norms[:, None]).T
    rot = np.empty((quats.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def world_covariances(scene: GaussianScene) -> np.ndarray:
    """Per-Gaussian world covariance R diag(exp(2 ls)) R^T, shape (G, 3, 3)."""
    rot = quat_to_rotation(scene.rotations)
    s2 = np.exp(2.0 * scene.log_scales)
    return np.einsum("gij,gj,gkj->gik", rot, s2, rot)


def projection_jacobian(cam_points: np.ndarray, camera: Camera) -> np.ndarray:
    """Affine Jacobian of the pinhole projection at camera-space points, (G, 2, 3)."""
    x, y, z = cam_points.T
    inv_z = 1.0 / z
    a = np.zeros((cam_points.shape[0], 2, 3))
    a[:, 0, 0] = camera.fx * inv_z
    a[:, 0, 2] = -camera.fx * x * inv_z * inv_z
    a[:, 1, 1] = camera.fy * inv_z
    a[:, 1, 2] = -camera.fy * y * inv_z * inv_z
    return a


def project_scene(scene: GaussianScene, camera: Camera,
                  config: RenderConfig = DEFAULT_CONFIG) -> ProjectedSplats:
    """Project every Gaussian of a scene into one view.

    Culled Gaussians (behind the near plane, or with their footprint fully
    outside the image when footprint culling is enabled) are flagged invalid;
    their rows are left in place but must not be read.
    """
    if not scene.is_finite():
        raise ValueError("scene contains non-finite parameters")
    g = scene.num_gaussians

    cam_points = scene.positions @ camera.rotation.T + camera.translation
    valid = cam_points[:, 2] > config.z_near
    z = np.where(valid, cam_points[:, 2], 1.0)

    mean2d = np.stack([
        camera.fx * cam_points[:, 0] / z + camera.cx,
        camera.fy * cam_points[:, 1] / z + camera.cy,
    ], axis=1)

    cov_world = world_covariances(scene)
    cov_cam = np.einsum("ij,gjk,lk->gil", camera.rotation, cov_world, camera.rotation)
    jac = projection_jacobian(np.where(valid[:, None], cam_points, [0.0, 0.0, 1.0]), camera)
    cov_full = np.einsum("gij,gjk,glk->gil", jac, cov_cam, jac)
    va = cov_full[:, 0, 0] + config.cov_eps
    vb = cov_full[:, 0, 1]
    vc = cov_full[:, 1, 1] + config.cov_eps
    det = va * vc - vb * vb
    valid &= det > 0
    det = np.where(det > 0, det, 1.0)
    conic = np.stack([vc / det, -vb / det, va / det], axis=1)

    dirs = scene.positions - camera.center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    basis = sh.sh_basis(dirs, scene.sh_degree)
    raw = np.einsum("gck,gk->gc", scene.sh_coeffs, basis) + sh.COLOR_OFFSET
    color = np.maximum(raw, 0.0)

    if config.cull_sigma is not None:
        lam_max = 0.5 * (va + vc) + np.sqrt(0.25 * (va - vc) ** 2 + vb * vb)
        radius = config.cull_sigma * np.sqrt(lam_max)
        valid &= (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < camera.width)
        valid &= (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < camera.height)

    return ProjectedSplats(
        mean2d=mean2d, cov2d=np.stack([va, vb, vc], axis=1), conic=conic,
        depth=cam_points[:, 2], color=color, color_clamped=raw <= 0.0,
        opacity=scene.opacities, valid=valid, cam_points=cam_points,
    )


def project(gaussian: Gaussian, camera: Camera,
            config: RenderConfig = DEFAULT_CONFIG) -> Splat2D | None:
    """Project a single Gaussian; returns None when it is culled."""
    scene = GaussianScene.from_gaussians([gaussian])
    splats = project_scene(scene, camera, config)
    if not splats.valid[0]:
        return None
    a, b, c = splats.cov2d[0]
    return Splat2D(mean2d=splats.mean2d[0], cov2d=np.array([[a, b], [b, c]]),
                   depth=float(splats.depth[0]), color=splats.color[0],
                   opacity=float(splats.opacity[0]), gaussian_id=0)


# ---------------------------------------------------------------------------
# Alpha blending
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3)

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


@dataclass(frozen=True)
class PixelTraversal:
    """Front-to-back record of every splat contributing to one pixel."""

    pixel_id: int
    gaussian_ids: np.ndarray
    alphas: np.ndarray
    transmittances: np.ndarray  # T before each contribution; first entry is 1
    colors: np.ndarray          # (n, 3) splat colors


@dataclass
class Traversals:
    """Per-pixel traversal records for a whole image, stored flat.

    Entries are sorted by pixel, front to back within each pixel;
    ``offsets[p]:offsets[p+1]`` delimits pixel ``p`` (row-major flat index).
    """

    pixel_ids: np.ndarray
    gaussian_ids: np.ndarray
    alphas: np.ndarray
    transmittances: np.ndarray
    offsets: np.ndarray
    t_final: np.ndarray          # (H*W,) transmittance after all splats
    splat_colors: np.ndarray     # (G, 3) view-dependent colors, indexed by id
    width: int
    height: int

    @property
    def entry_count(self) -> int:
        return self.pixel_ids.shape[0]

    def pixel(self, pixel_id: int) -> PixelTraversal:
        lo, hi = self.offsets[pixel_id], self.offsets[pixel_id + 1]
        gids = self.gaussian_ids[lo:hi]
        return PixelTraversal(pixel_id, gids, self.alphas[lo:hi],
                              self.transmittances[lo:hi], self.splat_colors[gids])

    def recompute_color(self, pixel_id: int, background: np.ndarray) -> np.ndarray:
        """Re-evaluate the blending sum for one pixel from its records."""
        t = self.pixel(pixel_id)
        rgb = np.zeros(3)
        for gid, alpha, trans in zip(t.gaussian_ids, t.alphas, t.transmittances):
            rgb += self.splat_colors[gid] * alpha * trans
        return rgb + background * self.t_final[pixel_id]


@dataclass
class RenderResult:
    image: RenderedImage
    traversals: Traversals
    splats: ProjectedSplats


def _splat_pixel_bounds(mean, radius, width, height, band):
    """Pixel index ranges whose centers may receive alpha >= alpha_min."""
    if not np.isfinite(radius):
        return band.start, band.stop - 1, 0, width - 1
    c0 = max(0, int(np.ceil(mean[0] - radius - 0.5)))
    c1 = min(width - 1, int(np.floor(mean[0] + radius - 0.5)))
    r0 = max(band.start, int(np.ceil(mean[1] - radius - 0.5)))
    r1 = min(band.stop - 1, int(np.floor(mean[1] + radius - 0.5)))
    return r0, r1, c0, c1


def _blend_band(band, order, splats, config, camera):
    """Blend all splats into one row band; returns image rows and entry arrays."""
    width = camera.width
    rows = len(band)
    rgb = np.zeros((rows, width, 3), dtype=config.dtype)
    trans = np.ones((rows, width), dtype=config.dtype)
    px = np.arange(width, dtype=config.dtype) + 0.5

    ent_pixel, ent_gid, ent_alpha, ent_t = [], [], [], []

    # Radius of the circle outside which alpha < alpha_min is guaranteed.
    if config.alpha_min > 0:
        lam_max = (0.5 * (splats.cov2d[:, 0] + splats.cov2d[:, 2])
                   + np.sqrt(0.25 * (splats.cov2d[:, 0] - splats.cov2d[:, 2]) ** 2
                             + splats.cov2d[:, 1] ** 2))
        radii = np.sqrt(np.maximum(0.0, 2.0 * np.log(1.0 / config.alpha_min))) * np.sqrt(lam_max)
    else:
        radii = np.full(splats.depth.shape, np.inf)

    for gid in order:
        r0, r1, c0, c1 = _splat_pixel_bounds(splats.mean2d[gid], radii[gid], width,
                                             camera.height, band)
        if r0 > r1 or c0 > c1:
            continue
        a, b, c = splats.conic[gid]
        dx = px[c0:c1 + 1] - splats.mean2d[gid, 0]
        dy = (np.arange(r0, r1 + 1, dtype=config.dtype) + 0.5) - splats.mean2d[gid, 1]
        # -(1/2) d^T conic d on the bounding-box grid
        power = -0.5 * (a * dx * dx + c * (dy * dy)[:, None] + 2.0 * b * dy[:, None] * dx)
        alpha = np.minimum(splats.opacity[gid] * np.exp(power), config.alpha_clamp)

        t_block = trans[r0 - band.start:r1 + 1 - band.start, c0:c1 + 1]
        contrib = (alpha >= config.alpha_min) & (alpha > 0.0) & (t_block >= config.t_stop)
        if not contrib.any():
            continue
        rr, cc = np.nonzero(contrib)
        alphas = alpha[rr, cc]
        t_before = t_block[rr, cc]
        weights = alphas * t_before
        rgb_block = rgb[r0 - band.start:r1 + 1 - band.start, c0:c1 + 1]
        rgb_block[rr, cc] += weights[:, None] * splats.color[gid]
        t_block[rr, cc] = t_before * (1.0 - alphas)

        ent_pixel.append((rr + r0) * width + (cc + c0))
        ent_gid.append(np.full(rr.shape[0], gid, dtype=np.int64))
        ent_alpha.append(alphas)
        ent_t.append(t_before)

    def cat(parts, dtype):
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    return (rgb, trans, cat(ent_pixel, np.int64), cat(ent_gid, np.int64),
            cat(ent_alpha, config.dtype), cat(ent_t, config.dtype))


def render(scene: GaussianScene, camera: Camera,
           config: RenderConfig = DEFAULT_CONFIG) -> RenderResult:
    """Render a scene into one view and record per-pixel splat traversals.

    Splats are blended front to back in depth order (ties broken by Gaussian
    index, so the result does not depend on the scene's list order). The pixel
    color is ``sum(color_s * alpha_s * T_s) + background * T_final``.
    """
    splats = project_scene(scene, camera, config)
    valid_ids = np.nonzero(splats.valid)[0]
    # lexsort uses the last key as primary: depth first, Gaussian index for ties.
    order = valid_ids[np.lexsort((valid_ids, splats.depth[valid_ids]))]

    bands = _parallel.row_bands(camera.height)
    results = _parallel.parallel_map(
        lambda band: _blend_band(band, order, splats, config, camera), bands)

    h, w = camera.height, camera.width
    rgb = np.concatenate([r[0] for r in results], axis=0)
    t_final = np.concatenate([r[1] for r in results], axis=0).reshape(-1)
    pixel_ids = np.concatenate([r[2] for r in results])
    gaussian_ids = np.concatenate([r[3] for r in results])
    alphas = np.concatenate([r[4] for r in results])
    t_before = np.concatenate([r[5] for r in results])

    rgb += scene.background[None, None, :] * t_final.reshape(h, w)[:, :, None]

    # Entries were collected splat-major; a stable sort by pixel keeps each
    # pixel's entries in front-to-back order.
    perm = np.argsort(pixel_ids, kind="stable")
    pixel_ids = pixel_ids[perm]
    offsets = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(np.bincount(pixel_ids, minlength=h * w), out=offsets[1:])

    traversals = Traversals(
        pixel_ids=pixel_ids, gaussian_ids=gaussian_ids[perm], alphas=alphas[perm],
        transmittances=t_before[perm], offsets=offsets, t_final=t_final,
        splat_colors=splats.color, width=w, height=h,
    )
    return RenderResult(image=RenderedImage(rgb), traversals=traversals, splats=splats)
