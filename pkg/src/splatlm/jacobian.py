"""Gradient cache and matrix-free Jacobian products.

Every residual-to-parameter derivative factors into three stages: residual to
pixel color (precomputed into the residual bundle), pixel color to projected
splat attributes, and splat attributes to Gaussian parameters. The middle
factor only needs the per-(pixel, splat) blending state ``T_s``,
``dc/dalpha_s`` and ``dc/dc_s``, which is cached once per view; the last
factor is shared by all pixels of one splat and is recomputed from the scene
on each product. This decouples splats along rays, so products parallelize
per cache entry instead of re-walking each ray.

The cached splat attributes are the 2D mean, the 2D covariance, the view
color, and the opacity path; alpha derivatives chain through
``alpha = opacity * exp(-0.5 d^T cov2d^{-1} d)`` with zero gradient where the
alpha clamp is active.

Products over one cache are deterministic: aggregation per Gaussian is a
segmented reduction over that Gaussian's contiguous entry block, and
per-pixel scatter adds follow the fixed entry order.
"""

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import sh
from .rasterizer import (DEFAULT_CONFIG, ProjectedSplats, RenderConfig, RenderResult,
                         projection_jacobian, project_scene, quat_to_rotation, render)
from .residuals import ResidualBundle, ssim_map_center_substituted
from .scene import (GEOM_PARAMS, Camera, GaussianScene, Layout, ParamVector,
                    flatten, unflatten)

DENSE_ORACLE_MAX_ENTRIES = 10_000_000


class CacheOrder(enum.Enum):
    PIXEL_SORTED = "pixel"
    GAUSSIAN_SORTED = "gaussian"


class CacheOrderError(ValueError):
    """A cache arrived in the wrong sort order for this product."""


@dataclass
class GradientCache:
    """Per-(pixel, splat) blending state for one view.

    Entries of a pixel appear front to back when pixel-sorted; when
    gaussian-sorted, each Gaussian's entries form one contiguous block and
    ``offsets`` delimits the blocks. ``source_index`` records each entry's
    position in the original pixel-sorted sequence so the sort round-trips.
    """

    pixel_ids: np.ndarray       # (E,)
    gaussian_ids: np.ndarray    # (E,)
    alphas: np.ndarray          # (E,)
    transmittances: np.ndarray  # (E,) T before the entry's contribution
    dc_dalpha: np.ndarray       # (E, 3)
    dc_dcs: np.ndarray          # (E,) = alpha * T
    source_index: np.ndarray    # (E,)
    order: CacheOrder
    offsets: np.ndarray         # per-pixel or per-Gaussian group starts
    grad_r_sq: np.ndarray       # (H*W*3,) residual weights of this view
    camera: Camera
    n_gaussians: int
    config: RenderConfig
    view_id: int = 0

    @property
    def entry_count(self) -> int:
        return self.pixel_ids.shape[0]

    @property
    def nbytes(self) -> int:
        """Cache memory footprint (entry arrays only), for budget accounting."""
        return sum(a.nbytes for a in (self.pixel_ids, self.gaussian_ids, self.alphas,
                                      self.transmittances, self.dc_dalpha, self.dc_dcs,
                                      self.source_index))

    def require_order(self, order: CacheOrder) -> None:
        if self.order is not order:
            raise CacheOrderError(f"expected {order.value}-sorted cache, got {self.order.value}")


def _group_offsets(ids: np.ndarray, n_groups: int) -> np.ndarray:
    offsets = np.zeros(n_groups + 1, dtype=np.int64)
    np.cumsum(np.bincount(ids, minlength=n_groups), out=offsets[1:])
    return offsets


def sort_cache_by_gaussians(cache: GradientCache) -> GradientCache:
    """Stable re-sort keyed by gaussian_id with ties broken by pixel_id."""
    cache.require_order(CacheOrder.PIXEL_SORTED)
    perm = np.lexsort((cache.pixel_ids, cache.gaussian_ids))
    return replace(
        cache,
        pixel_ids=cache.pixel_ids[perm], gaussian_ids=cache.gaussian_ids[perm],
        alphas=cache.alphas[perm], transmittances=cache.transmittances[perm],
        dc_dalpha=cache.dc_dalpha[perm], dc_dcs=cache.dc_dcs[perm],
        source_index=cache.source_index[perm],
        order=CacheOrder.GAUSSIAN_SORTED,
        offsets=_group_offsets(cache.gaussian_ids[perm], cache.n_gaussians),
    )


def sort_cache_by_pixels(cache: GradientCache) -> GradientCache:
    """Restore the original pixel-sorted entry sequence."""
    cache.require_order(CacheOrder.GAUSSIAN_SORTED)
    perm = np.argsort(cache.source_index, kind="stable")
    n_pixels = cache.camera.num_pixels
    return replace(
        cache,
        pixel_ids=cache.pixel_ids[perm], gaussian_ids=cache.gaussian_ids[perm],
        alphas=cache.alphas[perm], transmittances=cache.transmittances[perm],
        dc_dalpha=cache.dc_dalpha[perm], dc_dcs=cache.dc_dcs[perm],
        source_index=cache.source_index[perm],
        order=CacheOrder.PIXEL_SORTED,
        offsets=_group_offsets(cache.pixel_ids[perm], n_pixels),
    )


def _segment_sum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum contiguous segments; empty segments yield zero."""
    n = offsets.shape[0] - 1
    out = np.zeros((n,) + values.shape[1:], dtype=np.float64)
    if values.shape[0] == 0:
        return out
    starts = offsets[:-1]
    nonempty = offsets[1:] > starts
    if nonempty.any():
        out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


# ---------------------------------------------------------------------------
# Splat-to-parameter derivatives (shared by all pixels of one splat)
# ---------------------------------------------------------------------------

@dataclass
class SplatGradients:
    """Derivatives of projected splat attributes w.r.t. Gaussian parameters.

    Geometry columns are ordered [position (3), quaternion (4), log scale (3),
    opacity logit (1)]; SH coefficients are handled separately through the
    shared basis values.
    """

    dmu_geom: np.ndarray    # (G, 2, 11) 2D mean
    dcov_geom: np.ndarray   # (G, 3, 11) packed 2D covariance (a, b, c)
    dcol_geom: np.ndarray   # (G, 3, 11) view color (position path, clamp folded in)
    dopa_geom: np.ndarray   # (G, 11) opacity
    sh_basis: np.ndarray    # (G, K)
    sh_mask: np.ndarray     # (G, 3) 0 where the color zero-clamp is active
    proj: ProjectedSplats


def _quat_rotation_grads(quats: np.ndarray) -> np.ndarray:
    """d R / d raw quaternion, including the normalization chain; (G, 4, 3, 3)."""
    norms = np.linalg.norm(quats, axis=1)
    qn = quats / norms[:, None]
    w, x, y, z = qn.T
    zero = np.zeros_like(w)
    d_hat = np.empty((quats.shape[0], 4, 3, 3))
    d_hat[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    d_hat[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    d_hat[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    d_hat[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], -2)
    # chain through normalization: d qhat_k / d q_j = (I - qhat qhat^T) / |q|
    chain = (np.eye(4)[None] - qn[:, :, None] * qn[:, None, :]) / norms[:, None, None]
    return np.einsum("gkij,gkl->glij", d_hat, chain)


def _pack_sym(m: np.ndarray) -> np.ndarray:
    """Pack symmetric 2x2 matrices (..., 2, 2) into (..., 3) as (a, b, c)."""
    return np.stack([m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]], axis=-1)


def splat_gradients(scene: GaussianScene, camera: Camera,
                    config: RenderConfig = DEFAULT_CONFIG,
                    proj: ProjectedSplats | None = None) -> SplatGradients:
    """Build the per-splat attribute-to-parameter derivative tables."""
    if proj is None:
        proj = project_scene(scene, camera, config)
    g = scene.num_gaussians
    w2c = camera.rotation

    rot = quat_to_rotation(scene.rotations)
    s2 = np.exp(2.0 * scene.log_scales)
    cov_world = np.einsum("gij,gj,gkj->gik", rot, s2, rot)
    cov_cam = np.einsum("ij,gjk,lk->gil", w2c, cov_world, w2c)
    cam_points = np.where(proj.valid[:, None], proj.cam_points, [0.0, 0.0, 1.0])
    jac = projection_jacobian(cam_points, camera)
    u_full = jac @ w2c  # (G, 2, 3): d mean2d / d position

    dmu_geom = np.zeros((g, 2, GEOM_PARAMS))
    dmu_geom[:, :, 0:3] = u_full

    dcov_geom = np.zeros((g, 3, GEOM_PARAMS))
    # position path: the projection Jacobian varies with the camera-space point
    x, y, z = cam_points.T
    inv_z2 = 1.0 / (z * z)
    p3 = np.einsum("gij,gkj->gik", cov_cam, jac)  # (G, 3, 2) = cov_cam A^T
    q_rows = np.zeros((g, 3, 2, 2))  # d(A cov_cam A^T)/dX_i one-sided terms
    q_rows[:, 0, 0, :] = -camera.fx * inv_z2[:, None] * p3[:, 2, :]
    q_rows[:, 1, 1, :] = -camera.fy * inv_z2[:, None] * p3[:, 2, :]
    q_rows[:, 2, 0, :] = (-camera.fx * inv_z2[:, None] * p3[:, 0, :]
                          + 2.0 * camera.fx * (x * inv_z2 / z)[:, None] * p3[:, 2, :])
    q_rows[:, 2, 1, :] = (-camera.fy * inv_z2[:, None] * p3[:, 1, :]
                          + 2.0 * camera.fy * (y * inv_z2 / z)[:, None] * p3[:, 2, :])
    dcov_dcam = _pack_sym(q_rows + np.swapaxes(q_rows, -1, -2))  # (G, 3, 3pack)
    dcov_geom[:, :, 0:3] = np.einsum("gic,ij->gcj", dcov_dcam, w2c)

    # rotation path through the world covariance
    drot = _quat_rotation_grads(scene.rotations)  # (G, 4, 3, 3)
    rd = np.einsum("gij,gj->gij", rot, s2)  # R diag(s^2)
    half = np.einsum("gqij,gkj->gqik", drot, rd)  # dR D R^T
    dcov_world_q = half + np.swapaxes(half, -1, -2)
    ucam = np.einsum("gij,jk->gik", u_full, np.eye(3))  # alias for clarity
    dcov_q = np.einsum("gia,gqab,gjb->gqij", ucam, dcov_world_q, ucam)
    dcov_geom[:, :, 3:7] = np.moveaxis(_pack_sym(dcov_q), 1, 2)

    # log-scale path: d cov_world / d ls_i = 2 s_i^2 R_:,i R_:,i^T
    ur = np.einsum("gij,gjk->gik", u_full, rot)  # (G, 2, 3) columns U R_:,i
    outer = np.einsum("gik,gjk->gkij", ur, ur)   # (G, 3ls, 2, 2)
    dcov_ls = 2.0 * s2[:, :, None] * _pack_sym(outer)  # (G, 3ls, 3pack)
    dcov_geom[:, :, 7:10] = np.moveaxis(dcov_ls, 1, 2)

    # color: SH basis shared across channels; position moves the view direction
    dirs_raw = scene.positions - camera.center
    norms = np.linalg.norm(dirs_raw, axis=1)
    dirs = dirs_raw / norms[:, None]
    basis = sh.sh_basis(dirs, scene.sh_degree)
    basis_grad = sh.sh_basis_grad(dirs, scene.sh_degree)  # (G, K, 3)
    sh_mask = (~proj.color_clamped).astype(np.float64)
    draw_dv = np.einsum("gck,gkd->gcd", scene.sh_coeffs, basis_grad)
    dv_dpos = (np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]) / norms[:, None, None]
    dcol_geom = np.zeros((g, 3, GEOM_PARAMS))
    dcol_geom[:, :, 0:3] = sh_mask[:, :, None] * np.einsum("gcd,gdj->gcj", draw_dv, dv_dpos)

    dopa_geom = np.zeros((g, GEOM_PARAMS))
    opa = proj.opacity
    dopa_geom[:, 10] = opa * (1.0 - opa)

    invalid = ~proj.valid
    if invalid.any():
        dmu_geom[invalid] = 0.0
        dcov_geom[invalid] = 0.0
        dcol_geom[invalid] = 0.0
        dopa_geom[invalid] = 0.0

    return SplatGradients(dmu_geom=dmu_geom, dcov_geom=dcov_geom, dcol_geom=dcol_geom,
                          dopa_geom=dopa_geom, sh_basis=basis, sh_mask=sh_mask, proj=proj)


# ---------------------------------------------------------------------------
# Per-entry chain state
# ---------------------------------------------------------------------------

@dataclass
class _EntryContext:
    """Per-entry quantities of the alpha chain, shared by all products."""

    e1: np.ndarray         # conic * (pixel - mean), first component
    e2: np.ndarray
    alpha_eff: np.ndarray  # stored alpha, zeroed where the clamp is active
    gval_eff: np.ndarray   # exp term of alpha, zeroed where the clamp is active


def _entry_context(cache: GradientCache, proj: ProjectedSplats) -> _EntryContext:
    g = cache.gaussian_ids
    width = cache.camera.width
    px = (cache.pixel_ids % width) + 0.5
    py = (cache.pixel_ids // width) + 0.5
    dx = px - proj.mean2d[g, 0]
    dy = py - proj.mean2d[g, 1]
    ka, kb, kc = proj.conic[g].T
    e1 = ka * dx + kb * dy
    e2 = kb * dx + kc * dy
    gval = np.exp(-0.5 * (dx * e1 + dy * e2))
    unclamped = cache.alphas < cache.config.alpha_clamp
    return _EntryContext(e1=e1, e2=e2,
                         alpha_eff=np.where(unclamped, cache.alphas, 0.0),
                         gval_eff=np.where(unclamped, gval, 0.0))


def _gather_alpha_geom(ctx: _EntryContext, grads: SplatGradients,
                       gaussian_ids: np.ndarray) -> np.ndarray:
    """d alpha / d geometry params per entry, shape (E, 11)."""
    g = gaussian_ids
    out = (ctx.e1[:, None] * grads.dmu_geom[g, 0]
           + ctx.e2[:, None] * grads.dmu_geom[g, 1]
           + (0.5 * ctx.e1 ** 2)[:, None] * grads.dcov_geom[g, 0]
           + (ctx.e1 * ctx.e2)[:, None] * grads.dcov_geom[g, 1]
           + (0.5 * ctx.e2 ** 2)[:, None] * grads.dcov_geom[g, 2])
    out *= ctx.alpha_eff[:, None]
    out += ctx.gval_eff[:, None] * grads.dopa_geom[g]
    return out


def _assemble_attribute_major(g_geom: np.ndarray, g_sh: np.ndarray,
                              scene: GaussianScene) -> np.ndarray:
    g = scene.num_gaussians
    k = sh.num_coefficients(scene.sh_degree)
    mat = np.empty((scene.params_per_gaussian, g))
    mat[:GEOM_PARAMS] = g_geom.T
    mat[GEOM_PARAMS:] = g_sh.reshape(g, 3 * k).T
    return mat.reshape(-1)


def _jt_accumulate(cache: GradientCache, ctx: _EntryContext, grads: SplatGradients,
                   scene: GaussianScene, u_flat: np.ndarray) -> np.ndarray:
    """Transposed color-Jacobian product for any cache order (attribute-major)."""
    g_ids = cache.gaussian_ids
    ue = u_flat.reshape(-1, 3)[cache.pixel_ids]
    s_alpha = np.einsum("ec,ec->e", cache.dc_dalpha, ue)
    s_color = cache.dc_dcs[:, None] * ue
    t = s_alpha * ctx.alpha_eff

    parts = np.stack([
        t * ctx.e1, t * ctx.e2,
        t * 0.5 * ctx.e1 ** 2, t * ctx.e1 * ctx.e2, t * 0.5 * ctx.e2 ** 2,
        s_alpha * ctx.gval_eff,
    ], axis=1)
    per_entry = np.concatenate([parts, s_color], axis=1)  # (E, 9)

    n_g = cache.n_gaussians
    if cache.order is CacheOrder.GAUSSIAN_SORTED:
        acc = _segment_sum(per_entry, cache.offsets)
    else:
        acc = np.zeros((n_g, per_entry.shape[1]))
        np.add.at(acc, g_ids, per_entry)

    a_mu, a_cov, a_opa, a_col = acc[:, 0:2], acc[:, 2:5], acc[:, 5], acc[:, 6:9]
    g_geom = (np.einsum("gi,gij->gj", a_mu, grads.dmu_geom)
              + np.einsum("gi,gij->gj", a_cov, grads.dcov_geom)
              + np.einsum("gc,gcj->gj", a_col, grads.dcol_geom)
              + a_opa[:, None] * grads.dopa_geom)
    g_sh = (a_col * grads.sh_mask)[:, :, None] * grads.sh_basis[:, None, :]
    return _assemble_attribute_major(g_geom, g_sh, scene)


# ---------------------------------------------------------------------------
# Public products
# ---------------------------------------------------------------------------

def build_cache(scene: GaussianScene, camera: Camera, bundle: ResidualBundle,
                config: RenderConfig = DEFAULT_CONFIG,
                render_result: RenderResult | None = None,
                view_id: int = 0) -> tuple[ParamVector, GradientCache]:
    """Render-traverse one view, building b = -J^T F and the gradient cache.

    The cache holds exactly one entry per (pixel, contributing splat) pair as
    traversed during rendering; this freezes the sparsity pattern that all
    products on this cache use.

    Args:
        scene: Scene at the current parameters.
        camera: View to traverse.
        bundle: Residuals of render(scene, camera) against the view's ground
            truth, from :func:`splatlm.residuals.compute_residuals`.
        render_result: Optional pre-computed render of (scene, camera) to
            reuse; must match ``config``.

    Returns:
        (b, cache): attribute-major right-hand side and the pixel-sorted cache.
    """
    if (bundle.height, bundle.width) != (camera.height, camera.width):
        raise ValueError("residual bundle does not match the camera resolution")
    rr = render_result if render_result is not None else render(scene, camera, config)
    trav = rr.traversals
    e = trav.entry_count

    colors = trav.splat_colors[trav.gaussian_ids]          # (E, 3)
    weights = trav.alphas * trav.transmittances
    contrib = colors * weights[:, None]

    # Suffix of contributions behind each entry within its pixel, plus the
    # background that leaks through the end of the ray.
    csum = np.cumsum(contrib, axis=0)
    counts = np.diff(trav.offsets)
    seg_end = np.repeat(trav.offsets[1:], counts)          # (E,)
    suffix = csum[seg_end - 1] - csum                      # entries strictly behind
    behind = suffix + (scene.background[None, :]
                       * trav.t_final[trav.pixel_ids][:, None])
    dc_dalpha = colors * trav.transmittances[:, None] - behind / (1.0 - trav.alphas)[:, None]

    cache = GradientCache(
        pixel_ids=trav.pixel_ids.copy(), gaussian_ids=trav.gaussian_ids.copy(),
        alphas=trav.alphas.copy(), transmittances=trav.transmittances.copy(),
        dc_dalpha=dc_dalpha, dc_dcs=weights,
        source_index=np.arange(e, dtype=np.int64),
        order=CacheOrder.PIXEL_SORTED, offsets=trav.offsets.copy(),
        grad_r_sq=bundle.grad_r_sq.reshape(-1).copy(),
        camera=camera, n_gaussians=scene.num_gaussians, config=config, view_id=view_id,
    )

    grads = splat_gradients(scene, camera, config, rr.splats)
    ctx = _entry_context(cache, rr.splats)
    b_values = -_jt_accumulate(cache, ctx, grads, scene, bundle.color_grad.reshape(-1))
    b = ParamVector(b_values, Layout.ATTRIBUTE_MAJOR, scene.num_gaussians,
                    scene.params_per_gaussian)
    return b, cache


def apply_j(p: ParamVector, scene: GaussianScene, cache: GradientCache) -> np.ndarray:
    """Forward color-Jacobian product u_hat_i = sum_j (dc_i/dx_j) p_j.

    ``p`` must be gaussian-major (run :func:`splatlm.scene.sort_x` first).
    Returns the color-space vector, one slot per pixel and channel
    (length 3 * pixels), before residual weighting.
    """
    p.require_layout(Layout.GAUSSIAN_MAJOR)
    if len(p) != scene.param_count:
        raise ValueError(f"parameter vector length {len(p)} does not match scene "
                         f"({scene.param_count})")
    proj = project_scene(scene, cache.camera, cache.config)
    grads = splat_gradients(scene, cache.camera, cache.config, proj)
    ctx = _entry_context(cache, proj)

    k = sh.num_coefficients(scene.sh_degree)
    pg = p.values.reshape(scene.num_gaussians, scene.params_per_gaussian)
    geom_p = pg[:, :GEOM_PARAMS]
    sh_p = pg[:, GEOM_PARAMS:].reshape(scene.num_gaussians, 3, k)

    m_mu = np.einsum("gij,gj->gi", grads.dmu_geom, geom_p)
    m_cov = np.einsum("gij,gj->gi", grads.dcov_geom, geom_p)
    m_col = (np.einsum("gij,gj->gi", grads.dcol_geom, geom_p)
             + grads.sh_mask * np.einsum("gk,gck->gc", grads.sh_basis, sh_p))
    m_opa = np.einsum("gj,gj->g", grads.dopa_geom, geom_p)

    g = cache.gaussian_ids
    dalpha_p = (ctx.alpha_eff * (ctx.e1 * m_mu[g, 0] + ctx.e2 * m_mu[g, 1]
                                 + 0.5 * ctx.e1 ** 2 * m_cov[g, 0]
                                 + ctx.e1 * ctx.e2 * m_cov[g, 1]
                                 + 0.5 * ctx.e2 ** 2 * m_cov[g, 2])
                + ctx.gval_eff * m_opa[g])
    contrib = cache.dc_dalpha * dalpha_p[:, None] + cache.dc_dcs[:, None] * m_col[g]

    u_hat = np.zeros((cache.camera.num_pixels, 3))
    np.add.at(u_hat, cache.pixel_ids, contrib)
    return u_hat.reshape(-1)


def weight_residuals(u_hat: np.ndarray, bundle: ResidualBundle) -> np.ndarray:
    """Elementwise residual weighting u = u_hat * grad_r_sq."""
    u_hat = np.asarray(u_hat, dtype=np.float64)
    weights = bundle.grad_r_sq.reshape(-1)
    if u_hat.shape != weights.shape:
        raise ValueError(f"length mismatch: {u_hat.shape} vs {weights.shape}")
    return u_hat * weights


def apply_jt(u: np.ndarray, scene: GaussianScene, cache: GradientCache) -> ParamVector:
    """Transposed product g_k = sum_i (dc_i/dx_k) u_i, attribute-major output.

    Requires a gaussian-sorted cache; the per-Gaussian sums run over
    contiguous entry blocks in a fixed order.
    """
    cache.require_order(CacheOrder.GAUSSIAN_SORTED)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (cache.camera.num_pixels * 3,):
        raise ValueError(f"expected color-space vector of length "
                         f"{cache.camera.num_pixels * 3}, got {u.shape}")
    proj = project_scene(scene, cache.camera, cache.config)
    grads = splat_gradients(scene, cache.camera, cache.config, proj)
    ctx = _entry_context(cache, proj)
    values = _jt_accumulate(cache, ctx, grads, scene, u)
    return ParamVector(values, Layout.ATTRIBUTE_MAJOR, scene.num_gaussians,
                       scene.params_per_gaussian)


def diag_jtj(scene: GaussianScene, cache: GradientCache) -> ParamVector:
    """Diagonal of J^T J, attribute-major: M_k = sum_i (dr_i/dx_k)^2.

    The residual weighting enters through the cached per-view grad_r_sq.
    """
    cache.require_order(CacheOrder.GAUSSIAN_SORTED)
    proj = project_scene(scene, cache.camera, cache.config)
    grads = splat_gradients(scene, cache.camera, cache.config, proj)
    ctx = _entry_context(cache, proj)
    g = cache.gaussian_ids

    w_r = cache.grad_r_sq.reshape(-1, 3)[cache.pixel_ids]  # (E, 3)
    dalpha_geom = _gather_alpha_geom(ctx, grads, g)

    m_geom = np.zeros((scene.num_gaussians, GEOM_PARAMS))
    for ch in range(3):
        dcdx = (cache.dc_dalpha[:, ch, None] * dalpha_geom
                + cache.dc_dcs[:, None] * grads.dcol_geom[g, ch])
        m_geom += _segment_sum(w_r[:, ch, None] * dcdx ** 2, cache.offsets)

    t_sh = w_r * (cache.dc_dcs ** 2)[:, None] * grads.sh_mask[g]
    s_sh = _segment_sum(t_sh, cache.offsets)  # (G, 3)
    m_sh = s_sh[:, :, None] * (grads.sh_basis ** 2)[:, None, :]

    values = _assemble_attribute_major(m_geom, m_sh, scene)
    return ParamVector(values, Layout.ATTRIBUTE_MAJOR, scene.num_gaussians,
                       scene.params_per_gaussian)


# ---------------------------------------------------------------------------
# Dense and finite-difference oracles
# ---------------------------------------------------------------------------

@dataclass
class DenseJacobianOracle:
    """Explicitly materialized Jacobians for desk-scale verification.

    ``color_matrix`` is dc_i/dx_k (color slots x attribute-major params);
    ``matrix`` is the residual-space Jacobian dr_i/dx_k with the L1 block on
    top of the SSIM block ('l1ssim') or the plain difference rows ('l2').
    """

    matrix: np.ndarray
    color_matrix: np.ndarray
    mode: str


def dense_jacobian(scene: GaussianScene, camera: Camera, bundle: ResidualBundle,
                   config: RenderConfig = DEFAULT_CONFIG,
                   render_result: RenderResult | None = None) -> DenseJacobianOracle:
    """Materialize the analytic Jacobian through the same per-entry chain.

    Guarded to small problems; raises when 2 N M would exceed
    ``DENSE_ORACLE_MAX_ENTRIES``.
    """
    n_slots = camera.num_pixels * 3
    m = scene.param_count
    if 2 * n_slots * m > DENSE_ORACLE_MAX_ENTRIES:
        raise ValueError(f"dense oracle limited to 2NM <= {DENSE_ORACLE_MAX_ENTRIES}, "
                         f"got {2 * n_slots * m}")
    rr = render_result if render_result is not None else render(scene, camera, config)
    _, cache = build_cache(scene, camera, bundle, config, render_result=rr)
    proj = rr.splats
    grads = splat_gradients(scene, camera, config, proj)
    ctx = _entry_context(cache, proj)
    g = cache.gaussian_ids
    n_g = scene.num_gaussians
    k = sh.num_coefficients(scene.sh_degree)

    jc = np.zeros((n_slots, m))
    dalpha_geom = _gather_alpha_geom(ctx, grads, g)
    # attribute-major column of (gaussian, attribute a) is a * G + gaussian
    cols_geom = np.arange(GEOM_PARAMS)[None, :] * n_g + g[:, None]
    for ch in range(3):
        rows = cache.pixel_ids * 3 + ch
        vals = (cache.dc_dalpha[:, ch, None] * dalpha_geom
                + cache.dc_dcs[:, None] * grads.dcol_geom[g, ch])
        np.add.at(jc, (rows[:, None], cols_geom), vals)
        sh_vals = (cache.dc_dcs * grads.sh_mask[g, ch])[:, None] * grads.sh_basis[g]
        cols_sh = (GEOM_PARAMS + ch * k + np.arange(k))[None, :] * n_g + g[:, None]
        np.add.at(jc, (rows[:, None], cols_sh), sh_vals)

    if bundle.mode == "l2":
        matrix = jc.copy()
    else:
        matrix = np.vstack([bundle.drabs_dc.reshape(-1)[:, None] * jc,
                            bundle.drssim_dc.reshape(-1)[:, None] * jc])
    return DenseJacobianOracle(matrix=matrix, color_matrix=jc, mode=bundle.mode)


def finite_difference_jacobian(scene: GaussianScene, camera: Camera, gt: np.ndarray,
                               lambda1: float = 0.8, lambda2: float = 0.2,
                               mode: str = "l1ssim", h: float = 1e-5,
                               config: RenderConfig | None = None) -> np.ndarray:
    """Central finite differences of the residual vector, forward passes only.

    SSIM residuals are evaluated under the center-pixel convention: every
    perturbed score sees only its own pixel's new value against the base
    render's neighborhood statistics. Defaults to the kink-free rasterizer
    thresholds so that differences are taken on a smooth function.
    """
    if config is None:
        config = RenderConfig.smooth()
    gt = np.asarray(gt, dtype=np.float64)
    base = render(scene, camera, config).image.rgb

    def residual_vec(image: np.ndarray) -> np.ndarray:
        if mode == "l2":
            return (image - gt).reshape(-1)
        r_abs = np.sqrt(lambda1 * np.abs(image - gt))
        scores = ssim_map_center_substituted(base, gt, image)
        r_ssim = np.sqrt(lambda2 * np.maximum(1.0 - scores, 0.0))
        return np.concatenate([r_abs.reshape(-1), r_ssim.reshape(-1)])

    x0 = flatten(scene, Layout.ATTRIBUTE_MAJOR)
    rows = camera.num_pixels * 3 * (1 if mode == "l2" else 2)
    out = np.empty((rows, len(x0)))
    for idx in range(len(x0)):
        shift = np.zeros(len(x0))
        shift[idx] = h
        plus = render(unflatten(x0.with_values(x0.values + shift), scene.sh_degree,
                                scene.background), camera, config).image.rgb
        minus = render(unflatten(x0.with_values(x0.values - shift), scene.sh_degree,
                                 scene.background), camera, config).image.rgb
        out[:, idx] = (residual_vec(plus) - residual_vec(minus)) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# Debug cache dump (little-endian, not a stable format)
# ---------------------------------------------------------------------------

_DUMP_MAGIC = b"GCCH"


def dump_cache(cache: GradientCache, path) -> None:
    """Write header {entry_count, order} then packed entries, little-endian."""
    import struct

    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(struct.pack("<QBII", cache.entry_count,
                            0 if cache.order is CacheOrder.PIXEL_SORTED else 1,
                            cache.camera.num_pixels, cache.n_gaussians))
        packed = np.empty((cache.entry_count, 8), dtype="<f8")
        packed[:, 0] = cache.pixel_ids
        packed[:, 1] = cache.gaussian_ids
        packed[:, 2] = cache.alphas
        packed[:, 3] = cache.transmittances
        packed[:, 4:7] = cache.dc_dalpha
        packed[:, 7] = cache.dc_dcs
        f.write(packed.tobytes())


def load_cache_dump(path) -> dict:
    """Read back a cache dump into plain arrays (debugging aid)."""
    import struct

    with open(path, "rb") as f:
        if f.read(4) != _DUMP_MAGIC:
            raise ValueError("not a cache dump file")
        entry_count, order, n_pixels, n_gaussians = struct.unpack("<QBII", f.read(17))
        packed = np.frombuffer(f.read(entry_count * 8 * 8), dtype="<f8").reshape(-1, 8)
    return {
        "order": CacheOrder.PIXEL_SORTED if order == 0 else CacheOrder.GAUSSIAN_SORTED,
        "n_pixels": n_pixels, "n_gaussians": n_gaussians,
        "pixel_ids": packed[:, 0].astype(np.int64),
        "gaussian_ids": packed[:, 1].astype(np.int64),
        "alphas": packed[:, 2].copy(), "transmittances": packed[:, 3].copy(),
        "dc_dalpha": packed[:, 4:7].copy(), "dc_dcs": packed[:, 7].copy(),
    }
