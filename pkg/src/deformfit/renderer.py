"""Pinhole/orthographic projection, z-buffer rasterisation and a soft silhouette.

Pixel coordinates are continuous with the origin at the top-left image
corner, x to the right and y downward; the centre of pixel (row i, col j) is
(j + 0.5, i + 0.5).

The hard rasteriser picks the nearest face per pixel with a z-buffer and
interpolates attributes with perspective-correct barycentrics. The soft
renderer reuses that visibility for colour, depth and flow (so gradients reach
vertices through the barycentrics) and replaces the binary mask by
``sigmoid(+-d / sigma)`` where ``d`` is the 2D distance from the pixel centre
to the nearest silhouette edge, positive for covered pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Mesh, Texture, as_index

_DT = torch.float64


def _t(x, dtype=_DT) -> torch.Tensor:
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = x.copy()
    return torch.as_tensor(x, dtype=dtype)


NEAR = 1e-3
SOFT_CUTOFF = 12.0  # silhouette influence radius in units of sigma
PROBE_PX = 1.0


@dataclass(frozen=True)
class Camera:
    mode: str = "perspective"
    fov_deg: float = 25.0
    position: tuple = (0.0, 0.0, 10.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.mode not in ("perspective", "orthographic"):
            raise ValueError(f"unknown camera mode {self.mode!r}")
        if not 0.0 < self.fov_deg < 120.0:
            raise ValueError("field of view must lie in (0, 120) degrees")
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position coincides with look_at")

    @property
    def focal_px(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def object_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.look_at, self.position)))

    def basis(self) -> np.ndarray:
        """Rows: camera right, up, viewing direction (world frame)."""
        fwd = np.subtract(self.look_at, self.position).astype(np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd])

    def with_size(self, width: int, height: int | None = None) -> "Camera":
        from dataclasses import replace

        return replace(self, width=width, height=width if height is None else height)

    def with_mode(self, mode: str) -> "Camera":
        from dataclasses import replace

        return replace(self, mode=mode)


@dataclass
class RenderOutput:
    image: object
    mask: object
    depth: object
    flow: object = None
    face_id: object = None
    bary: object = None


def project(vertices, camera: Camera):
    """Pixel coordinates (K, 2), view depth (K,) and a validity flag (K,)."""
    v = _t(vertices)
    basis = _t(camera.basis())
    pc = (v - _t(camera.position)) @ basis.T
    depth = pc[:, 2]
    f = camera.focal_px
    if camera.mode == "perspective":
        valid = depth.detach() > NEAR
        safe = torch.where(valid, depth, torch.ones_like(depth))
        scale = f / safe
    else:
        valid = torch.ones_like(depth, dtype=torch.bool)
        scale = torch.full_like(depth, f / camera.object_distance)
    x = camera.width / 2.0 + pc[:, 0] * scale
    y = camera.height / 2.0 - pc[:, 1] * scale
    return torch.stack([x, y], dim=1), depth, valid


# ------------------------------------------------------------ enumeration


def _bbox_pairs(lo, hi, width, height):
    """All (primitive, pixel) pairs whose pixel centre lies in each bbox.

    ``lo``/``hi`` are (N, 2) continuous pixel-space corners.
    """
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    total = int(count.sum())
    prim = np.repeat(np.arange(len(lo)), count)
    start = np.repeat(np.cumsum(count) - count, count)
    off = np.arange(total) - start
    nxr = np.repeat(nx, count)
    px = np.repeat(x0, count) + off % np.maximum(nxr, 1)
    py = np.repeat(y0, count) + off // np.maximum(nxr, 1)
    return prim, py * width + px, px + 0.5, py + 0.5


def _face_mask(faces, valid):
    return valid[faces].all(axis=1)


def zbuffer(xy, depth, faces, valid, camera: Camera):
    """Nearest face per pixel. Returns face_id (H, W) (-1 empty), bary (H, W, 3), depth (H, W)."""
    h, w = camera.height, camera.width
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    faces = np.asarray(faces)
    face_id = -np.ones(h * w, dtype=np.int64)
    bary = np.zeros((h * w, 3))
    zbuf = np.full(h * w, np.inf)
    keep = np.flatnonzero(_face_mask(faces, np.asarray(valid)))
    if len(keep):
        tri = xy[faces[keep]]
        prim, pix, cx, cy = _bbox_pairs(tri.min(axis=1), tri.max(axis=1), w, h)
        if len(prim):
            t = tri[prim]
            a, b, c = t[:, 0], t[:, 1], t[:, 2]
            area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
            e0 = (b[:, 0] - cx) * (c[:, 1] - cy) - (b[:, 1] - cy) * (c[:, 0] - cx)
            e1 = (c[:, 0] - cx) * (a[:, 1] - cy) - (c[:, 1] - cy) * (a[:, 0] - cx)
            e2 = (a[:, 0] - cx) * (b[:, 1] - cy) - (a[:, 1] - cy) * (b[:, 0] - cx)
            ok = np.abs(area) > 1e-12
            sa = np.where(ok, area, 1.0)
            lam = np.stack([e0, e1, e2], axis=1) / sa[:, None]
            inside = ok & (lam >= 0).all(axis=1)
            prim, pix, lam = prim[inside], pix[inside], lam[inside]
            fz = depth[faces[keep]][prim]
            if camera.mode == "perspective":
                inv = lam / fz
                z = 1.0 / inv.sum(axis=1)
                bc = inv * z[:, None]
            else:
                z = (lam * fz).sum(axis=1)
                bc = lam
            order = np.lexsort((keep[prim], z, pix))
            pix_o = pix[order]
            first = np.ones(len(order), dtype=bool)
            first[1:] = pix_o[1:] != pix_o[:-1]
            sel = order[first]
            face_id[pix[sel]] = keep[prim[sel]]
            bary[pix[sel]] = bc[sel]
            zbuf[pix[sel]] = z[sel]
    return face_id.reshape(h, w), bary.reshape(h, w, 3), zbuf.reshape(h, w)


# ------------------------------------------------------------ shading


def texture_tensor(texture) -> torch.Tensor:
    """(3, H, W) float64 tensor from a Texture, array (H, W, 3) or tensor (3, H, W)."""
    if isinstance(texture, torch.Tensor):
        return texture.to(_DT)
    px = texture.pixels if isinstance(texture, Texture) else np.asarray(texture)
    return _t(np.ascontiguousarray(px)).permute(2, 0, 1)


def bilinear(tex: torch.Tensor, gx: torch.Tensor, gy: torch.Tensor) -> torch.Tensor:
    """Clamp-to-edge bilinear lookup at normalised coords in [-1, 1] (texel centres at (2i+1)/n - 1)."""
    _, th, tw = tex.shape
    x = ((gx + 1.0) * tw / 2.0 - 0.5).clamp(0.0, tw - 1.0)
    y = ((gy + 1.0) * th / 2.0 - 0.5).clamp(0.0, th - 1.0)
    x0 = torch.floor(x.detach()).long().clamp(max=tw - 1)
    y0 = torch.floor(y.detach()).long().clamp(max=th - 1)
    x1 = (x0 + 1).clamp(max=tw - 1)
    y1 = (y0 + 1).clamp(max=th - 1)
    tx = (x - x0.to(_DT))[:, None]
    ty = (y - y0.to(_DT))[:, None]
    t = tex.permute(1, 2, 0)
    top = t[y0, x0] + (t[y0, x1] - t[y0, x0]) * tx
    bot = t[y1, x0] + (t[y1, x1] - t[y1, x0]) * tx
    return top + (bot - top) * ty


def sample_texture(tex: torch.Tensor, uv: torch.Tensor, side: torch.Tensor) -> torch.Tensor:
    """Lookup in the two-sided atlas: x >= 0 reads the right half, x < 0 the mirrored left half."""
    gx = torch.where(side >= 0, uv[:, 0], -uv[:, 0])
    gy = 1.0 - 2.0 * uv[:, 1]
    return bilinear(tex, gx, gy)


def _interp(attr, faces, fid, bary):
    return (attr[faces[fid]] * bary[..., None]).sum(dim=1)


def shade(mesh: Mesh, texture, face_id, bary, background=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """Textured image (H, W, 3) from per-pixel face ids and barycentrics."""
    fid = as_index(face_id)
    h, w = fid.shape
    bg = _t(background)
    image = bg.expand(h, w, 3).clone()
    cov = fid >= 0
    if texture is None or not bool(cov.any()):
        return image
    faces = as_index(mesh.faces)
    b = _t(bary)[cov]
    f = fid[cov]
    uv = _interp(_t(mesh.uv), faces, f, b)
    side = _interp(_t(mesh.vertices[:, 0])[:, None], faces, f, b)[:, 0]
    image[cov] = sample_texture(texture_tensor(texture), uv, side)
    return image


# ------------------------------------------------------------ hard render


def rasterize_hard(mesh: Mesh, posed_vertices, texture, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    with torch.no_grad():
        xy, depth, valid = project(posed_vertices, camera)
        fid, bary, zb = zbuffer(xy.numpy(), depth.numpy(), mesh.faces, valid.numpy(), camera)
        image = shade(mesh, texture, fid, bary, background).numpy()
    return RenderOutput(image=image, mask=(fid >= 0).astype(np.float64), depth=zb, face_id=fid, bary=bary)


# ------------------------------------------------------------ soft render


def silhouette_edges(mesh: Mesh, xy: np.ndarray, valid: np.ndarray):
    """Edges separating a front-facing face from a back-facing/culled one (or open boundary).

    Returns (vertex pairs (S, 2), opposite vertex of the owning face (S,)).
    """
    faces = mesh.faces
    fe, ef = mesh.face_edges
    tri = xy[faces]
    area = (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1]) - (tri[:, 1, 1] - tri[:, 0, 1]) * (
        tri[:, 2, 0] - tri[:, 0, 0]
    )
    fvalid = _face_mask(faces, valid)
    # outward CCW faces appear clockwise once y points down
    front = fvalid & (area < 0)
    a, b = ef[:, 0], ef[:, 1]
    has_b = b >= 0
    fa = front[a] & fvalid[a]
    fb = np.where(has_b, front[np.maximum(b, 0)], False)
    boundary = ~has_b & fvalid[a]
    contour = has_b & (fa != fb)
    owner = np.where(boundary | fa, a, np.maximum(b, 0))
    sel = np.flatnonzero(boundary | contour)
    edges = mesh.edges[sel]
    own = faces[owner[sel]]
    opposite = own.sum(axis=1) - edges.sum(axis=1)
    return edges, opposite


def soft_mask(mesh: Mesh, xy: torch.Tensor, valid, covered: np.ndarray, camera: Camera, sharpness: float):
    """Soft silhouette (H, W) differentiable w.r.t. projected vertex positions."""
    h, w = camera.height, camera.width
    sigma_px = sharpness * w / 2.0
    xy_np = xy.detach().numpy()
    edges, opposite = silhouette_edges(mesh, xy_np, np.asarray(valid))
    cov_flat = covered.reshape(-1)
    sign = _t(np.where(cov_flat, 1.0, -1.0))
    if len(edges) == 0:
        return _t(covered)
    seg = xy_np[edges]
    margin = SOFT_CUTOFF * sigma_px
    prim, pix, cx, cy = _bbox_pairs(seg.min(axis=1) - margin, seg.max(axis=1) + margin, w, h)
    # drop covered pixels whose nearest edge point has coverage on both sides
    a_np, b_np = seg[prim, 0], seg[prim, 1]
    d_np = b_np - a_np
    p_np = np.stack([cx, cy], axis=1)
    r_np = np.clip(((p_np - a_np) * d_np).sum(1) / np.maximum((d_np * d_np).sum(1), 1e-300), 0.0, 1.0)
    q = a_np + r_np[:, None] * d_np
    nrm = np.stack([d_np[:, 1], -d_np[:, 0]], axis=1)
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    opp = xy_np[opposite[prim]]
    flip = ((opp - a_np) * nrm).sum(1) > 0
    nrm[flip] *= -1.0
    probe = q + PROBE_PX * nrm
    pcol = np.floor(probe[:, 0]).astype(np.int64)
    prow = np.floor(probe[:, 1]).astype(np.int64)
    inimg = (pcol >= 0) & (pcol < w) & (prow >= 0) & (prow < h)
    probe_cov = np.zeros(len(prim), dtype=bool)
    probe_cov[inimg] = covered[prow[inimg], pcol[inimg]]
    keep = ~(cov_flat[pix] & probe_cov)
    prim, pix = prim[keep], pix[keep]
    pc = _t(np.stack([cx[keep], cy[keep]], axis=1))
    e = as_index(edges[prim])
    a = xy[e[:, 0]]
    d = xy[e[:, 1]] - a
    rel = pc - a
    r = ((rel * d).sum(1) / (d * d).sum(1).clamp_min(1e-300)).clamp(0.0, 1.0)
    diff = rel - r[:, None] * d
    dist = torch.sqrt((diff * diff).sum(1).clamp_min(1e-24))
    big = torch.full((h * w,), 1e6, dtype=_DT)
    dmin = big.scatter_reduce(0, as_index(pix), dist, reduce="amin", include_self=True)
    return torch.sigmoid(sign * dmin / sigma_px).reshape(h, w)


def texel_cells(mesh: Mesh, texture_hw, face_id, bary) -> np.ndarray:
    """Index of the bilinear cell each covered pixel samples (-1 for background).

    Within one cell the sampled colour is smooth in the lookup position;
    crossing a cell boundary (or the clamp at the atlas border) is a kink.
    """
    th, tw = texture_hw
    fid = np.asarray(face_id)
    cells = -np.ones(fid.shape, dtype=np.int64)
    cov = fid >= 0
    if not cov.any():
        return cells
    f = mesh.faces[fid[cov]]
    b = np.asarray(bary)[cov]
    uv = (mesh.uv[f] * b[..., None]).sum(1)
    side = (mesh.vertices[f, 0] * b).sum(1)
    gx = np.where(side >= 0, uv[:, 0], -uv[:, 0])
    gy = 1.0 - 2.0 * uv[:, 1]
    x = np.floor((gx + 1.0) * tw / 2.0 - 0.5).astype(np.int64) + 1
    y = np.floor((gy + 1.0) * th / 2.0 - 0.5).astype(np.int64) + 1
    cells[cov] = y * (tw + 2) + x
    return cells


def render_state(mesh: Mesh, posed_vertices, camera: Camera, texture_hw=None):
    """Discrete part of a render: face ids, silhouette edges, projected vertices, texel cells."""
    with torch.no_grad():
        xy, depth, valid = project(posed_vertices, camera)
        xy_np, valid_np = xy.numpy(), valid.numpy()
        fid, bary, _ = zbuffer(xy_np, depth.numpy(), mesh.faces, valid_np, camera)
        edges, _ = silhouette_edges(mesh, xy_np, valid_np)
    cells = None if texture_hw is None or mesh.uv is None else texel_cells(mesh, texture_hw, fid, bary)
    return fid, {tuple(e) for e in edges.tolist()}, xy_np, cells


def stable_pixels(mesh: Mesh, posings, camera: Camera, sharpness: float = 1e-2, texture_hw=None) -> np.ndarray:
    """Pixels whose discrete render state agrees across all ``posings``.

    Compares visible face, nearby silhouette edges and (with ``texture_hw``)
    the bilinear texel cell. Used to keep visibility events and texture kinks
    out of finite-difference checks.
    """
    states = [render_state(mesh, v, camera, texture_hw) for v in posings]
    fid0, edges0, xy0, cells0 = states[0]
    keep = np.ones(fid0.shape, dtype=bool)
    margin = SOFT_CUTOFF * sharpness * camera.width / 2.0 + 1.0
    for fid, edges, xy, cells in states[1:]:
        keep &= fid == fid0
        if cells is not None:
            keep &= cells == cells0
        changed = list(edges ^ edges0)
        if changed:
            seg = np.concatenate([xy0[changed], xy[changed]], axis=1)
            _, pix, _, _ = _bbox_pairs(seg.min(axis=1) - margin, seg.max(axis=1) + margin, camera.width, camera.height)
            keep.reshape(-1)[pix] = False
    return keep


def rasterize_soft(
    mesh: Mesh,
    posed_vertices,
    texture,
    camera: Camera,
    sharpness: float = 1e-2,
    background=(0.0, 0.0, 0.0),
) -> RenderOutput:
    """Differentiable render: soft mask, plus image/depth through barycentric interpolation."""
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    xy, depth, valid = project(posed_vertices, camera)
    fid, _, _ = zbuffer(xy.detach().numpy(), depth.detach().numpy(), mesh.faces, valid.numpy(), camera)
    covered = fid >= 0
    mask = soft_mask(mesh, xy, valid.numpy(), covered, camera, sharpness)
    bary, zmap = differentiable_bary(xy, depth, mesh.faces, fid, camera)
    image = shade(mesh, texture, fid, bary, background) if texture is not None else None
    return RenderOutput(image=image, mask=mask, depth=zmap, face_id=fid, bary=bary)


def differentiable_bary(xy, depth, faces, face_id, camera: Camera):
    """Perspective-correct barycentrics (H, W, 3) and depth (H, W) at pixel centres of fixed faces."""
    h, w = face_id.shape
    fid = as_index(face_id).reshape(-1)
    cov = fid >= 0
    bary = torch.zeros(h * w, 3, dtype=_DT)
    zmap = torch.full((h * w,), math.inf, dtype=_DT)
    if bool(cov.any()):
        idx = torch.nonzero(cov)[:, 0]
        fv = as_index(faces)[fid[idx]]
        p = torch.stack([(idx % w).to(_DT) + 0.5, (idx // w).to(_DT) + 0.5], dim=1)
        a, b, c = xy[fv[:, 0]], xy[fv[:, 1]], xy[fv[:, 2]]

        def cross(u, v):
            return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

        area = cross(b - a, c - a)
        lam = torch.stack([cross(b - p, c - p), cross(c - p, a - p), cross(a - p, b - p)], dim=1) / area[:, None]
        fz = depth[fv]
        if camera.mode == "perspective":
            inv = lam / fz
            z = 1.0 / inv.sum(1)
            bc = inv * z[:, None]
        else:
            z = (lam * fz).sum(1)
            bc = lam
        bary = bary.index_put((idx,), bc)
        zmap = zmap.index_put((idx,), z)
    return bary.reshape(h, w, 3), zmap.reshape(h, w)


# ------------------------------------------------------------ flow


def flow_from_visibility(face_id, bary, faces, posed_t, posed_t1, camera: Camera) -> torch.Tensor:
    """Pixel displacement (H, W, 2) of the surface point seen at each pixel between two posings."""
    fid = as_index(face_id)
    h, w = fid.shape
    flow = torch.zeros(h, w, 2, dtype=_DT)
    cov = fid >= 0
    if not bool(cov.any()):
        return flow
    f = as_index(faces)[fid[cov]]
    b = _t(bary)[cov]
    p0 = (_t(posed_t)[f] * b[..., None]).sum(1)
    p1 = (_t(posed_t1)[f] * b[..., None]).sum(1)
    xy0, _, _ = project(p0, camera)
    xy1, _, _ = project(p1, camera)
    return flow.index_put((cov,), xy1 - xy0)


def render_flow(mesh: Mesh, skeleton, shape_vertices, pose_t, pose_t1, camera: Camera, weights=None) -> np.ndarray:
    """Forward flow from pose_t to pose_t1, using visibility at pose_t; background is (0, 0)."""
    from .posing import pose_vertices

    with torch.no_grad():
        vt = pose_vertices(shape_vertices, pose_t, skeleton, weights)
        vt1 = pose_vertices(shape_vertices, pose_t1, skeleton, weights)
        xy, depth, valid = project(vt, camera)
        fid, bary, _ = zbuffer(xy.numpy(), depth.numpy(), mesh.faces, valid.numpy(), camera)
        return flow_from_visibility(fid, bary, mesh.faces, vt, vt1, camera).numpy()


def flip_horizontal(img):
    return img[:, ::-1] if isinstance(img, np.ndarray) else torch.flip(img, dims=[1])


def mask_iou(a, b) -> float:
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
