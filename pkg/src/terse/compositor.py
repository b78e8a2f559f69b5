"""Differentiable affine compositing of a foreground onto a background.

Coordinates are normalized to [-1, 1] with the origin at the image center
and pixel centers at ``(2 i + 1) / W - 1`` (half-pixel convention), so a
translation of ``t`` moves content by ``t * W / 2`` pixels.

The forward chain for one sample is::

    params --affine_to_matrix--> M --make_grid--> grid
    fg_warp = bilinear_sample(fg, grid)
    alpha   = clean_mask(bilinear_sample(foreground_mask(fg), grid))
    out     = alpha_blend(bg, fg_warp, alpha)

and ``compose_backward`` returns d(out)/d(params) contracted with an
upstream gradient.
"""
from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core.rng import keyed_rng

PARAM_NAMES = ("rotation", "tx", "ty", "shear", "sx", "sy")
IDENTITY = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0])
MASK_MU = 1.0 - 1e-7
IMAGE_SIZE = 40


class DegenerateTransform(ValueError):
    pass


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    shear: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def as_array(self):
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @classmethod
    def from_array(cls, arr):
        return cls(*map(float, arr))


@dataclass(frozen=True)
class ClampRanges:
    """Per-parameter [min, max]; defaults follow the AffNIST generation ranges."""

    rotation: tuple = (-np.deg2rad(20.0), np.deg2rad(20.0))
    tx: tuple = (-0.3, 0.3)
    ty: tuple = (-0.3, 0.3)
    shear: tuple = (-0.2, 0.2)
    sx: tuple = (0.8, 1.2)
    sy: tuple = (0.8, 1.2)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not lo <= hi:
                raise ValueError(f"clamp range {f.name}: min {lo} > max {hi}")
            ident = IDENTITY[PARAM_NAMES.index(f.name)]
            if not lo <= ident <= hi:
                raise ValueError(f"clamp range {f.name}=[{lo}, {hi}] excludes identity {ident}")
        if self.sx[0] <= 0 or self.sy[0] <= 0:
            raise ValueError("scale ranges must be strictly positive")

    @property
    def lo(self):
        return np.array([getattr(self, n)[0] for n in PARAM_NAMES])

    @property
    def hi(self):
        return np.array([getattr(self, n)[1] for n in PARAM_NAMES])

    @classmethod
    def identity(cls):
        return cls(**{n: (v, v) for n, v in zip(PARAM_NAMES, IDENTITY)})

    def contains(self, params, tol=1e-9):
        p = np.atleast_2d(params)
        return bool(np.all((p >= self.lo - tol) & (p <= self.hi + tol)))

    def sample(self, rng, n):
        return rng.uniform(self.lo, self.hi, size=(n, 6))


def squash(z, ranges):
    """Map unconstrained head outputs onto the clamp box via a scaled tanh.

    Returns ``(params, dparams/dz)``; z = 0 lands on the range midpoints.
    """
    mid = (ranges.lo + ranges.hi) / 2
    half = (ranges.hi - ranges.lo) / 2
    t = np.tanh(z)
    return mid + half * t, half * (1 - t * t)


def affine_to_matrix(params):
    """(N, 6) or (6,) params -> (N, 2, 3) matrices M = T . R . Sh . Sc."""
    p = np.atleast_2d(np.asarray(params, np.float64))
    rot, tx, ty, sh, sx, sy = p.T
    c, s = np.cos(rot), np.sin(rot)
    m = np.empty((len(p), 2, 3))
    # R @ [[sx, sh*sy], [0, sy]]
    m[:, 0, 0] = c * sx
    m[:, 0, 1] = (c * sh - s) * sy
    m[:, 1, 0] = s * sx
    m[:, 1, 1] = (s * sh + c) * sy
    m[:, 0, 2] = tx
    m[:, 1, 2] = ty
    return m


def matrix_jacobian(params):
    """Analytic d M / d params, shape (N, 6, 2, 3)."""
    p = np.atleast_2d(np.asarray(params, np.float64))
    rot, _, _, sh, sx, sy = p.T
    c, s = np.cos(rot), np.sin(rot)
    j = np.zeros((len(p), 6, 2, 3))
    j[:, 0, 0, 0] = -s * sx
    j[:, 0, 0, 1] = (-s * sh - c) * sy
    j[:, 0, 1, 0] = c * sx
    j[:, 0, 1, 1] = (c * sh - s) * sy
    j[:, 1, 0, 2] = 1.0
    j[:, 2, 1, 2] = 1.0
    j[:, 3, 0, 1] = c * sy
    j[:, 3, 1, 1] = s * sy
    j[:, 4, 0, 0] = c
    j[:, 4, 1, 0] = s
    j[:, 5, 0, 1] = c * sh - s
    j[:, 5, 1, 1] = s * sh + c
    return j


def inverse_matrix(params):
    """Matrix of the inverse transform (M^-1 is not in general T.R.Sh.Sc form)."""
    m = affine_to_matrix(params)
    a_inv = np.linalg.inv(m[:, :, :2])
    out = np.empty_like(m)
    out[:, :, :2] = a_inv
    out[:, :, 2] = -np.einsum("nij,nj->ni", a_inv, m[:, :, 2])
    return out


def lattice(h, w):
    """Normalized (x, y) coordinates of every pixel center, shape (h, w, 2)."""
    xs = (2 * np.arange(w) + 1) / w - 1
    ys = (2 * np.arange(h) + 1) / h - 1
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def make_grid(matrix, out_h, out_w):
    """Source coordinates M^-1 q for every output pixel q (inverse warping).

    Content therefore moves forward by M. Returns ``(grid, cache)``; grid
    has shape (N, out_h, out_w, 2) holding (x, y).
    """
    m = np.asarray(matrix, np.float64).reshape(-1, 2, 3)
    a, t = m[:, :, :2], m[:, :, 2]
    det = np.linalg.det(a)
    if np.any(np.abs(det) < 1e-8):
        raise DegenerateTransform(f"singular affine matrix (|det| = {np.abs(det).min():.3g})")
    a_inv = np.linalg.inv(a)
    q = lattice(out_h, out_w)
    grid = np.einsum("nij,nhwj->nhwi", a_inv, q[None] - t[:, None, None, :])
    return grid, a_inv


def make_grid_backward(dgrid, grid, a_inv):
    """d loss / d M given d loss / d grid.

    With p = A^-1 (q - t): dL/dA = -A^-T (sum g p^T), dL/dt = -A^-T sum g.
    """
    gp = np.einsum("nhwi,nhwj->nij", dgrid, grid)
    gs = dgrid.sum(axis=(1, 2))
    a_inv_t = a_inv.transpose(0, 2, 1)
    dm = np.empty((len(grid), 2, 3))
    dm[:, :, :2] = -a_inv_t @ gp
    dm[:, :, 2] = -np.einsum("nij,nj->ni", a_inv_t, gs)
    return dm


def bilinear_sample(image, grid):
    """Sample (N, H, W) images at normalized grid points; outside reads zero.

    Returns ``(out, cache)`` with out shaped like the grid's first three axes.
    """
    img = np.asarray(image)
    n, h, w = img.shape
    ix = ((grid[..., 0] + 1) * w - 1) / 2
    iy = ((grid[..., 1] + 1) * h - 1) / 2
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    fx = ix - x0
    fy = iy - y0
    batch = np.arange(n)[:, None, None]
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[batch, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * valid
            corners.append((xi, yi, valid, vals))
    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    return out.astype(img.dtype), (img.shape, fx, fy, corners)


def bilinear_sample_backward(dout, cache, need_image_grad=False):
    """Returns ``(dimage or None, dgrid)``."""
    (n, h, w), fx, fy, corners = cache
    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
    dfx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    dfy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    dgrid = np.stack([dout * dfx * (w / 2), dout * dfy * (h / 2)], axis=-1)
    dimage = None
    if need_image_grad:
        weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
        plane = (np.arange(n) * h * w)[:, None, None]
        acc = np.zeros(n * h * w)
        for (xi, yi, valid, _), wt in zip(corners, weights):
            flat = plane + np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            acc += np.bincount(flat.ravel(), weights=(dout * wt * valid).ravel(), minlength=n * h * w)
        dimage = acc.reshape(n, h, w)
    return dimage, dgrid


def gaussian_kernel(size=3, sigma=0.8):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


BLUR_KERNEL = gaussian_kernel()


def blur(images, kernel=BLUR_KERNEL):
    """Zero-padded 'same' correlation of (N, H, W) images with a small kernel."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    n, h, w = images.shape
    padded = np.pad(images, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(images, dtype=np.result_type(images, kernel))
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[:, i:i + h, j:j + w]
    return out.astype(images.dtype)


def blur_backward(dout, kernel=BLUR_KERNEL):
    return blur(dout, kernel[::-1, ::-1])


def clean_mask(mask, kernel=BLUR_KERNEL):
    """Strip resampling speckle from a warped mask and soften its edges.

    ``relu(mask - mu)`` with mu = 1 - 1e-7 keeps only fully-covered pixels,
    dividing by the per-image maximum restores a binary image, and the blur
    feathers the boundary. An all-zero mask stays all-zero.
    Returns ``(alpha, cache)``.
    """
    m = np.asarray(mask)
    single = m.ndim == 2
    m3 = m[None] if single else m
    r = np.maximum(m3 - MASK_MU, 0.0)
    peak = r.reshape(len(r), -1).max(axis=1)
    scale = np.where(peak > 0, 1.0 / np.where(peak > 0, peak, 1.0), 0.0)
    b = r * scale[:, None, None]
    alpha = np.clip(blur(b, kernel), 0.0, 1.0).astype(m.dtype)
    cache = (m3 > MASK_MU, r, b, peak, kernel, single)
    return (alpha[0] if single else alpha), cache


def clean_mask_backward(dalpha, cache):
    active, r, b, peak, kernel, single = cache
    d = dalpha[None] if single else dalpha
    db = blur_backward(d, kernel)
    n = len(r)
    safe = np.where(peak > 0, peak, 1.0)[:, None, None]
    dr = db / safe
    # y = r / max(r): the max's own coordinate also receives -sum(g * r) / max^2
    flat_r = r.reshape(n, -1)
    arg = flat_r.argmax(axis=1)
    corr = -(db * r).reshape(n, -1).sum(axis=1) / safe[:, 0, 0] ** 2
    dr = dr.reshape(n, -1)
    dr[np.arange(n), arg] += np.where(peak > 0, corr, 0.0)
    dr = dr.reshape(r.shape) * active
    dm = np.where(peak[:, None, None] > 0, dr, 0.0)
    return dm[0] if single else dm


def alpha_blend(background, foreground, alpha):
    """alpha * fg + (1 - alpha) * bg, per pixel."""
    if not np.shape(background) == np.shape(foreground) == np.shape(alpha):
        raise ValueError(f"alpha_blend: extents differ {np.shape(background)}, "
                         f"{np.shape(foreground)}, {np.shape(alpha)}")
    return alpha * foreground + (1 - alpha) * background


def support(images):
    """Binary mask of every pixel carrying any ink."""
    return (np.asarray(images) > 0).astype(np.asarray(images).dtype)


def foreground_mask(images, grow=2):
    """Ink support dilated by ``grow`` pixels.

    The speckle threshold erodes a warped mask by about one pixel and the
    feathering blur reaches one more, so a 2-pixel margin keeps alpha at 1
    over every stroke.
    """
    m = support(images)
    if grow == 0:
        return m
    single = m.ndim == 2
    m3 = m[None] if single else m
    k = 2 * grow + 1
    padded = np.pad(m3, ((0, 0), (grow, grow), (grow, grow)))
    out = sliding_window_view(padded, (k, k), axis=(1, 2)).max(axis=(-1, -2))
    return out[0] if single else out


def compose(fg, bg, params, mask=None):
    """Composite ``bg (+) A(fg)`` for a batch.

    fg, bg: (N, H, W) in [0, 1]; params: (N, 6). ``mask`` defaults to
    ``foreground_mask(fg)``. Returns ``(out, cache)``.
    """
    fg = np.asarray(fg)
    n, h, w = fg.shape
    mask = foreground_mask(fg) if mask is None else mask
    mat = affine_to_matrix(params)
    grid, a_inv = make_grid(mat, h, w)
    warped, s_cache = bilinear_sample(fg, grid)
    warped_mask, m_cache = bilinear_sample(mask, grid)
    alpha, a_cache = clean_mask(warped_mask)
    out = alpha_blend(bg, warped, alpha).astype(fg.dtype)
    cache = (params, grid, a_inv, s_cache, m_cache, a_cache, warped, alpha, np.asarray(bg))
    return out, cache


def compose_backward(dout, cache, through_alpha=True):
    """d loss / d params (N, 6) for an upstream gradient ``dout`` (N, H, W)."""
    params, grid, a_inv, s_cache, m_cache, a_cache, warped, alpha, bg = cache
    dout = np.asarray(dout, np.float64)
    _, dgrid = bilinear_sample_backward(dout * alpha, s_cache)
    if through_alpha:
        dalpha = dout * (warped - bg)
        dmask = clean_mask_backward(dalpha, a_cache)
        _, dgrid_m = bilinear_sample_backward(dmask, m_cache)
        dgrid = dgrid + dgrid_m
    dmat = make_grid_backward(dgrid, grid, a_inv)
    return np.einsum("nkij,nij->nk", matrix_jacobian(params), dmat)


def warp(images, params=None, matrix=None):
    """Plain affine warp (no blending) of (N, H, W) images by params or matrices."""
    mat = affine_to_matrix(params) if matrix is None else matrix
    grid, _ = make_grid(mat, images.shape[1], images.shape[2])
    return bilinear_sample(images, grid)[0]


def support_inside_frame(images, params, margin=0.0):
    """True per sample if the forward-mapped ink bounding box stays in [-1, 1]^2."""
    images = np.asarray(images)
    n, h, w = images.shape
    mats = affine_to_matrix(params)
    ok = np.zeros(n, bool)
    q = lattice(h, w)
    for k in range(n):
        ys, xs = np.nonzero(images[k] > 0)
        if len(xs) == 0:
            ok[k] = True
            continue
        # pixel-footprint corners of the ink bounding box
        x_lo, x_hi = q[0, xs.min(), 0] - 1 / w, q[0, xs.max(), 0] + 1 / w
        y_lo, y_hi = q[ys.min(), 0, 1] - 1 / h, q[ys.max(), 0, 1] + 1 / h
        corners = np.array([[x_lo, y_lo], [x_hi, y_lo], [x_lo, y_hi], [x_hi, y_hi]])
        mapped = corners @ mats[k, :, :2].T + mats[k, :, 2]
        ok[k] = np.all(np.abs(mapped) <= 1 - margin)
    return ok


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    src_y = slice(max(-dy, 0), h + min(-dy, 0))
    src_x = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = img[src_y, src_x]
    return out


def valid_offsets(mask):
    """Inclusive (dy, dx) ranges keeping the mask's support inside the frame."""
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    h, w = np.shape(mask)
    if len(ys) == 0:
        return (0, 0), (0, 0)
    return (-ys.min(), h - 1 - ys.max()), (-xs.min(), w - 1 - xs.max())


def inject_blending_artifact(target_bg, donor_bg, mask, placement=None, seed=None):
    """Paste a mask-shaped region of ``donor_bg`` into ``target_bg``.

    The region is blended with the same cleaned, feathered alpha used for
    composites, so compositing edges appear in backgrounds too. ``placement``
    is a (dy, dx) shift applied to the mask; when omitted it is drawn
    uniformly over in-frame offsets from ``seed``.
    """
    target_bg = np.asarray(target_bg)
    mask = support(mask)
    (ylo, yhi), (xlo, xhi) = valid_offsets(mask)
    if placement is None:
        rng = keyed_rng(*np.atleast_1d(seed if seed is not None else 0))
        placement = (int(rng.integers(ylo, yhi + 1)), int(rng.integers(xlo, xhi + 1)))
    dy, dx = placement
    if not (ylo <= dy <= yhi and xlo <= dx <= xhi):
        raise ValueError(f"placement {placement} moves the mask out of frame "
                         f"(valid dy in [{ylo}, {yhi}], dx in [{xlo}, {xhi}])")
    alpha, _ = clean_mask(_shift(mask, dy, dx))
    return alpha_blend(target_bg, np.asarray(donor_bg), alpha).astype(target_bg.dtype)
