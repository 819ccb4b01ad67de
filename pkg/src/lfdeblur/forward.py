"""Motion-blurred light-field image formation and its adjoint.

The model for patch ``i`` is

    l_i = M * W(H(R(U(h_i * f)))) / white

with ``h_i * f`` the motion blur on the texture grid, ``U`` an optional
nearest-neighbour upsampling (coarse pyramid levels), ``R`` radial
distortion, ``H`` the LF PSF, ``W`` the affine alignment to the raw grid,
``white`` the white-image gain and ``M`` the validity mask.  Patches are
blended with overlap weights that sum to one.  All resampling steps are
explicit sparse matrices, so every adjoint is an exact transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from scipy.signal import fftconvolve

from .geometry import LatticeSpec, microlens_labels
from .psf import PsfBank

__all__ = [
    "CorrectionSet",
    "ForwardModel",
    "LightFieldRenderer",
    "PatchLayout",
    "PlanarModel",
    "SingularWarpError",
    "apply_radial",
    "apply_warp",
    "build_mask",
    "forward_full",
    "forward_full_adjoint",
    "motion_convolve",
    "motion_convolve_adjoint",
    "motion_kernel_adjoint",
    "normalize_white",
    "render_lf",
    "render_lf_adjoint",
]


class SingularWarpError(ValueError):
    pass


# --------------------------------------------------------------------------
# symmetric padding as an index map


def _mirror(n: int, lo: int, hi: int) -> np.ndarray:
    i = np.arange(-lo, n + hi) % (2 * n)
    return np.where(i < n, i, 2 * n - 1 - i)


def sym_pad(x: np.ndarray, widths) -> np.ndarray:
    (a, b), (c, d) = widths
    return x[np.ix_(_mirror(x.shape[0], a, b), _mirror(x.shape[1], c, d))]


def sym_pad_adjoint(y: np.ndarray, shape, widths) -> np.ndarray:
    (a, b), (c, d) = widths
    ri = _mirror(shape[0], a, b)
    ci = _mirror(shape[1], c, d)
    tmp = np.zeros((shape[0], y.shape[1]), dtype=y.dtype)
    np.add.at(tmp, ri, y)
    out = np.zeros(shape, dtype=y.dtype)
    np.add.at(out.T, ci, tmp.T)
    return out


# --------------------------------------------------------------------------
# motion blur on the texture grid


def _half(h):
    if h.shape[0] % 2 == 0 or h.shape[1] % 2 == 0:
        raise ValueError(f"motion kernel extent must be odd, got {h.shape}")
    return h.shape[0] // 2, h.shape[1] // 2


def motion_convolve(f: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``g(p) = sum_q h(q) f(p - q)`` with mirrored borders."""
    a, b = _half(h)
    fp = sym_pad(f, ((a, a), (b, b)))
    return fftconvolve(fp, h, mode="valid")


def motion_convolve_adjoint(s: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`motion_convolve` with respect to the texture."""
    a, b = _half(h)
    full = fftconvolve(s, h[::-1, ::-1], mode="full")
    return sym_pad_adjoint(full, s.shape, ((a, a), (b, b)))


def motion_kernel_adjoint(s: np.ndarray, f: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`motion_convolve` with respect to the kernel."""
    a, b = shape[0] // 2, shape[1] // 2
    fp = sym_pad(f, ((a, a), (b, b)))
    return fftconvolve(fp, s[::-1, ::-1], mode="valid")[::-1, ::-1]


# --------------------------------------------------------------------------
# LF rendering as J^2 x D^2 small convolutions


class LightFieldRenderer:
    """Convolutional LF rendering for a fixed bank and lattice.

    The texture is mirrored by ``R`` blocks on each side, split into its
    ``D^2`` offset planes and convolved with the bank in the Fourier domain;
    the ``J^2`` view planes are then interleaved back into the sensor raster.
    """

    def __init__(self, bank: PsfBank, workers: int | None = None):
        self.bank = bank
        self.spec = bank.spec
        self.workers = workers
        R = bank.support_radius
        nb = self.spec.blocks
        self.fft_shape = (nb[0] + 2 * R, nb[1] + 2 * R)
        self.kf = sfft.rfft2(bank.kernels, s=self.fft_shape, workers=workers)

    def _check(self, arr, extent, what):
        if arr.shape != tuple(extent):
            raise ValueError(f"{what} extent {arr.shape} != {tuple(extent)}")

    def render(self, g: np.ndarray) -> np.ndarray:
        spec = self.spec
        self._check(g, spec.texture_extent, "texture")
        R = self.bank.support_radius
        D = spec.texture_units_per_block
        J = spec.pixels_per_block
        nb = spec.blocks
        n0, n1 = self.fft_shape
        gp = sym_pad(g, ((R * D[0], R * D[0]), (R * D[1], R * D[1])))
        planes = gp.reshape(n0, D[0], n1, D[1]).transpose(1, 3, 0, 2)
        planes = planes.reshape(spec.n_offsets, n0, n1)
        gf = sfft.rfft2(planes, workers=self.workers)
        lf = np.einsum("jtuv,tuv->juv", self.kf, gf)
        views = sfft.irfft2(lf, s=self.fft_shape, workers=self.workers)
        views = views[:, 2 * R:2 * R + nb[0], 2 * R:2 * R + nb[1]]
        views = views.reshape(J[0], J[1], nb[0], nb[1])
        return views.transpose(2, 0, 3, 1).reshape(spec.sensor_extent)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        spec = self.spec
        self._check(r, spec.sensor_extent, "LF image")
        R = self.bank.support_radius
        D = spec.texture_units_per_block
        J = spec.pixels_per_block
        nb = spec.blocks
        n0, n1 = self.fft_shape
        views = r.reshape(nb[0], J[0], nb[1], J[1]).transpose(1, 3, 0, 2)
        emb = np.zeros((spec.n_views, n0, n1))
        emb[:, 2 * R:2 * R + nb[0], 2 * R:2 * R + nb[1]] = \
            views.reshape(spec.n_views, nb[0], nb[1])
        ef = sfft.rfft2(emb, workers=self.workers)
        pf = np.einsum("jtuv,juv->tuv", self.kf.conj(), ef)
        planes = sfft.irfft2(pf, s=self.fft_shape, workers=self.workers)
        gp = planes.reshape(D[0], D[1], n0, n1).transpose(2, 0, 3, 1)
        gp = gp.reshape(n0 * D[0], n1 * D[1])
        return sym_pad_adjoint(gp, spec.texture_extent,
                               ((R * D[0], R * D[0]), (R * D[1], R * D[1])))


def render_lf(g: np.ndarray, bank: PsfBank) -> np.ndarray:
    """Render texture ``g`` into an LF image (bank lattice sets the extents)."""
    return LightFieldRenderer(bank).render(g)


def render_lf_adjoint(residual: np.ndarray, bank: PsfBank) -> np.ndarray:
    return LightFieldRenderer(bank).adjoint(residual)


# --------------------------------------------------------------------------
# bilinear resampling


def bilinear_matrix(src_shape, coords: np.ndarray):
    """Sparse bilinear interpolation of a ``src_shape`` raster at ``coords``.

    ``coords`` is ``(N, 2)`` in (row, col) pixel units.  Rows of the matrix
    for coordinates outside the source are empty and flagged invalid.
    """
    n0, n1 = src_shape
    r = coords[:, 0]
    c = coords[:, 1]
    tol = 1e-9
    valid = (r >= -tol) & (r <= n0 - 1 + tol) & (c >= -tol) & (c <= n1 - 1 + tol)
    r = np.clip(r, 0, n0 - 1)
    c = np.clip(c, 0, n1 - 1)
    r0 = np.clip(np.floor(r).astype(int), 0, max(n0 - 2, 0))
    c0 = np.clip(np.floor(c).astype(int), 0, max(n1 - 2, 0))
    wr = r - r0
    wc = c - c0
    r1 = np.minimum(r0 + 1, n0 - 1)
    c1 = np.minimum(c0 + 1, n1 - 1)
    rows = np.repeat(np.arange(len(coords)), 4)
    cols = np.stack([r0 * n1 + c0, r0 * n1 + c1, r1 * n1 + c0, r1 * n1 + c1], 1)
    vals = np.stack([(1 - wr) * (1 - wc), (1 - wr) * wc, wr * (1 - wc), wr * wc], 1)
    vals = vals * valid[:, None]
    m = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())),
                      shape=(len(coords), n0 * n1))
    m.sum_duplicates()
    m.eliminate_zeros()
    return m, valid


def _grid(shape):
    rr, cc = np.meshgrid(np.arange(shape[0], dtype=float),
                         np.arange(shape[1], dtype=float), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], 1)


def warp_matrix(warp, src_shape, out_shape=None, direction="forward"):
    """Sparse matrix for :func:`apply_warp` plus the output validity mask.

    ``warp`` is a 2x3 affine map ``y = A x + b`` from model (row, col) to
    raw (row, col).  ``forward`` resamples a model image onto the raw grid,
    ``inverse`` resamples a raw image onto the model grid.
    """
    warp = np.asarray(warp, dtype=float).reshape(2, 3)
    A, b = warp[:, :2], warp[:, 2]
    if abs(np.linalg.det(A)) < 1e-12:
        raise SingularWarpError("affine warp is not invertible")
    out_shape = tuple(src_shape if out_shape is None else out_shape)
    y = _grid(out_shape)
    if direction == "forward":
        src = (y - b) @ np.linalg.inv(A).T
    elif direction == "inverse":
        src = y @ A.T + b
    else:
        raise ValueError(f"unknown direction {direction!r}")
    m, valid = bilinear_matrix(src_shape, src)
    return m, valid.reshape(out_shape)


def apply_warp(img, warp, direction="forward", out_shape=None, return_valid=False):
    m, valid = warp_matrix(warp, img.shape, out_shape, direction)
    out = (m @ img.ravel()).reshape(valid.shape)
    return (out, valid) if return_valid else out


def _radial_inverse(rd, k1, k2, iters=30):
    """Solve ``r (1 + k1 r^2 + k2 r^4) = rd`` by Newton's method.

    Radii with no preimage on the increasing branch of the polynomial
    come back as NaN.
    """
    r = rd.copy()
    for _ in range(iters):
        r2 = r * r
        fval = r * (1 + k1 * r2 + k2 * r2 * r2) - rd
        fp = 1 + 3 * k1 * r2 + 5 * k2 * r2 * r2
        r = r - fval / np.where(np.abs(fp) < 1e-12, 1e-12, fp)
    r2 = r * r
    ok = (np.abs(r * (1 + k1 * r2 + k2 * r2 * r2) - rd) < 1e-9 * np.maximum(rd, 1.0)) \
        & (1 + 3 * k1 * r2 + 5 * k2 * r2 * r2 > 0) & (r >= 0)
    return np.where(ok, r, np.nan)


def radial_matrix(shape, center, k1, k2, scale=None, direction="forward"):
    """Sparse bilinear matrix of the radial polynomial remap on a raster."""
    center = np.asarray(center, dtype=float)
    if scale is None:
        scale = 0.5 * max(shape)
    p = _grid(shape)
    d = (p - center) / scale
    r = np.hypot(d[:, 0], d[:, 1])
    if direction == "forward":
        factor = 1 + k1 * r ** 2 + k2 * r ** 4
    elif direction == "inverse":
        ru = _radial_inverse(r, k1, k2)
        factor = np.divide(ru, r, out=np.ones_like(r), where=r > 0)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    src = center + d * factor[:, None] * scale
    # unreachable radii sample nothing and are flagged invalid
    src = np.where(np.isfinite(src), src, -1.0)
    return bilinear_matrix(shape, src)


def apply_radial(g, correction: "CorrectionSet", direction="forward"):
    """Radially distort (``forward``) or undistort a texture raster."""
    if correction.kappa1 == 0 and correction.kappa2 == 0:
        return g.copy()
    m, _ = radial_matrix(g.shape, correction.radial_center_for(g.shape),
                         correction.kappa1, correction.kappa2,
                         correction.radial_scale_for(g.shape), direction)
    return (m @ g.ravel()).reshape(g.shape)


# --------------------------------------------------------------------------
# real-camera corrections


@dataclass
class CorrectionSet:
    """Warp, radial distortion, mask and white gain.  ``None`` means identity."""

    warp: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    radial_center: tuple | None = None
    kappa1: float = 0.0
    kappa2: float = 0.0
    radial_scale: float | None = None
    mask: np.ndarray | None = None
    white: np.ndarray | None = None
    raw_shape: tuple | None = None

    def __post_init__(self):
        self.warp = np.asarray(self.warp, dtype=float).reshape(2, 3)
        if abs(np.linalg.det(self.warp[:, :2])) < 1e-12:
            raise SingularWarpError("affine warp is not invertible")
        if not (math.isfinite(self.kappa1) and math.isfinite(self.kappa2)):
            raise ValueError("radial coefficients must be finite")
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
        if self.white is not None and self.mask is not None:
            if np.any(self.white[self.mask] <= 0):
                raise ValueError("white must be positive where mask is set")

    @property
    def warp_is_identity(self) -> bool:
        return np.array_equal(self.warp, np.array([[1.0, 0, 0], [0, 1.0, 0]]))

    @property
    def has_radial(self) -> bool:
        return self.kappa1 != 0 or self.kappa2 != 0

    def radial_center_for(self, shape):
        if self.radial_center is not None:
            return self.radial_center
        return ((shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0)

    def radial_scale_for(self, shape):
        return self.radial_scale if self.radial_scale is not None else 0.5 * max(shape)

    def raw_shape_for(self, model_shape):
        if self.raw_shape is not None:
            return tuple(self.raw_shape)
        if self.mask is not None:
            return self.mask.shape
        if self.white is not None:
            return self.white.shape
        return tuple(model_shape)

    def with_(self, **kw) -> "CorrectionSet":
        return replace(self, **kw)


def build_mask(white, dark=None, threshold=0.2, hot_level=0.1, spec: LatticeSpec | None = None,
               border=True):
    """Validity mask from a white image, a dark frame and the microlens layout.

    Masked: pixels below ``threshold * max(white)`` (vignetting), pixels
    brighter than ``hot_level`` in the dark frame (hot pixels) and, when
    ``spec`` is given, the one-pixel ring at the edge of every microlens.
    """
    white = np.asarray(white, dtype=float)
    mask = white >= threshold * white.max()
    if dark is not None:
        mask &= ~(np.asarray(dark, dtype=float) > hot_level)
    if border and spec is not None:
        labels = microlens_labels(spec.with_blocks(
            (white.shape[0] // spec.pixels_per_block[0],
             white.shape[1] // spec.pixels_per_block[1])))
        lab = np.full(white.shape, -1, dtype=np.int64)
        lab[:labels.shape[0], :labels.shape[1]] = labels
        padded = np.pad(lab, 1, constant_values=-2)
        ring = np.zeros(white.shape, dtype=bool)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nb = padded[1 + dr:1 + dr + white.shape[0], 1 + dc:1 + dc + white.shape[1]]
            ring |= nb != lab
        mask &= ~ring
    return mask


def normalize_white(raw, white, mask):
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(np.asarray(raw, dtype=float))
    out[mask] = raw[mask] / white[mask]
    return out


# --------------------------------------------------------------------------
# patches


@dataclass
class PatchLayout:
    """Overlapping patches with raised-cosine blending weights.

    Windows are defined on normalized [0, 1] coordinates so the same layout
    can be evaluated on the sensor or the texture grid.
    """

    grid: tuple = (2, 3)
    overlap: float = 0.5

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1]

    def neighbors(self, i: int) -> list[int]:
        r, c = divmod(i, self.grid[1])
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < self.grid[0] and 0 <= cc < self.grid[1]:
                out.append(rr * self.grid[1] + cc)
        return out

    def _axis_windows(self, n_patch, length):
        u = (np.arange(length) + 0.5) / length
        if n_patch == 1:
            return np.ones((1, length))
        half = 0.5 * (1 + self.overlap) / n_patch
        out = []
        for i in range(n_patch):
            c = (i + 0.5) / n_patch
            d = np.abs(u - c) / half
            out.append(np.where(d < 1, np.cos(0.5 * np.pi * d) ** 2, 0.0))
        # the outermost windows extend flat to the borders
        out[0] = np.where(u < 0.5 / n_patch, 1.0, out[0])
        out[-1] = np.where(u > 1 - 0.5 / n_patch, 1.0, out[-1])
        return np.array(out)

    def weights(self, shape) -> np.ndarray:
        """``(count, *shape)`` blending weights summing to one per pixel."""
        wr = self._axis_windows(self.grid[0], shape[0])
        wc = self._axis_windows(self.grid[1], shape[1])
        w = wr[:, None, :, None] * wc[None, :, None, :]
        w = w.reshape(self.count, *shape)
        return w / w.sum(axis=0, keepdims=True)

    def masks(self, shape) -> np.ndarray:
        return self.weights(shape) > 0


# --------------------------------------------------------------------------
# full chain


class ForwardModel:
    """Linear observation chain ``texture -> raw LF`` for fixed corrections.

    ``upsample`` > 1 makes the model act on a texture that is coarser by
    that factor (nearest-neighbour replication onto the bank's grid).
    """

    def __init__(self, bank: PsfBank, corrections: CorrectionSet | None = None,
                 patches: PatchLayout | None = None, upsample: int = 1,
                 workers: int | None = None):
        self.bank = bank
        self.corrections = corrections or CorrectionSet()
        self.patches = patches or PatchLayout((1, 1))
        self.upsample = int(upsample)
        self.renderer = LightFieldRenderer(bank, workers)
        spec = bank.spec
        self.model_shape = spec.sensor_extent
        self.fine_texture_shape = spec.texture_extent
        if any(n % self.upsample for n in self.fine_texture_shape):
            raise ValueError("texture extent not divisible by upsampling factor")
        self.texture_shape = tuple(n // self.upsample for n in self.fine_texture_shape)
        c = self.corrections
        self.raw_shape = c.raw_shape_for(self.model_shape)

        self.W = None
        valid = np.ones(self.raw_shape, dtype=bool)
        if not c.warp_is_identity or self.raw_shape != tuple(self.model_shape):
            self.W, valid = warp_matrix(c.warp, self.model_shape, self.raw_shape)
            self.WT = self.W.T.tocsr()
        self.R = None
        if c.has_radial:
            shape = self.fine_texture_shape
            self.R, _ = radial_matrix(shape, c.radial_center_for(shape), c.kappa1,
                                      c.kappa2, c.radial_scale_for(shape))
            self.RT = self.R.T.tocsr()
        mask = valid if c.mask is None else (c.mask & valid)
        if c.white is not None:
            gain = np.zeros(self.raw_shape)
            pos = c.white > 0
            gain[pos] = 1.0 / c.white[pos]
            mask = mask & pos
        else:
            gain = None
        self.mask = mask
        self.gain = gain
        self.patch_weights = self.patches.weights(self.raw_shape)
        # mask folded into the weights: only weighted residuals are ever used
        self.residual_weights = self.patch_weights * self.mask

    # single-kernel observation of a blurred texture g ------------------------

    def observe(self, g: np.ndarray) -> np.ndarray:
        """``W H R U g / white`` on the raw grid (no mask)."""
        if self.upsample > 1:
            g = np.repeat(np.repeat(g, self.upsample, 0), self.upsample, 1)
        if self.R is not None:
            g = (self.R @ g.ravel()).reshape(g.shape)
        out = self.renderer.render(g)
        if self.W is not None:
            out = (self.W @ out.ravel()).reshape(self.raw_shape)
        if self.gain is not None:
            out = out * self.gain
        return out

    def observe_adjoint(self, r: np.ndarray) -> np.ndarray:
        if self.gain is not None:
            r = r * self.gain
        if self.W is not None:
            r = (self.WT @ r.ravel()).reshape(self.model_shape)
        g = self.renderer.adjoint(r)
        if self.R is not None:
            g = (self.RT @ g.ravel()).reshape(g.shape)
        if self.upsample > 1:
            s = self.upsample
            g = g.reshape(g.shape[0] // s, s, g.shape[1] // s, s).sum(axis=(1, 3))
        return g

    # patch-blended chain ----------------------------------------------------

    def apply(self, f: np.ndarray, kernels) -> np.ndarray:
        kernels = _as_kernel_list(kernels, self.patches.count)
        out = np.zeros(self.raw_shape)
        for w, h in zip(self.patch_weights, kernels):
            out += w * self.observe(motion_convolve(f, h))
        return out * self.mask

    def adjoint(self, r: np.ndarray, kernels) -> np.ndarray:
        kernels = _as_kernel_list(kernels, self.patches.count)
        out = np.zeros(self.texture_shape)
        rm = r * self.mask
        for w, h in zip(self.patch_weights, kernels):
            out += motion_convolve_adjoint(self.observe_adjoint(w * rm), h)
        return out

    def coarsen(self, factor: int) -> "ForwardModel":
        return ForwardModel(self.bank, self.corrections, self.patches,
                            self.upsample * factor, self.renderer.workers)


def _as_kernel_list(kernels, count):
    if isinstance(kernels, np.ndarray) and kernels.ndim == 2:
        kernels = [kernels] * count
    kernels = list(kernels)
    if len(kernels) != count:
        raise ValueError(f"expected {count} kernels, got {len(kernels)}")
    return kernels


def forward_full(f, kernels, bank, corrections=None, patches=None):
    """Masked, patch-blended model image of texture ``f``."""
    return ForwardModel(bank, corrections, patches).apply(f, kernels)


def forward_full_adjoint(r, kernels, bank, corrections=None, patches=None):
    return ForwardModel(bank, corrections, patches).adjoint(r, kernels)


class PlanarModel:
    """Conventional-camera counterpart of :class:`ForwardModel`: the blurred
    texture is observed directly.  Used by the two-step baseline."""

    def __init__(self, shape, patches: PatchLayout | None = None, upsample: int = 1):
        self.fine_texture_shape = tuple(shape)
        self.patches = patches or PatchLayout((1, 1))
        self.upsample = int(upsample)
        if any(n % self.upsample for n in self.fine_texture_shape):
            raise ValueError("texture extent not divisible by upsampling factor")
        self.texture_shape = tuple(n // self.upsample for n in shape)
        self.raw_shape = self.fine_texture_shape
        self.mask = np.ones(self.raw_shape, dtype=bool)
        self.patch_weights = self.patches.weights(self.raw_shape)
        self.residual_weights = self.patch_weights

    def observe(self, g):
        s = self.upsample
        return g if s == 1 else np.repeat(np.repeat(g, s, 0), s, 1)

    def observe_adjoint(self, r):
        s = self.upsample
        if s == 1:
            return r
        return r.reshape(r.shape[0] // s, s, r.shape[1] // s, s).sum(axis=(1, 3))

    apply = ForwardModel.apply
    adjoint = ForwardModel.adjoint

    def coarsen(self, factor: int) -> "PlanarModel":
        return PlanarModel(self.fine_texture_shape, self.patches, self.upsample * factor)
