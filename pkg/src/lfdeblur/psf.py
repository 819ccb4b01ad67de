"""Light-field PSF bank.

A texture sample lights the main-lens blur disc on the microlens plane.  Each
microlens passes the part of that disc falling inside its own aperture and
re-images the main-lens aperture onto the sensor as a microlens blur disc.
For a thin-lens camera both steps are affine in the aperture coordinate, so
the light reaching the sensor through microlens ``c`` is uniform over

    disc(c)  ∩  image of cell(c)

where ``disc(c)`` is the image of the aperture and the second set is the
image of the microlens cell.  A pixel's weight is the area of that region
inside the pixel, divided by the total image area of the aperture (which
conserves flux per texture sample).  Areas are computed exactly: polygon
clipping for the cell/pixel part and a closed-form polygon/circle area.

Because the microlens array is periodic, only ``J^2 x D^2`` kernels are
stored: ``kernels[j, t]`` is the response of texture offset ``t`` in block 0
seen by view ``j`` as a function of block offset ``k``.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraConfig, LatticeSpec, decompose

__all__ = [
    "DegenerateKernelError",
    "PsfBank",
    "SupportOverflowError",
    "build_psf_bank",
    "camera_hash",
    "eval_psf",
    "load_bank",
    "project_kernel",
    "psf_weight",
    "save_bank",
]

log = logging.getLogger(__name__)

_MAGIC = b"LFPSFBK1"


class SupportOverflowError(ValueError):
    """The blur footprint does not fit in the requested kernel support."""

    def __init__(self, required: int, requested: int):
        super().__init__(
            f"PSF support needs radius {required} blocks, got {requested}")
        self.required = required
        self.requested = requested


class DegenerateKernelError(ValueError):
    pass


@dataclass(frozen=True)
class PsfBank:
    """Periodic LF PSF.

    ``kernels`` has shape ``(n_views, n_offsets, 2R+1, 2R+1)`` where views
    and texture offsets are flattened row-major and the last two axes hold
    block offsets ``-R..R``.
    """

    spec: LatticeSpec
    kernels: np.ndarray
    support_radius: int
    camera_hash: str = ""

    def __post_init__(self):
        K = 2 * self.support_radius + 1
        shape = (self.spec.n_views, self.spec.n_offsets, K, K)
        if self.kernels.shape != shape:
            raise ValueError(f"kernels shape {self.kernels.shape} != {shape}")
        self.kernels.setflags(write=False)

    def kernel(self, j, t) -> np.ndarray:
        J = self.spec.pixels_per_block
        D = self.spec.texture_units_per_block
        return self.kernels[j[0] * J[1] + j[1], t[0] * D[1] + t[1]]

    def with_spec(self, spec: LatticeSpec) -> "PsfBank":
        """Same kernels on a lattice with a different number of blocks."""
        if (spec.pixels_per_block != self.spec.pixels_per_block
                or spec.texture_units_per_block != self.spec.texture_units_per_block):
            raise ValueError("block geometry differs")
        return PsfBank(spec, self.kernels, self.support_radius, self.camera_hash)

    @classmethod
    def impulse(cls, spec: LatticeSpec) -> "PsfBank":
        """Pinhole-like bank: offset ``t`` lands on one pixel of its own block.

        When ``D <= J`` distinct offsets land on distinct pixels.
        """
        J = spec.pixels_per_block
        D = spec.texture_units_per_block
        kernels = np.zeros((spec.n_views, spec.n_offsets, 1, 1))
        for t0 in range(D[0]):
            for t1 in range(D[1]):
                j0 = int((t0 + 0.5) * J[0] / D[0])
                j1 = int((t1 + 0.5) * J[1] / D[1])
                kernels[j0 * J[1] + j1, t0 * D[1] + t1, 0, 0] = 1.0
        return cls(spec, kernels, 0, "impulse")

    def aggregate(self, factor: int) -> "PsfBank":
        """Bank for a texture grid coarsened by ``factor`` (sum of sub-kernels)."""
        D = self.spec.texture_units_per_block
        if D[0] % factor or D[1] % factor:
            raise ValueError(f"factor {factor} does not divide {D}")
        Dc = (D[0] // factor, D[1] // factor)
        k = self.kernels.reshape(self.spec.n_views, Dc[0], factor, Dc[1], factor,
                                 *self.kernels.shape[-2:])
        k = k.sum(axis=(2, 4)).reshape(self.spec.n_views, Dc[0] * Dc[1],
                                       *self.kernels.shape[-2:])
        spec = LatticeSpec(self.spec.layout, self.spec.pixels_per_block, Dc,
                           self.spec.blocks)
        return PsfBank(spec, np.ascontiguousarray(k), self.support_radius,
                       self.camera_hash)


# --------------------------------------------------------------------------
# geometric model


def _cell_polygon(spec: LatticeSpec, d: float) -> np.ndarray:
    """Microlens aperture, relative to its center, as (row, col) vertices."""
    if spec.layout == "rectangular":
        h = 0.5 * d
        return np.array([[-h, -h], [-h, h], [h, h], [h, -h]])
    a = d / math.sqrt(3.0)
    return np.array([[a, 0.0], [0.5 * a, 0.5 * d], [-0.5 * a, 0.5 * d],
                     [-a, 0.0], [-0.5 * a, -0.5 * d], [0.5 * a, -0.5 * d]])


def _period(spec: LatticeSpec, d: float) -> np.ndarray:
    if spec.layout == "rectangular":
        return np.array([d, d])
    return np.array([math.sqrt(3.0) * d, d])


class _Optics:
    """Ray-transfer constants of the thin-lens camera."""

    def __init__(self, camera: CameraConfig, spec: LatticeSpec):
        v = camera.lens_to_mla_distance
        vm = camera.mla_to_sensor_distance
        fm = camera.microlens_focal_length
        self.Ra = camera.aperture_radius
        self.kappa = 1.0 - v / camera.image_distance
        self.alpha = 1.0 + vm / v - vm / fm
        self.beta = vm / fm
        self.sigma = self.kappa * self.alpha - vm / v
        self.d = camera.microlens_spacing
        self.period = _period(spec, self.d)
        self.pitch = self.period * (1.0 + vm / v) / np.asarray(spec.pixels_per_block)
        self.tex_pitch = self.period / np.asarray(spec.texture_units_per_block)
        self.cell = _cell_polygon(spec, self.d)
        self.cell_radius = float(np.max(np.hypot(self.cell[:, 0], self.cell[:, 1])))
        self.centers = spec.microlens_centers() * self.period

    def sample_position(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) + 0.5) * self.tex_pitch

    def lenses_near(self, u: np.ndarray, radius: float):
        """Microlens centers whose cell may intersect the disc (u, radius)."""
        reach = radius + self.cell_radius
        lo = np.floor((u - reach) / self.period).astype(int) - 1
        hi = np.floor((u + reach) / self.period).astype(int) + 1
        out = []
        for b0 in range(lo[0], hi[0] + 1):
            for b1 in range(lo[1], hi[1] + 1):
                for c in self.centers:
                    cc = np.array([b0, b1]) * self.period + c
                    if np.hypot(*(cc - u)) <= reach:
                        out.append(cc)
        return out

    def owning_lens(self, u: np.ndarray) -> np.ndarray:
        best, arg = np.inf, None
        # hexagonal cells are Voronoi cells of the centers
        for cc in self.lenses_near(u, 0.0):
            dist = np.hypot(*(cc - u))
            if dist < best - 1e-15:
                best, arg = dist, cc
        return arg

    def footprints(self, u: np.ndarray):
        """Yield ``(disc_center, disc_radius, polygon)`` on the sensor (metres)."""
        R_img = abs(self.sigma) * self.Ra
        if self.Ra == 0.0 or abs(self.kappa) < 1e-15:
            c = self.owning_lens(u)
            yield u * self.alpha + c * self.beta, R_img, None
            return
        scale = self.sigma / self.kappa
        for c in self.lenses_near(u, abs(self.kappa) * self.Ra):
            x0 = u * self.alpha + c * self.beta
            poly = x0 + scale * (c + self.cell - u)
            yield x0, R_img, poly


def _clip_halfplane(poly, axis, bound, keep_greater):
    out = []
    n = len(poly)
    for i in range(n):
        P = poly[i]
        Q = poly[(i + 1) % n]
        pin = P[axis] >= bound if keep_greater else P[axis] <= bound
        qin = Q[axis] >= bound if keep_greater else Q[axis] <= bound
        if pin:
            out.append(P)
        if pin != qin:
            s = (bound - P[axis]) / (Q[axis] - P[axis])
            out.append((P[0] + s * (Q[0] - P[0]), P[1] + s * (Q[1] - P[1])))
    return out


def _clip_rect(poly, r0, r1, c0, c1):
    for axis, bound, greater in ((0, r0, True), (0, r1, False),
                                 (1, c0, True), (1, c1, False)):
        poly = _clip_halfplane(poly, axis, bound, greater)
        if len(poly) < 3:
            return []
    return poly


def _sector(u, v, r2):
    cross = u[0] * v[1] - u[1] * v[0]
    dot = u[0] * v[0] + u[1] * v[1]
    return 0.5 * r2 * math.atan2(cross, dot)


def _triangle_circle_area(a, b, r):
    """Signed area of triangle (origin, a, b) intersected with circle(0, r)."""
    r2 = r * r
    da = a[0] * a[0] + a[1] * a[1]
    db = b[0] * b[0] + b[1] * b[1]
    if da <= r2 and db <= r2:
        return 0.5 * (a[0] * b[1] - a[1] * b[0])
    dx, dy = b[0] - a[0], b[1] - a[1]
    A = dx * dx + dy * dy
    if A == 0.0:
        return 0.0
    B = a[0] * dx + a[1] * dy
    C = da - r2
    disc = B * B - A * C
    if disc <= 0.0:
        return _sector(a, b, r2)
    s = math.sqrt(disc)
    t1 = (-B - s) / A
    t2 = (-B + s) / A
    if t2 <= 0.0 or t1 >= 1.0:
        return _sector(a, b, r2)
    t1 = max(t1, 0.0)
    t2 = min(t2, 1.0)
    p1 = (a[0] + t1 * dx, a[1] + t1 * dy)
    p2 = (a[0] + t2 * dx, a[1] + t2 * dy)
    return (_sector(a, p1, r2) + 0.5 * (p1[0] * p2[1] - p1[1] * p2[0])
            + _sector(p2, b, r2))


def polygon_disc_area(poly, center, radius) -> float:
    """Exact area of a simple polygon intersected with a disc."""
    pts = [(p[0] - center[0], p[1] - center[1]) for p in poly]
    total = 0.0
    for i in range(len(pts)):
        total += _triangle_circle_area(pts[i], pts[(i + 1) % len(pts)], radius)
    return abs(total)


def _pixel_weights(optics: _Optics, u: np.ndarray) -> dict:
    """Sparse map ``pixel (row, col) -> weight`` for a source at ``u``."""
    pitch = optics.pitch
    weights: dict = {}
    for x0, R, poly in optics.footprints(u):
        if R == 0.0:
            pix = tuple(np.floor(x0 / pitch).astype(int))
            weights[pix] = weights.get(pix, 0.0) + 1.0
            continue
        total = math.pi * R * R
        if poly is None:
            lo, hi = x0 - R, x0 + R
            poly = [(lo[0], lo[1]), (lo[0], hi[1]), (hi[0], hi[1]), (hi[0], lo[1])]
        else:
            lo = np.maximum(poly.min(axis=0), x0 - R)
            hi = np.minimum(poly.max(axis=0), x0 + R)
            if np.any(lo >= hi):
                continue
            poly = [tuple(v) for v in poly]
        i_lo = np.floor(lo / pitch).astype(int)
        i_hi = np.floor(hi / pitch).astype(int)
        for i0 in range(i_lo[0], i_hi[0] + 1):
            r0, r1 = i0 * pitch[0], (i0 + 1) * pitch[0]
            dr = max(r0 - x0[0], 0.0, x0[0] - r1)
            for i1 in range(i_lo[1], i_hi[1] + 1):
                c0, c1 = i1 * pitch[1], (i1 + 1) * pitch[1]
                dc = max(c0 - x0[1], 0.0, x0[1] - c1)
                if dr * dr + dc * dc >= R * R:
                    continue  # pixel misses the disc
                piece = _clip_rect(poly, r0, r1, c0, c1)
                if not piece:
                    continue
                a = polygon_disc_area(piece, x0, R)
                if a > 0.0:
                    weights[(i0, i1)] = weights.get((i0, i1), 0.0) + a / total
    return weights


def psf_weight(camera: CameraConfig, spec: LatticeSpec, x, p) -> float:
    """Direct model evaluation of ``h(x, p)`` for any pixel and texture sample."""
    optics = _Optics(camera, spec)
    return _pixel_weights(optics, optics.sample_position(p)).get(tuple(map(int, x)), 0.0)


def camera_hash(camera: CameraConfig, spec: LatticeSpec) -> str:
    payload = json.dumps({
        "camera": camera.as_dict(),
        "layout": spec.layout,
        "pixels_per_block": list(spec.pixels_per_block),
        "texture_units_per_block": list(spec.texture_units_per_block),
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _offset_weights(args):
    camera, spec, t = args
    optics = _Optics(camera, spec)
    return t, _pixel_weights(optics, optics.sample_position(t))


def build_psf_bank(camera: CameraConfig, spec: LatticeSpec,
                   support_radius: int | None = None,
                   workers: int = 1) -> PsfBank:
    """Evaluate the geometric LF PSF for every texture offset in block 0.

    ``support_radius`` defaults to the smallest radius (in blocks) holding
    the whole footprint; a smaller explicit value raises
    :class:`SupportOverflowError`.
    """
    D = spec.texture_units_per_block
    J = spec.pixels_per_block
    offsets = [(t0, t1) for t0 in range(D[0]) for t1 in range(D[1])]
    jobs = [(camera, spec, t) for t in offsets]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_offset_weights, jobs))
    else:
        results = [_offset_weights(job) for job in jobs]

    required = 0
    for _, w in results:
        for (r, c) in w:
            required = max(required, abs(r // J[0]), abs(c // J[1]))
    if support_radius is None:
        support_radius = required
    elif support_radius < required:
        raise SupportOverflowError(required, support_radius)

    R = support_radius
    K = 2 * R + 1
    kernels = np.zeros((spec.n_views, spec.n_offsets, K, K))
    for (t0, t1), w in results:
        ti = t0 * D[1] + t1
        for (r, c), val in w.items():
            k0, j0 = divmod(r, J[0])
            k1, j1 = divmod(c, J[1])
            kernels[j0 * J[1] + j1, ti, k0 + R, k1 + R] += val
    log.debug("built PSF bank %s, support radius %d", kernels.shape, R)
    return PsfBank(spec, kernels, R, camera_hash(camera, spec))


def eval_psf(bank: PsfBank, x, p) -> float:
    """Dense PSF entry ``h(x, p)`` recovered through the periodic shift rule."""
    xi = decompose(x, bank.spec, "sensor")
    pi = decompose(p, bank.spec, "texture")
    k0 = xi.block[0] - pi.block[0]
    k1 = xi.block[1] - pi.block[1]
    R = bank.support_radius
    if abs(k0) > R or abs(k1) > R:
        return 0.0
    return float(bank.kernel(xi.offset, pi.offset)[k0 + R, k1 + R])


def project_kernel(k) -> np.ndarray:
    """Clamp negatives to zero, then rescale to unit sum."""
    k = np.maximum(np.asarray(k, dtype=float), 0.0)
    s = k.sum()
    if not s > 0.0:
        raise DegenerateKernelError("kernel has no positive weight")
    return k / s


# --------------------------------------------------------------------------
# bank file: magic, u32 header length, JSON header, little-endian float64 data


def save_bank(bank: PsfBank, path) -> None:
    header = {
        "layout": bank.spec.layout,
        "pixels_per_block": list(bank.spec.pixels_per_block),
        "texture_units_per_block": list(bank.spec.texture_units_per_block),
        "support_radius": bank.support_radius,
        "camera_hash": bank.camera_hash,
        "order": "view,offset,k_row,k_col",
    }
    raw = json.dumps(header).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(np.ascontiguousarray(bank.kernels, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_bank_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a PSF bank file")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_bank(path, blocks=(1, 1)) -> PsfBank:
    data = Path(path).read_bytes()
    if data[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a PSF bank file")
    (n,) = struct.unpack("<I", data[len(_MAGIC):len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    header = json.loads(data[start:start + n])
    spec = LatticeSpec(header["layout"], header["pixels_per_block"],
                       header["texture_units_per_block"], blocks)
    K = 2 * header["support_radius"] + 1
    kernels = np.frombuffer(data[start + n:], dtype="<f8").astype(float)
    kernels = kernels.reshape(spec.n_views, spec.n_offsets, K, K)
    return PsfBank(spec, kernels, header["support_radius"], header["camera_hash"])
