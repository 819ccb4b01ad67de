"""Sensor / microlens / texture grid geometry.

Sensor pixels are addressed as ``x = k * J + j`` and texture samples as
``p = b * D + t``, where ``k``/``b`` index a block and ``j``/``t`` the offset
inside it.  A hexagonal microlens array is handled by choosing a rectangular
super-block of ``Q' x Q`` pixels that holds two staggered microlens rows, so
code outside this module only ever sees rectangular blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

__all__ = [
    "BlockIndex",
    "CameraConfig",
    "LatticeSpec",
    "compose",
    "decompose",
    "microlens_labels",
]

Layout = Literal["rectangular", "hexagonal"]
Domain = Literal["sensor", "texture"]


def _pair(value) -> tuple[int, int]:
    if np.isscalar(value):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


@dataclass(frozen=True)
class LatticeSpec:
    """Block geometry shared by the sensor and texture grids.

    All pairs are ``(rows, cols)``.  For a hexagonal array
    ``pixels_per_block = (Q', Q)`` and ``texture_units_per_block = (B', B)``.

    ``sensor_extent`` and ``texture_extent`` default to ``blocks`` whole
    blocks; partial border blocks are not represented.
    """

    layout: Layout
    pixels_per_block: tuple[int, int]
    texture_units_per_block: tuple[int, int]
    blocks: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "pixels_per_block", _pair(self.pixels_per_block))
        object.__setattr__(
            self, "texture_units_per_block", _pair(self.texture_units_per_block)
        )
        object.__setattr__(self, "blocks", _pair(self.blocks))
        if self.layout not in ("rectangular", "hexagonal"):
            raise ValueError(f"unknown layout {self.layout!r}")
        for name in ("pixels_per_block", "texture_units_per_block", "blocks"):
            if min(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def rectangular(cls, J: int, D: int, blocks=(1, 1)) -> "LatticeSpec":
        return cls("rectangular", (J, J), (D, D), blocks)

    @classmethod
    def hexagonal(cls, Q: int, Q_prime: int, B: int, B_prime: int, blocks=(1, 1)):
        return cls("hexagonal", (Q_prime, Q), (B_prime, B), blocks)

    @classmethod
    def from_extents(cls, layout, pixels_per_block, texture_units_per_block,
                     sensor_extent=None, texture_extent=None) -> "LatticeSpec":
        """Build a spec from raster extents, clipping to whole blocks."""
        J = _pair(pixels_per_block)
        D = _pair(texture_units_per_block)
        counts = []
        if sensor_extent is not None:
            s = _pair(sensor_extent)
            counts.append((s[0] // J[0], s[1] // J[1]))
        if texture_extent is not None:
            t = _pair(texture_extent)
            counts.append((t[0] // D[0], t[1] // D[1]))
        if not counts:
            raise ValueError("need sensor_extent or texture_extent")
        blocks = (min(c[0] for c in counts), min(c[1] for c in counts))
        return cls(layout, J, D, blocks)

    def with_blocks(self, blocks) -> "LatticeSpec":
        return LatticeSpec(self.layout, self.pixels_per_block,
                           self.texture_units_per_block, blocks)

    @property
    def sensor_extent(self) -> tuple[int, int]:
        return (self.blocks[0] * self.pixels_per_block[0],
                self.blocks[1] * self.pixels_per_block[1])

    @property
    def texture_extent(self) -> tuple[int, int]:
        return (self.blocks[0] * self.texture_units_per_block[0],
                self.blocks[1] * self.texture_units_per_block[1])

    @property
    def n_views(self) -> int:
        return self.pixels_per_block[0] * self.pixels_per_block[1]

    @property
    def n_offsets(self) -> int:
        return self.texture_units_per_block[0] * self.texture_units_per_block[1]

    def block_dims(self, domain: Domain) -> tuple[int, int]:
        if domain == "sensor":
            return self.pixels_per_block
        if domain == "texture":
            return self.texture_units_per_block
        raise ValueError(f"unknown domain {domain!r}")

    def microlens_centers(self) -> np.ndarray:
        """Microlens centers inside one block, in units of the block period."""
        if self.layout == "rectangular":
            return np.array([[0.5, 0.5]])
        return np.array([[0.25, 0.25], [0.75, 0.75]])


@dataclass(frozen=True)
class BlockIndex:
    block: tuple[int, int]
    offset: tuple[int, int]


def decompose(coord, spec: LatticeSpec, domain: Domain = "sensor") -> BlockIndex:
    """Split a coordinate into ``(block, offset)`` using floor division."""
    dims = spec.block_dims(domain)
    c = _pair(coord)
    q0, r0 = divmod(c[0], dims[0])
    q1, r1 = divmod(c[1], dims[1])
    return BlockIndex((q0, q1), (r0, r1))


def compose(idx: BlockIndex, spec: LatticeSpec, domain: Domain = "sensor"):
    dims = spec.block_dims(domain)
    for o, d in zip(idx.offset, dims):
        if not 0 <= o < d:
            raise ValueError(f"offset {idx.offset} outside block {dims}")
    return (idx.block[0] * dims[0] + idx.offset[0],
            idx.block[1] * dims[1] + idx.offset[1])


def microlens_labels(spec: LatticeSpec) -> np.ndarray:
    """Label every sensor pixel with the microlens whose center is nearest.

    Distances are measured in block-period units per axis, which is the
    metric under which the hexagonal cells are regular.
    """
    P = np.asarray(spec.pixels_per_block, dtype=float)
    rows, cols = spec.sensor_extent
    r = (np.arange(rows) + 0.5) / P[0]
    c = (np.arange(cols) + 0.5) / P[1]
    rr, cc = np.meshgrid(r, c, indexing="ij")
    # physical aspect of one block: hexagonal period is sqrt(3) taller than wide
    aspect = math.sqrt(3.0) if spec.layout == "hexagonal" else 1.0
    best = np.full(rr.shape, np.inf)
    labels = np.zeros(rr.shape, dtype=np.int64)
    n_per_block = len(spec.microlens_centers())
    ncols = spec.blocks[1] + 2
    for b0 in range(-1, spec.blocks[0] + 1):
        for b1 in range(-1, spec.blocks[1] + 1):
            for m, (c0, c1) in enumerate(spec.microlens_centers()):
                d2 = ((rr - b0 - c0) * aspect) ** 2 + (cc - b1 - c1) ** 2
                lab = ((b0 + 1) * ncols + (b1 + 1)) * n_per_block + m
                closer = d2 < best - 1e-12
                best = np.where(closer, d2, best)
                labels = np.where(closer, lab, labels)
    return labels


@dataclass(frozen=True)
class CameraConfig:
    """Thin-lens plenoptic camera.  Lengths in metres.

    ``pixel_size`` is the physical sensor pitch; the model itself uses the
    pitch implied by the lattice (microlens image pitch divided by pixels per
    block) so that the block periodicity is exact.
    """

    main_lens_focal_length: float
    f_number: float
    pixel_size: float
    microlens_spacing: float
    lens_to_mla_distance: float
    mla_to_sensor_distance: float
    microlens_focal_length: float
    scene_depth: float
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        for name in ("main_lens_focal_length", "pixel_size", "microlens_spacing",
                     "lens_to_mla_distance", "mla_to_sensor_distance",
                     "microlens_focal_length", "scene_depth"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a positive length, got {v!r}")
        if not self.f_number > 0:
            raise ValueError(f"f_number must be > 0, got {self.f_number!r}")
        if self.scene_depth <= self.main_lens_focal_length:
            raise ValueError("scene_depth must exceed the main lens focal length")

    @classmethod
    def table1(cls, scene_depth: float = 3.0, **overrides) -> "CameraConfig":
        """Lytro-Illum-like parameters used for the synthetic experiments."""
        params = dict(
            main_lens_focal_length=0.0095,
            f_number=2.049,
            pixel_size=1.4e-6,
            microlens_spacing=20e-6,
            lens_to_mla_distance=9.8e-3,
            mla_to_sensor_distance=47.8e-6,
            microlens_focal_length=48.0e-6,
            scene_depth=scene_depth,
        )
        params.update(overrides)
        return cls(**params)

    @property
    def aperture_radius(self) -> float:
        return 0.5 * self.main_lens_focal_length / self.f_number

    @property
    def image_distance(self) -> float:
        """Distance behind the main lens where the scene plane is in focus."""
        F, z = self.main_lens_focal_length, self.scene_depth
        return F * z / (z - F)

    def as_dict(self) -> dict:
        return {
            "main_lens_focal_length": self.main_lens_focal_length,
            "f_number": self.f_number,
            "pixel_size": self.pixel_size,
            "microlens_spacing": self.microlens_spacing,
            "lens_to_mla_distance": self.lens_to_mla_distance,
            "mla_to_sensor_distance": self.mla_to_sensor_distance,
            "microlens_focal_length": self.microlens_focal_length,
            "scene_depth": self.scene_depth,
        }
