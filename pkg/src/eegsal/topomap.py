"""Electrode layouts, azimuthal projection and topographic rasterization."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, DataError, DimensionError

HEMISPHERES = ("L", "R", "M")
MARGIN = 0.05
IDW_POWER = 2
IDW_NEIGHBOURS = 4
EXACT_HIT = 1e-9
TIE_TOL = 1e-9


@dataclass(frozen=True)
class ElectrodeLayout:
    labels: tuple[str, ...]
    positions: np.ndarray  # n x 3 unit vectors, z toward the vertex
    regions: np.ndarray  # n region indices, dense 0..R-1
    hemispheres: tuple[str, ...]
    region_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64))
        object.__setattr__(self, "regions", np.asarray(self.regions, dtype=np.int64))
        object.__setattr__(self, "hemispheres", tuple(self.hemispheres))
        object.__setattr__(self, "region_names", tuple(self.region_names))
        n = len(self.labels)
        if n == 0:
            raise ConfigError("electrode layout is empty")
        if len(set(self.labels)) != n:
            raise DataError("electrode labels must be unique")
        if self.positions.shape != (n, 3) or self.regions.shape != (n,) or len(self.hemispheres) != n:
            raise DataError("layout fields disagree on electrode count")
        if any(h not in HEMISPHERES for h in self.hemispheres):
            raise DataError("hemisphere must be one of L, R, M")
        counts = np.bincount(self.regions)
        if self.regions.min() < 0 or np.any(counts == 0):
            raise DataError("region indices must be dense and every region non-empty")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_regions(self) -> int:
        return int(self.regions.max()) + 1

    def region_members(self) -> list[np.ndarray]:
        """Electrode indices of each region, in layout order."""
        return [np.flatnonzero(self.regions == r) for r in range(self.n_regions)]

    def index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    def mirrored(self) -> "ElectrodeLayout":
        """The layout reflected across the sagittal plane (x -> -x)."""
        flip = {"L": "R", "R": "L", "M": "M"}
        pos = self.positions * np.array([-1.0, 1.0, 1.0])
        return ElectrodeLayout(self.labels, pos, self.regions.copy(),
                               tuple(flip[h] for h in self.hemispheres), self.region_names)


@dataclass(frozen=True)
class TopoImage:
    values: np.ndarray  # bands x h x w
    mask: np.ndarray  # h x w bool, inside the head disc

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != self.mask.shape:
            raise DimensionError("image values must be bands x h x w matching the mask")


def azimuthal_project(layout: ElectrodeLayout, h: int = 32, w: int = 32) -> np.ndarray:
    """Pixel coordinates ``(row, col)`` of each electrode.

    Azimuthal equidistant map about the vertex, scaled so that the largest
    polar distance plus a 5% margin touches the inscribed image circle.
    Anterior points up (row 0), the subject's right is to the right.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    off = _offsets(layout, h, w)
    return np.column_stack([cy + off[:, 0], cx + off[:, 1]])


def _offsets(layout: ElectrodeLayout, h: int, w: int) -> np.ndarray:
    """Electrode positions relative to the image centre, in pixels."""
    if len(layout) == 0:
        raise ConfigError("electrode layout is empty")
    if h < 8 or w < 8:
        raise ConfigError("image extents must be >= 8")
    pos = layout.positions
    rho = np.arccos(np.clip(pos[:, 2], -1.0, 1.0))
    phi = np.arctan2(pos[:, 1], pos[:, 0])
    px, py = rho * np.cos(phi), rho * np.sin(phi)
    rmax = rho.max()
    radius = min(h - 1, w - 1) / 2.0
    scale = radius / ((1.0 + MARGIN) * rmax) if rmax > 0 else 0.0
    return np.column_stack([scale * -py, scale * px])


def head_mask(h: int, w: int) -> np.ndarray:
    radius = min(h - 1, w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return (rr - cy) ** 2 + (cc - cx) ** 2 <= radius ** 2 + 1e-9


class ProjectionGrid:
    """Precomputed pixel -> electrode interpolation weights for one (layout, h, w).

    Shared read-only once built.
    """

    def __init__(self, layout: ElectrodeLayout, h: int = 32, w: int = 32):
        self.layout = layout
        self.h, self.w = h, w
        self.coords = azimuthal_project(layout, h, w)
        self.mask = head_mask(h, w)
        n = len(layout)
        k = min(IDW_NEIGHBOURS, n)
        # centre-relative offsets keep mirrored distances bit-identical
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        rr, cc = np.mgrid[0:h, 0:w]
        pix = np.column_stack([rr.ravel(), cc.ravel()]) - centre
        elec = _offsets(layout, h, w)
        d = np.sqrt(((pix[:, None, :] - elec[None, :, :]) ** 2).sum(-1))
        weights = np.zeros((h * w, n))
        hit_pix, hit_elec = [], []
        inside = self.mask.ravel()
        for p in np.flatnonzero(inside):
            order = np.argsort(d[p], kind="stable")
            # electrodes tied with the k-th nearest all join, so the choice never depends on index order
            cut = d[p, order[k - 1]] + TIE_TOL
            order = order[d[p, order] <= cut]
            dd = d[p, order]
            if dd[0] <= EXACT_HIT:
                weights[p, order[0]] = 1.0
                hit_pix.append(p)
                hit_elec.append(order[0])
                continue
            wt = 1.0 / dd ** IDW_POWER
            weights[p, order] = wt / wt.sum()
        self.weights = weights
        self.hit_pixels = np.array(hit_pix, dtype=np.intp)
        self.hit_electrodes = np.array(hit_elec, dtype=np.intp)

    @cached_property
    def outside(self) -> np.ndarray:
        return ~self.mask.ravel()

    def rasterize_array(self, values: np.ndarray) -> np.ndarray:
        """``(..., n_channels, n_bands)`` -> ``(..., n_bands, h, w)``."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim < 2 or values.shape[-2] != len(self.layout):
            raise DataError(f"feature channel count {values.shape[-2] if values.ndim >= 2 else '?'}"
                            f" does not match layout size {len(self.layout)}")
        lead = values.shape[:-2]
        v = values.reshape(-1, *values.shape[-2:])  # N x C x B
        vmin = v.min(axis=1)  # N x B
        # offsetting by the minimum keeps constant inputs exactly constant
        flat = vmin[:, :, None] + np.einsum("pc,ncb->nbp", self.weights, v - vmin[:, None, :])
        flat[:, :, self.outside] = 0.0
        if self.hit_pixels.size:
            flat[:, :, self.hit_pixels] = v[:, self.hit_electrodes, :].transpose(0, 2, 1)
        return flat.reshape(*lead, v.shape[2], self.h, self.w)

    def saliency_array(self, saliency: np.ndarray) -> np.ndarray:
        """Max-normalize each sample's saliency and rasterize it.

        A sample whose saliency is identically zero maps to a uniform 1
        inside the head mask.
        """
        s = np.asarray(saliency, dtype=np.float64)
        single = s.ndim == 2
        if single:
            s = s[None]
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise DataError("saliency magnitudes must be finite and non-negative")
        peak = s.max(axis=(1, 2))
        scaled = np.where(peak[:, None, None] > 0, s / np.where(peak > 0, peak, 1.0)[:, None, None], 1.0)
        img = self.rasterize_array(scaled)
        return img[0] if single else img


_GRIDS: dict[tuple[int, int, int], ProjectionGrid] = {}


def projection_grid(layout: ElectrodeLayout, h: int = 32, w: int = 32) -> ProjectionGrid:
    key = (id(layout), h, w)
    grid = _GRIDS.get(key)
    if grid is None or grid.layout is not layout:
        grid = _GRIDS[key] = ProjectionGrid(layout, h, w)
    return grid


def rasterize(features: np.ndarray, layout: ElectrodeLayout, h: int = 32, w: int = 32) -> TopoImage:
    """IDW (power 2, 4 nearest) raster of an ``n_channels x n_bands`` feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DimensionError("features must be n_channels x n_bands")
    grid = projection_grid(layout, h, w)
    return TopoImage(grid.rasterize_array(features), grid.mask)


def saliency_to_image(saliency: np.ndarray, layout: ElectrodeLayout, h: int = 32, w: int = 32) -> TopoImage:
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.ndim != 2 or saliency.shape[0] != len(layout):
        raise DimensionError("saliency must be n_channels x n_bands matching the layout")
    grid = projection_grid(layout, h, w)
    return TopoImage(grid.saliency_array(saliency), grid.mask)


def apply_saliency(img: TopoImage, sal: TopoImage) -> TopoImage:
    if img.values.shape != sal.values.shape or not np.array_equal(img.mask, sal.mask):
        raise DimensionError("image and saliency image differ in shape or mask")
    return TopoImage(img.values * sal.values, img.mask)
