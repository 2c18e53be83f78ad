"""Anatomy-anchored mass-spring-damper model construction.

A uniform grid over the tool-aligned ROI becomes the sound model: each node
gets a tissue label by weighted majority vote over its support pixels, then
mass/stiffness/damping from a per-label parameter table.  Node rest
positions are parameterized relative to the fitted layer curves (normalized
depth rho inside the retina, signed boundary offset delta outside), so the
lattice follows tissue deformation while the relative parameters stay
frozen.  Springs couple grid neighbors with endpoint-averaged stiffness and
damping.

Table stiffness values are psychoacoustic, not physical: a calibration
constant maps them to integrator units so that the reference stiffness
rings at the reference frequency.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .anatomy import LayerCurve, RoiSpec

__all__ = [
    "VITREOUS", "ILM", "RETINA", "RPE", "LABELS",
    "ParamTable", "AnchorNode", "Spring", "LatticeModel",
    "assign_labels", "map_params", "build_springs", "build_lattice",
    "update_anchors", "stiffness_calibration",
]

log = logging.getLogger(__name__)

VITREOUS, ILM, RETINA, RPE = "vitreous", "ILM", "retina", "RPE"
LABELS = (VITREOUS, ILM, RETINA, RPE)
_LABEL_CODE = {name: i for i, name in enumerate(LABELS)}

# anchor modes
_MODE_RHO, _MODE_VITREOUS, _MODE_SUBRPE = 0, 1, 2


@dataclass(frozen=True)
class ParamTable:
    """Per-label (mass, stiffness, damping, neighborhood order).

    Stiffness may be modulated by local image intensity via
    k = k_base * (0.5 + mean_intensity), clamped to [0.5, 1.5] * k_base.
    """

    mass: dict = field(default_factory=lambda: {
        VITREOUS: 1.0, ILM: 1.0, RETINA: 1.0, RPE: 1.0})
    stiffness: dict = field(default_factory=lambda: {
        VITREOUS: 40.0, ILM: 900.0, RETINA: 400.0, RPE: 2000.0})
    damping: dict = field(default_factory=lambda: {
        VITREOUS: 0.8, ILM: 0.1, RETINA: 0.3, RPE: 0.05})
    order: dict = field(default_factory=lambda: {
        VITREOUS: 1, ILM: 2, RETINA: 1, RPE: 2})
    w_thin: float = 3.0  # vote up-weight for the thin boundary layers


def map_params(label: str, mean_intensity=None, table: ParamTable | None = None):
    """Look up (m, k, d, order) for a label, with intensity-scaled stiffness."""
    table = table or ParamTable()
    if label not in LABELS:
        raise ValueError(f"unknown tissue label '{label}'")
    m = table.mass[label]
    k_base = table.stiffness[label]
    d = table.damping[label]
    n = table.order[label]
    if mean_intensity is None:
        k = k_base
    else:
        k = k_base * (0.5 + float(mean_intensity))
        k = min(max(k, 0.5 * k_base), 1.5 * k_base)
    return m, k, d, n


def stiffness_calibration(freq_ref_hz=440.0, k_ref=400.0, mass_ref=1.0,
                          anchor_coeff=0.25):
    """Integrator stiffness per table unit.

    Chosen so a reference-stiffness node of reference mass, held only by its
    anchor spring, resonates at freq_ref_hz.
    """
    omega = 2.0 * math.pi * freq_ref_hz
    return omega * omega * mass_ref / (anchor_coeff * k_ref)


@dataclass
class AnchorNode:
    index: tuple[int, int]           # (row, col) in the grid
    label: str
    x: float                         # lateral position, rotated frame
    mode: int                        # rho vs boundary-offset parameterization
    rho: float | None
    delta: float | None
    mass: float
    stiffness: float                 # table units
    damping: float                   # table units
    rest: tuple[float, float]


@dataclass(frozen=True)
class Spring:
    a: int
    b: int
    stiffness: float   # table units, endpoint mean
    damping: float     # table units, endpoint mean
    rest_length: float


class LatticeModel:
    """Node grid plus springs, with flat arrays for the integrator.

    Table-unit parameters live on the nodes; the integrator arrays carry
    calibrated (physical) values.  ``rho``/``delta`` are immutable after
    construction.
    """

    def __init__(self, nodes, springs, shape, neighborhood,
                 k_cal=None, d_cal=25.0, anchor_coeff=0.25,
                 audio_rate=44100):
        self.nodes: list[AnchorNode] = nodes
        self.springs: list[Spring] = springs
        self.shape = shape
        self.neighborhood = neighborhood
        self.anchor_coeff = float(anchor_coeff)
        self.k_cal = float(k_cal if k_cal is not None else stiffness_calibration())
        self.d_cal = float(d_cal)
        self.audio_rate = int(audio_rate)
        self.clamped_springs = 0

        n = len(nodes)
        self.anchors = np.array([nd.rest for nd in nodes], dtype=np.float64)
        self.mass = np.array([nd.mass for nd in nodes], dtype=np.float64)
        self.k_table = np.array([nd.stiffness for nd in nodes], dtype=np.float64)
        self.label_code = np.array([_LABEL_CODE[nd.label] for nd in nodes],
                                   dtype=np.int32)
        self.node_x = np.array([nd.x for nd in nodes], dtype=np.float64)
        self._mode = np.array([nd.mode for nd in nodes], dtype=np.int32)
        rho = np.array([nd.rho if nd.rho is not None else np.nan for nd in nodes])
        delta = np.array([nd.delta if nd.delta is not None else np.nan
                          for nd in nodes])
        rho.flags.writeable = False
        delta.flags.writeable = False
        self.rho = rho
        self.delta = delta

        self.k_anchor = self.anchor_coeff * self.k_cal * self.k_table
        self.d_node = self.d_cal * np.array([nd.damping for nd in nodes])
        self.spring_ab = np.array([[s.a, s.b] for s in springs],
                                  dtype=np.int32).reshape(-1, 2)
        self.spring_k = self.k_cal * np.array([s.stiffness for s in springs],
                                              dtype=np.float64)
        self.spring_d = self.d_cal * np.array([s.damping for s in springs],
                                              dtype=np.float64)
        self.rest_length = np.array([s.rest_length for s in springs],
                                    dtype=np.float64)
        self._apply_stability_clamp()

    # -- stability ---------------------------------------------------------

    def _apply_stability_clamp(self):
        """Clamp spring and anchor stiffness so omega_max * dt <= 0.5."""
        dt = 1.0 / self.audio_rate
        limit = 0.5 / dt
        if self.spring_ab.size:
            m_min = np.minimum(self.mass[self.spring_ab[:, 0]],
                               self.mass[self.spring_ab[:, 1]])
            omega = np.sqrt(2.0 * self.spring_k / m_min)
            over = omega > limit
            if np.any(over):
                self.spring_k[over] = 0.5 * limit * limit * m_min[over]
                self.clamped_springs = int(np.count_nonzero(over))
                log.warning("stability clamp reduced %d spring stiffnesses",
                            self.clamped_springs)
        omega_a = np.sqrt(2.0 * self.k_anchor / self.mass)
        over_a = omega_a > limit
        if np.any(over_a):
            self.k_anchor[over_a] = 0.5 * limit * limit * self.mass[over_a]
            log.warning("stability clamp reduced %d anchor stiffnesses",
                        int(np.count_nonzero(over_a)))

    def omega_max(self):
        vals = [0.0]
        if self.spring_ab.size:
            m_min = np.minimum(self.mass[self.spring_ab[:, 0]],
                               self.mass[self.spring_ab[:, 1]])
            vals.append(float(np.max(np.sqrt(2.0 * self.spring_k / m_min))))
        vals.append(float(np.max(np.sqrt(2.0 * self.k_anchor / self.mass))))
        return max(vals)

    # -- queries -----------------------------------------------------------

    def nearest_node(self, x, y):
        d2 = (self.anchors[:, 0] - x) ** 2 + (self.anchors[:, 1] - y) ** 2
        return int(np.argmin(d2))

    def nodes_with_label(self, label, columns=None):
        mask = self.label_code == _LABEL_CODE[label]
        if columns is not None:
            lo, hi = columns
            mask &= (self.node_x >= lo) & (self.node_x <= hi)
        return np.nonzero(mask)[0]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _pixel_labels(xs, ys, ilm: LayerCurve, rpe: LayerCurve, band=2.0):
    """Label pixels from the fitted curves.

    Within ``band`` of a boundary curve -> that boundary; above -> vitreous;
    between -> retina; below the RPE band -> RPE (deep tissue is treated as
    the safety-critical layer).
    """
    iy = ilm.y_at(xs)
    ry = rpe.y_at(xs)
    out = np.full(xs.shape, _LABEL_CODE[RETINA], dtype=np.int32)
    out[ys < iy - band] = _LABEL_CODE[VITREOUS]
    out[np.abs(ys - iy) <= band] = _LABEL_CODE[ILM]
    out[ys > ry - band] = _LABEL_CODE[RPE]
    # the RPE band takes precedence over ILM in pathological overlaps
    return out


def assign_labels(roi: RoiSpec, grid, ilm: LayerCurve, rpe: LayerCurve, *,
                  intensity=None, intensity_theta=0.0, w_thin=3.0, band=2.0):
    """Vote a tissue label for every grid node over its support pixels.

    Returns (labels[m][n], mean_intensity[m][n] or None).  Votes weight
    the thin boundary layers by ``w_thin``; ties go to the deeper label.
    Supports without any coverage inherit from the vertical neighbor.
    ``intensity`` is the unrotated image; support coordinates are mapped
    back through ``intensity_theta`` before sampling.
    """
    rows, cols = grid
    if rows < 4 or cols < 4:
        raise ValueError("grid must be at least 4x4")
    x0, y0, x1, y1 = roi.rect
    xs_edges = np.linspace(x0, x1, cols + 1)
    ys_edges = np.linspace(y0, y1, rows + 1)
    weights = {VITREOUS: 1.0, RETINA: 1.0, ILM: float(w_thin), RPE: float(w_thin)}

    labels = [[None] * cols for _ in range(rows)]
    means = [[None] * cols for _ in range(rows)] if intensity is not None else None
    lo, hi = ilm.domain
    for i in range(rows):
        for j in range(cols):
            px = np.arange(math.floor(xs_edges[j]), math.ceil(xs_edges[j + 1]))
            py = np.arange(math.floor(ys_edges[i]), math.ceil(ys_edges[i + 1]))
            px = px[(px >= lo) & (px <= hi)]
            if px.size == 0 or py.size == 0:
                continue  # inherit later
            gx, gy = np.meshgrid(px.astype(np.float64), py.astype(np.float64))
            codes = _pixel_labels(gx.ravel(), gy.ravel(), ilm, rpe, band=band)
            counts = np.bincount(codes, minlength=4).astype(np.float64)
            for name, code in _LABEL_CODE.items():
                counts[code] *= weights[name]
            best = int(np.max(np.nonzero(counts == counts.max())[0]))  # deeper wins
            labels[i][j] = LABELS[best]
            if means is not None:
                vals = _sample_intensity(intensity, gx.ravel(), gy.ravel(),
                                         intensity_theta)
                means[i][j] = float(np.mean(vals)) if vals.size else None
    _fill_from_vertical_neighbors(labels, rows, cols)
    return labels, means


def _sample_intensity(intensity, xs, ys, theta=0.0):
    h, w = intensity.shape
    if theta != 0.0:
        from .anatomy import rotate_points
        pts = rotate_points(np.column_stack([xs, ys]), theta,
                            ((w - 1) / 2.0, (h - 1) / 2.0), inverse=True)
        xs, ys = pts[:, 0], pts[:, 1]
    xi = np.clip(np.round(xs).astype(int), 0, w - 1)
    yi = np.clip(np.round(ys).astype(int), 0, h - 1)
    return intensity[yi, xi]


def _fill_from_vertical_neighbors(labels, rows, cols):
    for j in range(cols):
        for i in range(rows):
            if labels[i][j] is None:
                for di in range(1, rows):
                    for i2 in (i - di, i + di):
                        if 0 <= i2 < rows and labels[i2][j] is not None:
                            labels[i][j] = labels[i2][j]
                            break
                    if labels[i][j] is not None:
                        break
        for i in range(rows):
            if labels[i][j] is None:
                labels[i][j] = VITREOUS  # fully uncovered column


def build_springs(nodes, order):
    """Symmetric springs over the grid neighborhood.

    Order 1 couples axis neighbors, order 2 adds the diagonals.  Stiffness
    and damping are exact endpoint means; rest length is the anchor
    distance.
    """
    index = {nd.index: i for i, nd in enumerate(nodes)}
    offsets = [(0, 1), (1, 0)]
    if order == 2:
        offsets += [(1, 1), (1, -1)]
    springs = []
    for nd in nodes:
        i, j = nd.index
        for di, dj in offsets:
            nb = (i + di, j + dj)
            if nb in index:
                a = index[nd.index]
                b = index[nb]
                other = nodes[b]
                rest = math.hypot(other.rest[0] - nd.rest[0],
                                  other.rest[1] - nd.rest[1])
                springs.append(Spring(
                    a=a, b=b,
                    stiffness=(nd.stiffness + other.stiffness) / 2.0,
                    damping=(nd.damping + other.damping) / 2.0,
                    rest_length=rest))
    return springs


def build_lattice(roi: RoiSpec, grid, ilm: LayerCurve, rpe: LayerCurve, *,
                  intensity=None, intensity_theta=0.0,
                  table: ParamTable | None = None,
                  neighborhood="auto", band=2.0, sub_rpe_delta=True,
                  k_cal=None, d_cal=25.0, anchor_coeff=0.25,
                  audio_rate=44100) -> LatticeModel:
    """Assemble the full model from ROI, grid size, and fitted curves."""
    table = table or ParamTable()
    rows, cols = grid
    labels, means = assign_labels(roi, grid, ilm, rpe, intensity=intensity,
                                  intensity_theta=intensity_theta,
                                  w_thin=table.w_thin, band=band)
    x0, y0, x1, y1 = roi.rect
    xs = np.linspace(x0, x1, cols + 1)
    ys = np.linspace(y0, y1, rows + 1)
    xc = (xs[:-1] + xs[1:]) / 2.0
    yc = (ys[:-1] + ys[1:]) / 2.0

    nodes = []
    orders = set()
    for i in range(rows):
        for j in range(cols):
            label = labels[i][j]
            mean_i = means[i][j] if means is not None else None
            m, k, d, n = map_params(label, mean_i, table)
            orders.add(n)
            x = float(xc[j])
            y0n = float(yc[i])
            iy = float(ilm.y_at(x))
            ry = float(rpe.y_at(x))
            mode, rho, delta, y = _parameterize(label, y0n, iy, ry, band,
                                                sub_rpe_delta)
            nodes.append(AnchorNode(
                index=(i, j), label=label, x=x, mode=mode, rho=rho,
                delta=delta, mass=m, stiffness=k, damping=d, rest=(x, y)))

    if neighborhood == "auto":
        order = max(orders)
    else:
        order = int(neighborhood)
    springs = build_springs(nodes, order)
    return LatticeModel(nodes, springs, grid, order, k_cal=k_cal, d_cal=d_cal,
                        anchor_coeff=anchor_coeff, audio_rate=audio_rate)


def _parameterize(label, y, iy, ry, band, sub_rpe_delta):
    """Pick the depth parameterization and the snapped rest depth."""
    thick = ry - iy
    if label == ILM:
        return _MODE_RHO, 0.0, None, iy
    if label == RPE:
        if y > ry + band and sub_rpe_delta:
            return _MODE_SUBRPE, None, y - ry, y
        return _MODE_RHO, 1.0, None, ry
    if label == VITREOUS:
        delta = min(y - iy, 0.0)
        return _MODE_VITREOUS, None, delta, iy + delta
    rho = (y - iy) / thick if thick > 0 else 0.5
    rho = min(max(rho, 0.0), 1.0)
    return _MODE_RHO, rho, None, iy + rho * thick


# ---------------------------------------------------------------------------
# Anchor updates
# ---------------------------------------------------------------------------

def update_anchors(model: LatticeModel, ilm: LayerCurve, rpe: LayerCurve) -> bool:
    """Move rest positions to the current layer geometry.

    Retina-interior nodes follow ilm + rho * (rpe - ilm); boundary-offset
    nodes ride their nearest boundary.  Frames where the layers cross at
    any node column are rejected (previous anchors kept) with a warning.
    Returns True when the update was applied.
    """
    x = model.node_x
    iy = np.asarray(ilm.y_at(x), dtype=np.float64)
    ry = np.asarray(rpe.y_at(x), dtype=np.float64)
    if np.any(ry < iy):
        bad = int(np.nonzero(ry < iy)[0][0])
        log.warning("anchor update rejected: rpe above ilm at column %.1f",
                    float(x[bad]))
        return False
    y = np.empty_like(iy)
    rho_mask = model._mode == _MODE_RHO
    vit_mask = model._mode == _MODE_VITREOUS
    sub_mask = model._mode == _MODE_SUBRPE
    y[rho_mask] = iy[rho_mask] + model.rho[rho_mask] * (ry[rho_mask] - iy[rho_mask])
    y[vit_mask] = iy[vit_mask] + model.delta[vit_mask]
    y[sub_mask] = ry[sub_mask] + model.delta[sub_mask]
    model.anchors[:, 0] = x
    model.anchors[:, 1] = y
    if model.spring_ab.size:
        pa = model.anchors[model.spring_ab[:, 0]]
        pb = model.anchors[model.spring_ab[:, 1]]
        model.rest_length[:] = np.hypot(pb[:, 0] - pa[:, 0], pb[:, 1] - pa[:, 1])
    return True
