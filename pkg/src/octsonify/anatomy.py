"""Per-frame geometry: layer curves, needle line, tissue rotation, ROI.

Layer curves come from a penalized cubic regression spline: knots every
``knot_spacing`` columns, data term weighted by per-sample confidence, and a
curvature penalty lam * integral(y'')^2.  Straight lines live in the penalty
null space, so the fit extrapolates linearly across occluded gaps.  Samples
below the confidence suppression threshold are removed before the solve, so
zero-confidence evidence can never perturb a fit.

The needle shaft is a Huber line fit (IRLS) of axial position over lateral
position; the same estimator provides the dominant tissue orientation from
ILM evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import BSpline, splev

from .errors import DegenerateOrientationError, InsufficientEvidenceError
from .ingest import SegFrame

__all__ = [
    "LayerCurve",
    "NeedleEstimate",
    "RoiSpec",
    "fit_layer_spline",
    "estimate_tissue_rotation",
    "fit_needle_line",
    "huber_line",
    "extract_roi",
    "TipTracker",
    "rotate_points",
    "rotated_segment_samples",
]

CONF_SUPPRESS = 0.3      # evidence below this confidence is discarded
DEFAULT_LAMBDA = 10.0
DEFAULT_KNOT_SPACING = 8
HUBER_DELTA = 3.0        # px
HUBER_MAX_ITER = 20
HUBER_TOL = 1e-6


# ---------------------------------------------------------------------------
# Smoothing spline
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _basis(lo: int, hi: int, spacing: int):
    """Precompute the B-spline basis and curvature penalty for a domain.

    Returns (knots, columns, design-at-columns, penalty matrix).  Cached per
    (domain, spacing) because the domain is fixed for a whole session.
    """
    breaks = np.arange(lo, hi + 1, spacing, dtype=np.float64)
    if breaks[-1] != hi:
        breaks = np.append(breaks, float(hi))
    if len(breaks) < 2:
        breaks = np.array([float(lo), float(hi)])
    t = np.concatenate([[breaks[0]] * 3, breaks, [breaks[-1]] * 3])
    nb = len(t) - 4  # number of cubic basis functions
    cols = np.arange(lo, hi + 1, dtype=np.float64)
    design = BSpline.design_matrix(cols, t, 3).toarray()

    # exact curvature penalty: B'' is piecewise linear, so two-point
    # Gauss-Legendre per knot interval integrates the products exactly
    gauss = np.array([-1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0)])
    xq, wq = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = (b - a) / 2.0
        mid = (a + b) / 2.0
        xq.extend(mid + half * gauss)
        wq.extend([half, half])
    xq = np.array(xq)
    wq = np.array(wq)
    d2 = np.empty((len(xq), nb))
    for j in range(nb):
        c = np.zeros(nb)
        c[j] = 1.0
        d2[:, j] = splev(xq, (t, c, 3), der=2)
    penalty = d2.T @ (wq[:, None] * d2)
    return t, cols, design, penalty


@dataclass
class LayerCurve:
    """A fitted layer over a column domain, with per-column confidence."""

    domain: tuple[int, int]          # inclusive column range
    values: np.ndarray               # y at every integer column in domain
    conf: np.ndarray                 # per-column confidence, 0 where unseen
    smoothing: float
    _spline: BSpline | None = None

    def columns(self) -> np.ndarray:
        return np.arange(self.domain[0], self.domain[1] + 1)

    def y_at(self, x):
        """Evaluate at (possibly fractional) columns, clamped to the domain."""
        xc = np.clip(np.asarray(x, dtype=np.float64), self.domain[0], self.domain[1])
        if self._spline is not None:
            return self._spline(xc)
        return np.interp(xc, self.columns(), self.values)

    def conf_at(self, x):
        xc = np.clip(np.round(np.asarray(x)).astype(int) - self.domain[0],
                     0, self.values.size - 1)
        return self.conf[xc]

    @classmethod
    def from_values(cls, domain, values, conf=None, smoothing=0.0):
        values = np.asarray(values, dtype=np.float64)
        if conf is None:
            conf = np.ones_like(values)
        return cls(domain=(int(domain[0]), int(domain[1])), values=values,
                   conf=np.asarray(conf, dtype=np.float64), smoothing=smoothing)


def fit_layer_spline(samples, lam=DEFAULT_LAMBDA, domain=None, *,
                     conf_threshold=CONF_SUPPRESS,
                     knot_spacing=DEFAULT_KNOT_SPACING) -> LayerCurve:
    """Fit a confidence-weighted smoothing spline to (x, y, conf) samples.

    Minimizes sum(conf_i * (y(x_i) - y_i)^2) + lam * integral(y'')^2 over
    cubic splines on the domain.  Samples with confidence below
    ``conf_threshold`` are dropped before the solve.

    Raises InsufficientEvidenceError with fewer than 4 usable samples.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    keep = pts[:, 2] >= conf_threshold
    pts = pts[keep]
    if pts.shape[0] < 4:
        raise InsufficientEvidenceError(
            f"{pts.shape[0]} usable samples, need at least 4")
    if domain is None:
        domain = (int(math.floor(pts[:, 0].min())), int(math.ceil(pts[:, 0].max())))
    lo, hi = int(domain[0]), int(domain[1])

    t, cols, design, penalty = _basis(lo, hi, int(knot_spacing))
    x = np.clip(pts[:, 0], lo, hi)
    y = pts[:, 1]
    w = pts[:, 2]
    b = BSpline.design_matrix(x, t, 3).toarray()
    bw = b * w[:, None]
    a = bw.T @ b + lam * penalty
    rhs = bw.T @ y
    try:
        coef = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        coef, *_ = np.linalg.lstsq(a, rhs, rcond=None)

    spline = BSpline(t, coef, 3, extrapolate=False)
    values = design @ coef

    conf = np.zeros(cols.size)
    idx = np.clip(np.round(x).astype(int) - lo, 0, cols.size - 1)
    np.maximum.at(conf, idx, w)
    return LayerCurve(domain=(lo, hi), values=values, conf=conf,
                      smoothing=lam, _spline=spline)


# ---------------------------------------------------------------------------
# Robust line fits
# ---------------------------------------------------------------------------

def huber_line(x, y, base_weights=None, delta=HUBER_DELTA,
               max_iter=HUBER_MAX_ITER, tol=HUBER_TOL):
    """IRLS Huber fit of y = a + b*x.  Returns (a, b, inlier_mask)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w0 = np.ones_like(x) if base_weights is None else np.asarray(base_weights,
                                                                 dtype=np.float64)
    design = np.column_stack([np.ones_like(x), x])
    coef = _weighted_lstsq(design, y, w0)
    for _ in range(max_iter):
        r = y - design @ coef
        absr = np.abs(r)
        wh = np.where(absr <= delta, 1.0, delta / np.maximum(absr, 1e-300))
        new = _weighted_lstsq(design, y, w0 * wh)
        if np.max(np.abs(new - coef)) < tol:
            coef = new
            break
        coef = new
    r = y - design @ coef
    return float(coef[0]), float(coef[1]), np.abs(r) <= delta


def _weighted_lstsq(design, y, w):
    dw = design * w[:, None]
    a = dw.T @ design
    rhs = dw.T @ y
    try:
        return np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, rhs, rcond=None)[0]


def estimate_tissue_rotation(seg: SegFrame, *, conf_threshold=CONF_SUPPRESS,
                             delta=HUBER_DELTA) -> float:
    """Dominant retinal orientation in degrees from a robust ILM line fit.

    Positive angles mean the ILM deepens toward larger x.  Clamped to
    [-45, 45].  Raises InsufficientEvidenceError when the ILM covers less
    than a quarter of the columns.
    """
    cols = np.nonzero(~np.isnan(seg.ilm))[0]
    if cols.size < 0.25 * seg.width:
        raise InsufficientEvidenceError(
            f"ILM defined on {cols.size}/{seg.width} columns, need 25%")
    y = seg.ilm[cols]
    w = seg.conf_ilm[cols]
    usable = w >= conf_threshold
    if np.count_nonzero(usable) < 0.25 * seg.width:
        raise InsufficientEvidenceError("too few confident ILM columns")
    _, slope, _ = huber_line(cols[usable], y[usable], w[usable], delta=delta)
    theta = math.degrees(math.atan(slope))
    return max(-45.0, min(45.0, theta))


@dataclass(frozen=True)
class NeedleEstimate:
    point: tuple[float, float]       # a point on the line
    direction: tuple[float, float]   # unit vector pointing toward the retina
    tip: tuple[float, float]
    conf: float

    def y_at(self, x):
        px, py = self.point
        dx, dy = self.direction
        if abs(dx) < 1e-12:
            return np.full_like(np.asarray(x, dtype=np.float64), py)
        return py + dy / dx * (np.asarray(x, dtype=np.float64) - px)


def fit_needle_line(pixels, delta=HUBER_DELTA, max_iter=HUBER_MAX_ITER,
                    tol=HUBER_TOL) -> NeedleEstimate:
    """Fit the needle shaft line to segmented pixels with a Huber regressor.

    The tip is the pixel lying farthest along the retina-pointing direction,
    projected onto the fitted line.  Confidence is the inlier fraction
    (|axial residual| <= delta).
    """
    pts = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 10:
        raise InsufficientEvidenceError(
            f"{pts.shape[0]} needle pixels, need at least 10")
    extent = pts[:, 0].max() - pts[:, 0].min()
    if extent < 5.0:
        raise DegenerateOrientationError(
            f"lateral extent {extent:.1f} px too small for an axial fit")
    a, b, inliers = huber_line(pts[:, 0], pts[:, 1], delta=delta,
                               max_iter=max_iter, tol=tol)
    norm = math.hypot(1.0, b)
    d = (1.0 / norm, b / norm)
    if d[1] < 0:  # orient toward the retina: deeper rows are positive y
        d = (-d[0], -d[1])
    proj = pts @ np.array(d)
    far = pts[int(np.argmax(proj))]
    p0 = np.array([pts[:, 0].mean(), a + b * pts[:, 0].mean()])
    tip = p0 + float((far - p0) @ np.array(d)) * np.array(d)
    conf = float(np.count_nonzero(inliers)) / pts.shape[0]
    return NeedleEstimate(point=(float(p0[0]), float(p0[1])),
                          direction=d, tip=(float(tip[0]), float(tip[1])),
                          conf=conf)


# ---------------------------------------------------------------------------
# Rotation helpers and ROI extraction
# ---------------------------------------------------------------------------

def rotate_points(pts, theta_deg, center, inverse=False):
    """Rotate points by -theta about center (tissue-aligning transform).

    With ``inverse`` set, maps rotated-frame points back to the original.
    """
    pts = np.asarray(pts, dtype=np.float64)
    a = math.radians(-theta_deg if not inverse else theta_deg)
    c, s = math.cos(a), math.sin(a)
    r = np.array([[c, -s], [s, c]])
    ctr = np.asarray(center, dtype=np.float64)
    return (pts - ctr) @ r.T + ctr


def rotated_segment_samples(seg: SegFrame, layer: str, theta_deg: float):
    """Layer evidence as (x', y', conf) samples in the tissue-aligned frame."""
    arr = seg.ilm if layer == "ilm" else seg.rpe
    conf = seg.conf_ilm if layer == "ilm" else seg.conf_rpe
    cols = np.nonzero(~np.isnan(arr))[0]
    center = ((seg.width - 1) / 2.0, (seg.height - 1) / 2.0)
    pts = rotate_points(np.column_stack([cols.astype(np.float64), arr[cols]]),
                        theta_deg, center)
    return np.column_stack([pts, conf[cols]])


@dataclass(frozen=True)
class RoiSpec:
    """Tool-aligned rectangle in the rotated frame."""

    theta: float
    rect: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    provenance: str  # direct-intersection | neighborhood-search | trajectory-only
    center: tuple[float, float]

    @property
    def columns(self) -> tuple[int, int]:
        return int(math.ceil(self.rect[0])), int(math.floor(self.rect[2]))


def _line_curve_crossing(line: NeedleEstimate, curve: LayerCurve):
    """Lateral position where the needle line crosses the layer curve."""
    lo, hi = curve.domain
    xs = np.arange(lo, hi + 1, dtype=np.float64)
    diff = line.y_at(xs) - curve.values
    sign = np.signbit(diff)
    flips = np.nonzero(sign[1:] != sign[:-1])[0]
    if flips.size == 0:
        exact = np.nonzero(diff == 0.0)[0]
        if exact.size:
            return float(xs[exact[0]])
        return None
    i = int(flips[0])
    d0, d1 = diff[i], diff[i + 1]
    frac = d0 / (d0 - d1)
    return float(xs[i] + frac)


def extract_roi(seg: SegFrame, theta: float, line: NeedleEstimate | None,
                ilm: LayerCurve, size=(256, 192), *, vitreous_frac=0.22,
                search_radius=50.0, direct_radius=3.0) -> RoiSpec:
    """Locate the tool-aligned ROI around the needle/ILM intersection.

    Works in the rotated frame.  Falls back from direct intersection to a
    neighborhood search over needle pixels, then to the extrapolated
    trajectory; some layer evidence must exist.
    """
    if ilm is None:
        raise InsufficientEvidenceError("no layer evidence for ROI placement")
    w_roi, h_roi = size
    center_frame = ((seg.width - 1) / 2.0, (seg.height - 1) / 2.0)

    pix_rot = None
    if seg.needle_pixels.size:
        pix_rot = rotate_points(seg.needle_pixels, theta, center_frame)

    crossing = _line_curve_crossing(line, ilm) if line is not None else None
    center = None
    provenance = None
    if crossing is not None and pix_rot is not None and pix_rot.size:
        cx = crossing
        cy = float(ilm.y_at(cx))
        dist = np.hypot(pix_rot[:, 0] - cx, pix_rot[:, 1] - cy)
        if float(dist.min()) <= direct_radius:
            center = (cx, cy)
            provenance = "direct-intersection"
    if center is None and pix_rot is not None and pix_rot.size:
        cols = np.clip(np.round(pix_rot[:, 0]).astype(int),
                       ilm.domain[0], ilm.domain[1])
        gap = np.abs(pix_rot[:, 1] - ilm.y_at(cols))
        i = int(np.argmin(gap))
        if float(gap[i]) <= search_radius:
            center = (float(pix_rot[i, 0]), float(pix_rot[i, 1]))
            provenance = "neighborhood-search"
    if center is None:
        if crossing is not None:
            center = (crossing, float(ilm.y_at(crossing)))
        elif line is not None:
            tip_rot = rotate_points([line.tip], theta, center_frame)[0]
            cx = float(np.clip(tip_rot[0], ilm.domain[0], ilm.domain[1]))
            center = (cx, float(ilm.y_at(cx)))
        else:
            cx = float(np.mean(ilm.columns()))
            center = (cx, float(ilm.y_at(cx)))
        provenance = "trajectory-only"

    x_min = center[0] - w_roi / 2.0
    x_max = x_min + w_roi
    y_min = center[1] - vitreous_frac * h_roi
    y_max = y_min + h_roi
    # guarantee the vitreous share: top edge at least 20% of the height
    # above the ILM at the center column
    ilm_y = float(ilm.y_at(center[0]))
    if ilm_y - y_min < 0.2 * h_roi:
        shift = 0.2 * h_roi - (ilm_y - y_min)
        y_min -= shift
        y_max -= shift
    # clamp into frame bounds, preserving size where possible
    x_min = max(0.0, min(x_min, seg.width - w_roi))
    x_max = x_min + min(float(w_roi), float(seg.width))
    y_min = max(0.0, min(y_min, seg.height - h_roi))
    y_max = y_min + min(float(h_roi), float(seg.height))
    return RoiSpec(theta=theta, rect=(x_min, y_min, x_max, y_max),
                   provenance=provenance, center=center)


# ---------------------------------------------------------------------------
# Tip tracking
# ---------------------------------------------------------------------------

class TipTracker:
    """Exponential smoothing of the needle tip across frames."""

    def __init__(self, alpha=0.6):
        self.alpha = float(alpha)
        self._tip = None

    def update(self, est: NeedleEstimate) -> tuple[float, float]:
        tip = np.array(est.tip, dtype=np.float64)
        if self._tip is None:
            self._tip = tip
        else:
            self._tip = self.alpha * tip + (1.0 - self.alpha) * self._tip
        return float(self._tip[0]), float(self._tip[1])

    @property
    def tip(self):
        return None if self._tip is None else (float(self._tip[0]),
                                               float(self._tip[1]))
