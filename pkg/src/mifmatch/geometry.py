"""Planar homography utilities: sampling, warping, labelling and robust estimation.

Homographies are plain ``(3, 3)`` float64 arrays normalised so that
``H[2, 2] == 1``.  Points are ``(N, 2)`` arrays of ``(x, y)`` pixel coordinates.
"""
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_points, check_rng
from .exceptions import (
    DegenerateHomography,
    EstimationFailed,
    InsufficientMatches,
    PointAtInfinity,
)

_EPS_W = 1e-12


@dataclass(frozen=True)
class HomographyConfig:
    """Ranges for random homography synthesis.

    ``rotation_range`` is in degrees, ``translation_range`` is a fraction of
    the image size and ``perspective_distortion`` bounds each corner's jitter
    as a fraction of the half-size of the image.
    """

    rotation_range: tuple = (-25.0, 25.0)
    scale_range: tuple = (0.7, 1.4)
    perspective_distortion: float = 0.2
    translation_range: tuple = (-0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation_range
        if not np.isclose(lo, -hi) or lo > hi:
            raise ValueError(f"rotation_range must be symmetric about 0, got {self.rotation_range}")
        slo, shi = self.scale_range
        if slo <= 0 or shi < slo:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if not 0.0 <= self.perspective_distortion <= 0.5:
            raise ValueError("perspective_distortion must lie in [0, 0.5]")
        tlo, thi = self.translation_range
        if tlo > thi:
            raise ValueError("translation_range must be ordered")

    @classmethod
    def zero(cls, seed=0):
        return cls((0.0, 0.0), (1.0, 1.0), 0.0, (0.0, 0.0), seed)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("rotation_range", "scale_range", "translation_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        return {
            "rotation_range": list(self.rotation_range),
            "scale_range": list(self.scale_range),
            "perspective_distortion": self.perspective_distortion,
            "translation_range": list(self.translation_range),
            "seed": self.seed,
        }


@dataclass
class CorrespondenceLabels:
    matches: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    unmatched_a: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unmatched_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    threshold_px: float = 3.0


def normalize_homography(h):
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(h[2, 2]) < _EPS_W:
        raise EstimationFailed("homography has a vanishing bottom-right entry")
    return h / h[2, 2]


def invert_homography(h):
    h = np.asarray(h, dtype=np.float64)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise DegenerateHomography("homography is singular")
    return normalize_homography(np.linalg.inv(h))


def homography_to_list(h):
    """Serialise as 9 row-major numbers (the manifest format)."""
    return [float(v) for v in normalize_homography(h).ravel()]


def homography_from_list(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size != 9:
        raise ValueError(f"a homography needs 9 numbers, got {values.size}")
    return normalize_homography(values.reshape(3, 3))


def warp_points(h, pts):
    pts = check_points(pts)
    h = np.asarray(h, dtype=np.float64)
    if len(pts) == 0:
        return pts.copy()
    homog = pts @ h[:, :2].T + h[:, 2]
    w = homog[:, 2]
    if np.any(np.abs(w) <= _EPS_W):
        raise PointAtInfinity(f"{int(np.sum(np.abs(w) <= _EPS_W))} point(s) map to infinity")
    return homog[:, :2] / w[:, None]


def _about_center(m, cx, cy):
    t = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    t_inv = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    return t @ m @ t_inv


def _is_convex(quad):
    cross = []
    for i in range(4):
        p0, p1, p2 = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        d1, d2 = p1 - p0, p2 - p1
        cross.append(d1[0] * d2[1] - d1[1] * d2[0])
    cross = np.array(cross)
    return bool(np.all(cross > 0) or np.all(cross < 0))


def image_corners(image_size):
    w, h = image_size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def compose_homography(image_size, angle_deg=0.0, scale=1.0, translation=(0.0, 0.0), corner_offsets=None):
    """translation . rotation . scale . corner jitter, rotation/scale about the image centre.

    ``translation`` is in pixels, ``corner_offsets`` is a ``(4, 2)`` pixel
    displacement of the image corners (pixel-centre convention).
    """
    w, h = image_size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if corner_offsets is not None and np.any(corner_offsets != 0):
        corners = image_corners(image_size)
        persp = dlt_homography(corners, corners + corner_offsets)
    else:
        persp = np.eye(3)
    scale_m = _about_center(np.diag([scale, scale, 1.0]), cx, cy)
    theta = np.deg2rad(angle_deg)
    c, si = np.cos(theta), np.sin(theta)
    rot = _about_center(np.array([[c, -si, 0.0], [si, c, 0.0], [0.0, 0.0, 1.0]]), cx, cy)
    tx, ty = translation
    trans = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    return trans @ rot @ scale_m @ persp


def _uniform(rng, lo, hi):
    return rng.uniform(lo, hi) if hi > lo else lo


def sample_homography(cfg, image_size, rng_state, max_tries=100):
    """Draw a random homography from ``cfg``; resamples non-convex or singular draws.

    Deterministic for a given ``rng_state``.
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError("image_size must be positive")
    rng = check_rng(rng_state)
    corners = image_corners(image_size)

    for _ in range(max_tries):
        d = cfg.perspective_distortion
        jitter = rng.uniform(-d, d, size=(4, 2)) * np.array([w / 2.0, h / 2.0]) if d > 0 else None
        s = _uniform(rng, *cfg.scale_range)
        angle = _uniform(rng, *cfg.rotation_range)
        tlo, thi = cfg.translation_range
        frac = rng.uniform(tlo, thi, size=2) if thi > tlo else np.array([tlo, tlo])
        try:
            m = compose_homography(image_size, angle, s, frac * np.array([w, h]), jitter)
        except EstimationFailed:
            continue
        if abs(np.linalg.det(m)) < 1e-12 or abs(m[2, 2]) < _EPS_W:
            continue
        m = m / m[2, 2]
        try:
            warped = warp_points(m, corners)
        except PointAtInfinity:
            continue
        if _is_convex(warped):
            return m
    raise DegenerateHomography(f"no valid homography after {max_tries} tries")


def label_correspondences(kpts_a, kpts_b, h_ab, threshold_px=3.0):
    """Ground-truth labels from mutual nearest neighbours after warping A into B."""
    if threshold_px <= 0:
        raise ValueError("threshold_px must be positive")
    a = check_points(kpts_a, "kpts_a")
    b = check_points(kpts_b, "kpts_b")
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        return CorrespondenceLabels(
            unmatched_a=np.arange(na), unmatched_b=np.arange(nb), threshold_px=threshold_px
        )
    h_ab = np.asarray(h_ab, dtype=np.float64)
    homog = a @ h_ab[:, :2].T + h_ab[:, 2]
    valid = np.abs(homog[:, 2]) > _EPS_W
    warped = np.full((na, 2), np.inf)
    warped[valid] = homog[valid, :2] / homog[valid, 2:3]

    dist = np.sqrt(((warped[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    dist[~valid] = np.inf
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    idx_a = np.arange(na)
    mutual = (nn_ba[nn_ab] == idx_a) & (dist[idx_a, nn_ab] <= threshold_px)
    matches = np.stack([idx_a[mutual], nn_ab[mutual]], axis=1).astype(np.int64)
    matched_b = np.zeros(nb, dtype=bool)
    matched_b[matches[:, 1]] = True
    return CorrespondenceLabels(
        matches=matches,
        unmatched_a=idx_a[~mutual].astype(np.int64),
        unmatched_b=np.flatnonzero(~matched_b).astype(np.int64),
        threshold_px=threshold_px,
    )


def _hartley_normalization(pts):
    centroid = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def dlt_homography(src, dst):
    """Normalised direct linear transform; least squares for more than 4 points."""
    src = check_points(src, "src")
    dst = check_points(dst, "dst")
    if len(src) < 4 or len(src) != len(dst):
        raise InsufficientMatches("DLT needs at least 4 paired points")
    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    s = src @ t_src[:2, :2].T + t_src[:2, 2]
    d = dst @ t_dst[:2, :2].T + t_dst[:2, 2]
    n = len(s)
    a = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    a[0::2, 0:3] = np.stack([-x, -y, -np.ones(n)], axis=1)
    a[0::2, 6:9] = np.stack([u * x, u * y, u], axis=1)
    a[1::2, 3:6] = np.stack([-x, -y, -np.ones(n)], axis=1)
    a[1::2, 6:9] = np.stack([v * x, v * y, v], axis=1)
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    return normalize_homography(h)


def _has_collinear_triple(pts, min_area=1e-6):
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        d1 = pts[j] - pts[i]
        d2 = pts[k] - pts[i]
        if 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0]) < min_area:
            return True
    return False


def _transfer_error(h, src, dst):
    homog = src @ h[:, :2].T + h[:, 2]
    w = homog[:, 2]
    err = np.full(len(src), np.inf)
    ok = np.abs(w) > _EPS_W
    err[ok] = np.sqrt(((homog[ok, :2] / w[ok, None] - dst[ok]) ** 2).sum(axis=1))
    return err


def estimate_homography(src, dst, inlier_threshold_px=3.0, max_iters=2000, confidence=0.995,
                        rng_state=0):
    """RANSAC over normalised 4-point DLT, refit on all inliers.

    Returns ``(H, inlier_mask)`` with ``H`` mapping ``src`` onto ``dst``.
    """
    src = check_points(src, "src")
    dst = check_points(dst, "dst")
    if len(src) != len(dst):
        raise ValueError("src and dst must have the same length")
    n = len(src)
    if n < 4:
        raise InsufficientMatches(f"need at least 4 correspondences, got {n}")
    rng = check_rng(rng_state)

    best_mask, best_count, best_err = None, 0, np.inf
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        if _has_collinear_triple(src[sample]) or _has_collinear_triple(dst[sample]):
            continue
        try:
            h = dlt_homography(src[sample], dst[sample])
        except EstimationFailed:
            continue
        if abs(np.linalg.det(h)) < 1e-12:
            continue
        err = _transfer_error(h, src, dst)
        mask = err <= inlier_threshold_px
        count = int(mask.sum())
        if count < 4:
            continue
        total = float(err[mask].sum())
        if count > best_count or (count == best_count and total < best_err):
            best_mask, best_count, best_err = mask, count, total
            ratio = count / n
            if ratio >= 1.0:
                needed = 0
            else:
                denom = np.log(max(1.0 - ratio ** 4, 1e-300))
                needed = int(np.ceil(np.log(1.0 - confidence) / denom)) if denom < 0 else max_iters

    if best_mask is None:
        raise EstimationFailed("no minimal sample produced 4 or more inliers")

    h = dlt_homography(src[best_mask], dst[best_mask])
    refit_mask = _transfer_error(h, src, dst) <= inlier_threshold_px
    if refit_mask.sum() >= best_count:
        best_mask = refit_mask
        h = dlt_homography(src[best_mask], dst[best_mask])
    return h, best_mask


def homography_error(h_true, h_pred):
    """Frobenius norm of the difference of the two normalised matrices."""
    return float(np.linalg.norm(normalize_homography(h_true) - normalize_homography(h_pred)))
