"""Projective geometry: homography estimation and refinement, hulls, containment.

A homography is a ``(3, 3)`` float array mapping captured-image coordinates to
page coordinates, kept with ``H[2, 2] == 1``. Point sets are ``(N, 2)`` arrays of
``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    DegenerateRegionError,
    InsufficientDataError,
    InvalidInputError,
    NumericalFailureError,
    PointAtInfinityError,
    SingularTransformError,
)

INSIDE = "inside"
CROSSES_BORDER = "crosses_border"
OUTSIDE = "outside"

_DET_EPS = 1e-12
_W_EPS = 1e-12


def normalize_homography(H) -> np.ndarray:
    """Scale ``H`` so that ``H[2, 2] == 1`` and check invertibility."""
    H = np.array(H, dtype=np.float64)
    if H.shape != (3, 3) or not np.isfinite(H).all():
        raise InvalidInputError("homography must be a finite 3x3 matrix")
    if abs(H[2, 2]) <= _W_EPS:
        raise SingularTransformError("H[2, 2] is zero; cannot normalise")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= _DET_EPS:
        raise SingularTransformError("homography is singular")
    return H


def invert_homography(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) <= _DET_EPS:
        raise SingularTransformError("homography is singular")
    return normalize_homography(np.linalg.inv(H))


def translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def project_points(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    H = np.asarray(H, dtype=np.float64)
    ph = pts @ H[:, :2].T + H[:, 2]
    w = ph[:, 2:]
    if (np.abs(w) <= _W_EPS).any():
        raise PointAtInfinityError("point maps to infinity")
    return ph[:, :2] / w


def project(H, p) -> tuple[float, float]:
    """Map a single point through ``H``."""
    x, y = project_points(H, [p])[0]
    return float(x), float(y)


def _check_pairs(src, dst) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise InvalidInputError("src and dst must hold the same number of points")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise InvalidInputError("point coordinates must be finite")
    if len(src) < 4:
        raise InsufficientDataError(f"need at least 4 point pairs, got {len(src)}")
    return src, dst


def hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    mean = pts.mean(axis=0)
    dist = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    if dist <= 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])


def estimate_homography_ls(src, dst) -> np.ndarray:
    """Normalised DLT estimate of the homography taking ``src`` onto ``dst``.

    Both point sets are Hartley-normalised, the ``2n x 9`` system is solved by
    the right singular vector of the smallest singular value, and the result is
    denormalised with ``H[2, 2] = 1``.
    """
    src, dst = _check_pairs(src, dst)
    Ts = hartley_normalization(src)
    Td = hartley_normalization(dst)
    s = project_points(Ts, src)
    d = project_points(Td, dst)
    n = len(s)
    A = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    A[0::2, 0:3] = np.stack([x, y, np.ones(n)], axis=1)
    A[0::2, 6:9] = -u[:, None] * np.stack([x, y, np.ones(n)], axis=1)
    A[1::2, 3:6] = np.stack([x, y, np.ones(n)], axis=1)
    A[1::2, 6:9] = -v[:, None] * np.stack([x, y, np.ones(n)], axis=1)
    _, sv, vt = np.linalg.svd(A)
    # a unique solution needs an 8-dimensional row space
    if sv[7] <= 1e-10 * sv[0]:
        raise DegenerateConfigurationError("point configuration does not determine a homography")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    try:
        return normalize_homography(H)
    except SingularTransformError as exc:
        raise DegenerateConfigurationError(str(exc)) from exc


def reprojection_residuals(H, src, dst) -> np.ndarray:
    return (project_points(H, src) - np.asarray(dst, dtype=np.float64)).ravel()


def reprojection_cost(H, src, dst) -> float:
    """Sum of squared transfer errors ``sum |dst - H src|^2``."""
    r = reprojection_residuals(H, src, dst)
    return float(r @ r)


def reprojection_rmse(H, src, dst) -> float:
    return float(np.sqrt(reprojection_cost(H, src, dst) / len(np.asarray(src).reshape(-1, 2))))


@dataclass(frozen=True)
class LMSettings:
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    rel_tol: float = 1e-10
    max_iter: int = 100


def _residuals_and_jacobian(p: np.ndarray, src: np.ndarray, dst: np.ndarray):
    a, b, c, d, e, f, g, h = p
    x, y = src[:, 0], src[:, 1]
    w = g * x + h * y + 1.0
    u = (a * x + b * y + c) / w
    v = (d * x + e * y + f) / w
    r = np.empty(2 * len(x))
    r[0::2] = u - dst[:, 0]
    r[1::2] = v - dst[:, 1]
    J = np.zeros((2 * len(x), 8))
    J[0::2, 0] = x / w
    J[0::2, 1] = y / w
    J[0::2, 2] = 1.0 / w
    J[0::2, 6] = -x * u / w
    J[0::2, 7] = -y * u / w
    J[1::2, 3] = x / w
    J[1::2, 4] = y / w
    J[1::2, 5] = 1.0 / w
    J[1::2, 6] = -x * v / w
    J[1::2, 7] = -y * v / w
    return r, J


def refine_homography_lm(H0, src, dst, settings: LMSettings = LMSettings()) -> np.ndarray:
    """Levenberg-Marquardt minimisation of the reprojection cost over 8 entries.

    ``H[2, 2]`` stays pinned to 1. Iterations run in Hartley-normalised
    coordinates (the cost there is the original cost times a constant), with
    Marquardt diagonal damping. The returned matrix never has a higher cost
    than ``H0``.
    """
    src, dst = _check_pairs(src, dst)
    H0 = normalize_homography(H0)
    cost0 = reprojection_cost(H0, src, dst)
    if not np.isfinite(cost0):
        raise NumericalFailureError("initial residuals are not finite")

    Ts = hartley_normalization(src)
    Td = hartley_normalization(dst)
    s = project_points(Ts, src)
    d = project_points(Td, dst)
    Hn = normalize_homography(Td @ H0 @ np.linalg.inv(Ts))
    p = Hn.ravel()[:8].copy()

    r, J = _residuals_and_jacobian(p, s, d)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise NumericalFailureError("residuals are not finite")
    lam = settings.lambda0
    for _ in range(settings.max_iter):
        if cost == 0.0:
            break
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= settings.lambda_up
                continue
            p_new = p + step
            r_new, J_new = _residuals_and_jacobian(p_new, s, d)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                improved = True
                break
            lam *= settings.lambda_up
        if not improved:
            break
        rel_change = (cost - cost_new) / cost
        p, r, J, cost = p_new, r_new, J_new, cost_new
        lam = max(lam / settings.lambda_down, 1e-12)
        if rel_change < settings.rel_tol:
            break

    Hn = np.append(p, 1.0).reshape(3, 3)
    try:
        H = normalize_homography(np.linalg.inv(Td) @ Hn @ Ts)
    except SingularTransformError:
        return H0
    cost_out = reprojection_cost(H, src, dst)
    if not np.isfinite(cost_out):
        raise NumericalFailureError("refined homography yields non-finite residuals")
    return H if cost_out <= cost0 else H0


def homography_from_quads(src_quad, dst_quad) -> np.ndarray:
    """Exact homography taking 4 points onto 4 points (8x8 linear solve)."""
    s = np.asarray(src_quad, dtype=np.float64)
    d = np.asarray(dst_quad, dtype=np.float64)
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = s[i]
        u, v = d[i]
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    try:
        h = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("quadrilateral is degenerate") from exc
    return normalize_homography(np.append(h, 1.0).reshape(3, 3))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; vertices in positive (counter-clockwise) orientation.

    Collinear points on edges are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) < 3:
        raise DegenerateRegionError("need at least 3 distinct points for a region")
    lower: list = []
    for p in uniq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(uniq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateRegionError("all points are collinear")
    return np.array(hull, dtype=np.float64)


def _on_segment(p, a, b, eps: float = 1e-9) -> bool:
    cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    seg = np.hypot(b[0] - a[0], b[1] - a[1])
    if abs(cross) > eps * max(seg, 1.0):
        return False
    return (
        min(a[0], b[0]) - eps <= p[0] <= max(a[0], b[0]) + eps
        and min(a[1], b[1]) - eps <= p[1] <= max(a[1], b[1]) + eps
    )


def point_in_polygon(p, poly) -> bool:
    """Even-odd ray casting; points on an edge count as inside."""
    poly = np.asarray(poly, dtype=np.float64)
    x, y = float(p[0]), float(p[1])
    inside = False
    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        if _on_segment((x, y), a, b):
            return True
        if (a[1] > y) != (b[1] > y):
            xi = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if xi > x:
                inside = not inside
    return inside


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
        return True
    return _on_segment(p1, q1, q2) or _on_segment(p2, q1, q2) or _on_segment(q1, p1, p2) or _on_segment(q2, p1, p2)


def box_corners(bbox) -> np.ndarray:
    """Corners of ``(x0, y0, x1, y1)`` ordered top-left, top-right, bottom-right, bottom-left."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def box_polygon_relation(bbox, poly) -> str:
    """Classify a box against a polygon as ``inside``, ``crosses_border`` or ``outside``."""
    poly = np.asarray(poly, dtype=np.float64)
    corners = box_corners(bbox)
    flags = [point_in_polygon(c, poly) for c in corners]
    if all(flags):
        return INSIDE
    if any(flags):
        return CROSSES_BORDER
    x0, y0, x1, y1 = (float(v) for v in bbox)
    # polygon poking into the box without covering any corner
    if np.any((poly[:, 0] >= x0) & (poly[:, 0] <= x1) & (poly[:, 1] >= y0) & (poly[:, 1] <= y1)):
        return CROSSES_BORDER
    n = len(poly)
    for i in range(4):
        for j in range(n):
            if _segments_intersect(corners[i], corners[(i + 1) % 4], poly[j], poly[(j + 1) % n]):
                return CROSSES_BORDER
    return OUTSIDE


def inverse_transform_box(bbox, H) -> np.ndarray:
    """Map the corners of a page-space box back through ``H^-1``; corner order preserved."""
    Hinv = invert_homography(H)
    return project_points(Hinv, box_corners(bbox))


def corner_transfer_error(H_est, H_true, corners) -> np.ndarray:
    """Per-corner distance between the two mappings of ``corners``."""
    return np.linalg.norm(project_points(H_est, corners) - project_points(H_true, corners), axis=1)
