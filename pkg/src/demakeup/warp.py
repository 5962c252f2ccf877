"""Dense landmark-driven warping.

Fits a thin-plate-spline displacement field to 68-point correspondences and
resamples images with it, so a non-makeup reference can be brought into
pixel alignment with its makeup counterpart before any pixel-wise loss is
computed.
"""

from __future__ import annotations

import numpy as np

NUM_KEYPOINTS = 68

# Control points closer than this (in px) are merged before solving.
_MERGE_TOL = 1e-9
# Added to the kernel diagonal; keeps the augmented system well conditioned
# while leaving landmark interpolation exact to well below 1e-6 px.
KERNEL_REGULARIZATION = 1e-8


class DegenerateLandmarksError(ValueError):
    """Landmark configuration leaves the TPS solve singular."""


def validate_keypoints(points, name: str = "keypoints") -> np.ndarray:
    """Check shape (68, 2) and finiteness; returns a float64 copy."""
    pts = np.array(points, dtype=np.float64)
    if pts.shape != (NUM_KEYPOINTS, 2):
        raise ValueError(
            f"{name}: expected {NUM_KEYPOINTS} (row, col) points, got shape {pts.shape}"
        )
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name}: coordinates must be finite")
    return pts


def load_keypoints(path) -> np.ndarray:
    """Read a keypoint file: 68 lines of "row col" decimal coordinates."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'row col', got {raw!r}")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return validate_keypoints(np.array(rows, dtype=np.float64).reshape(-1, 2), name=str(path))


def save_keypoints(path, points) -> None:
    pts = validate_keypoints(points)
    with open(path, "w") as fh:
        for r, c in pts:
            fh.write(f"{r:.6f} {c:.6f}\n")


def _tps_kernel(sq_dists: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r, continuously extended with U(0) = 0.
    # Evaluated as 0.5 * r^2 * log(r^2) to avoid the square root.
    out = np.zeros_like(sq_dists)
    mask = sq_dists > 0.0
    out[mask] = 0.5 * sq_dists[mask] * np.log(sq_dists[mask])
    return out


def _merge_duplicates(points: np.ndarray, values: np.ndarray):
    keys = np.round(points / _MERGE_TOL).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    if uniq.shape[0] == points.shape[0]:
        return points, values
    n = uniq.shape[0]
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    merged_pts = np.stack(
        [np.bincount(inverse, weights=points[:, d], minlength=n) / counts for d in range(2)],
        axis=1,
    )
    merged_vals = np.stack(
        [
            np.bincount(inverse, weights=values[:, d], minlength=n) / counts
            for d in range(values.shape[1])
        ],
        axis=1,
    )
    return merged_pts, merged_vals


def _check_not_degenerate(points: np.ndarray) -> None:
    if points.shape[0] < 3:
        raise DegenerateLandmarksError(
            f"only {points.shape[0]} distinct landmarks after merging; "
            "need at least 3 non-collinear points, TPS system is singular"
        )
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-8 * max(s[0], 1.0):
        raise DegenerateLandmarksError(
            "landmarks are collinear (or coincident); the affine block of the "
            "TPS system is rank deficient and the solve is singular"
        )


class ThinPlateSpline:
    """Scattered-data interpolant: r^2 log r radial basis plus affine term.

    Solves the standard augmented system [[K + lam*I, Q], [Q^T, 0]] once per
    value column. Interpolates the given values exactly at the control points
    (up to the diagonal regularization) and reproduces any affine field,
    translations in particular, exactly everywhere.
    """

    def __init__(self, control_points, values, regularization: float = KERNEL_REGULARIZATION):
        pts = np.asarray(control_points, dtype=np.float64)
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] != vals.shape[0]:
            raise ValueError("expected control points (n, 2) with matching value rows")
        pts, vals = _merge_duplicates(pts, vals)
        _check_not_degenerate(pts)
        n = pts.shape[0]
        sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = _tps_kernel(sq) + regularization * np.eye(n)
        poly = np.hstack([np.ones((n, 1)), pts])
        system[:n, n:] = poly
        system[n:, :n] = poly.T
        rhs = np.zeros((n + 3, vals.shape[1]))
        rhs[:n] = vals
        try:
            coef = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as exc:
            raise DegenerateLandmarksError(f"singular TPS system: {exc}") from exc
        self.control_points = pts
        self._weights = coef[:n]
        self._affine = coef[n:]

    def __call__(self, points) -> np.ndarray:
        """Evaluate at (m, 2) query points; returns (m, d) values."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        sq = ((pts[:, None, :] - self.control_points[None, :, :]) ** 2).sum(axis=-1)
        return _tps_kernel(sq) @ self._weights + self._affine[0] + pts @ self._affine[1:]


def fit_warp_spline(dst_kps, src_kps) -> ThinPlateSpline:
    """Spline mapping destination-frame points to source-sampling offsets.

    Evaluated at dst_kps[i] the spline returns src_kps[i] - dst_kps[i].
    """
    dst = validate_keypoints(dst_kps, name="dst_kps")
    src = validate_keypoints(src_kps, name="src_kps")
    return ThinPlateSpline(dst, src - dst)


def compute_warp_field(dst_kps, src_kps, height: int, width: int) -> np.ndarray:
    """Dense (H, W, 2) displacement field, (dr, dc) source offsets per pixel."""
    if height < 8 or width < 8:
        raise ValueError(f"height and width must be >= 8, got {height}x{width}")
    spline = fit_warp_spline(dst_kps, src_kps)
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    grid = np.stack([rows.ravel(), cols.ravel()], axis=1)
    field = np.empty((height * width, 2))
    chunk = 16384  # caps the (points x controls) kernel matrix at ~9 MB
    for start in range(0, grid.shape[0], chunk):
        field[start : start + chunk] = spline(grid[start : start + chunk])
    return field.reshape(height, width, 2)


def apply_warp(image, field) -> np.ndarray:
    """Backward warp: output(p) = bilinear_sample(image, p + field(p)).

    Out-of-bounds sample coordinates clamp to the edge pixels, so output
    values are always convex combinations of input values.
    """
    img = np.asarray(image)
    fld = np.asarray(field, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be HxW or HxWxC, got shape {img.shape}")
    h, w = img.shape[:2]
    if fld.shape != (h, w, 2):
        raise ValueError(f"field shape {fld.shape} does not match image spatial shape {(h, w)}")
    rows, cols = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    src_r = np.clip(rows + fld[..., 0], 0.0, float(h - 1))
    src_c = np.clip(cols + fld[..., 1], 0.0, float(w - 1))
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = src_r - r0
    fc = src_c - c0
    if img.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    data = img.astype(np.float64, copy=False)
    out = (
        (1.0 - fr) * (1.0 - fc) * data[r0, c0]
        + (1.0 - fr) * fc * data[r0, c1]
        + fr * (1.0 - fc) * data[r1, c0]
        + fr * fc * data[r1, c1]
    )
    if np.issubdtype(img.dtype, np.floating):
        return out.astype(img.dtype, copy=False)
    return out


def warp_ground_truth(y_image, kps_y, kps_x) -> np.ndarray:
    """Warp the non-makeup reference so its landmarks land on the makeup frame's.

    Returns W with W(kps_x[i]) sampling y_image at kps_y[i]; frame size is
    taken from y_image (pairs share one frame in this pipeline).
    """
    img = np.asarray(y_image)
    h, w = img.shape[:2]
    field = compute_warp_field(kps_x, kps_y, h, w)
    return apply_warp(img, field)
