"""Arc-length parametrized race track centerline.

The centerline is a piecewise cubic in arc length ``theta`` with uniform
knots, obtained by fitting a cubic spline through the waypoints (chord-length
parameter), integrating its arc length numerically and re-fitting on samples
equally spaced in arc length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .config import load_toml


class TrackBuildError(ValueError):
    """The waypoints do not describe a valid track."""


class ProjectionError(RuntimeError):
    """Newton projection onto the centerline did not converge."""

    def __init__(self, message: str, theta: float):
        super().__init__(message)
        self.theta = theta


@dataclass(frozen=True)
class CenterlinePose:
    Xc: float
    Yc: float
    Phic: float
    curvature: float


@dataclass(frozen=True)
class ContouringErrors:
    """Contouring/lag errors and their gradients w.r.t. ``(X, Y, theta)``."""

    e_c: float
    e_l: float
    grad_c: np.ndarray
    grad_l: np.ndarray


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _arc_length(spline: CubicSpline, t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
    """Gauss-Legendre arc length of ``spline`` over each interval ``[t0, t1]``."""
    half = 0.5 * (t1 - t0)
    mid = 0.5 * (t1 + t0)
    tq = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    d = spline(tq, 1)
    speed = np.hypot(d[..., 0], d[..., 1])
    return half * (speed @ _GL_WEIGHTS)


class Track:
    """Immutable centerline geometry with half width ``r``."""

    def __init__(self, coeffs_x: np.ndarray, coeffs_y: np.ndarray, length: float,
                 half_width: float, closed: bool):
        if half_width <= 0:
            raise TrackBuildError("half width must be positive")
        self.cx = np.ascontiguousarray(coeffs_x, dtype=float)
        self.cy = np.ascontiguousarray(coeffs_y, dtype=float)
        self.n_segments = self.cx.shape[0]
        self.length = float(length)
        self.half_width = float(half_width)
        self.closed = bool(closed)
        self.h = self.length / self.n_segments
        self._rows = [tuple(row) for row in np.hstack([self.cx, self.cy]).tolist()]

    # -- evaluation ---------------------------------------------------------

    def _locate(self, theta: float) -> tuple[int, float]:
        if self.closed:
            theta = theta % self.length
        i = int(theta // self.h)
        if i < 0:
            i = 0
        elif i >= self.n_segments:
            i = self.n_segments - 1
        return i, theta - i * self.h

    def derivatives(self, theta: float) -> tuple[float, float, float, float, float, float]:
        """Position, first and second derivatives ``(X, Y, X', Y', X'', Y'')`` at ``theta``."""
        i, t = self._locate(float(theta))
        a3, a2, a1, a0, b3, b2, b1, b0 = self._rows[i]
        x = ((a3 * t + a2) * t + a1) * t + a0
        y = ((b3 * t + b2) * t + b1) * t + b0
        dx = (3.0 * a3 * t + 2.0 * a2) * t + a1
        dy = (3.0 * b3 * t + 2.0 * b2) * t + b1
        ddx = 6.0 * a3 * t + 2.0 * a2
        ddy = 6.0 * b3 * t + 2.0 * b2
        return x, y, dx, dy, ddx, ddy

    def derivatives_array(self, theta) -> np.ndarray:
        """Vectorized :meth:`derivatives`; returns an array of shape ``(len(theta), 6)``."""
        theta = np.asarray(theta, dtype=float)
        if self.closed:
            theta = np.mod(theta, self.length)
        idx = np.clip((theta // self.h).astype(int), 0, self.n_segments - 1)
        t = theta - idx * self.h
        a, b = self.cx[idx], self.cy[idx]
        out = np.empty(theta.shape + (6,))
        out[..., 0] = ((a[..., 0] * t + a[..., 1]) * t + a[..., 2]) * t + a[..., 3]
        out[..., 1] = ((b[..., 0] * t + b[..., 1]) * t + b[..., 2]) * t + b[..., 3]
        out[..., 2] = (3 * a[..., 0] * t + 2 * a[..., 1]) * t + a[..., 2]
        out[..., 3] = (3 * b[..., 0] * t + 2 * b[..., 1]) * t + b[..., 2]
        out[..., 4] = 6 * a[..., 0] * t + 2 * a[..., 1]
        out[..., 5] = 6 * b[..., 0] * t + 2 * b[..., 1]
        return out

    def eval_centerline(self, theta: float) -> CenterlinePose:
        x, y, dx, dy, ddx, ddy = self.derivatives(theta)
        speed2 = dx * dx + dy * dy
        curvature = (dx * ddy - dy * ddx) / speed2 ** 1.5
        return CenterlinePose(x, y, math.atan2(dy, dx), curvature)

    def position(self, theta: float) -> np.ndarray:
        x, y, *_ = self.derivatives(theta)
        return np.array([x, y])

    def sample(self, n: int) -> np.ndarray:
        """``n`` centerline points equally spaced in arc length (shape ``(n, 2)``)."""
        theta = np.linspace(0.0, self.length, n, endpoint=not self.closed)
        return self.derivatives_array(theta)[:, :2]

    # -- projection ---------------------------------------------------------

    def project(self, position, theta_hint: float, max_iter: int = 20, tol: float = 1e-8) -> float:
        """Local projection of ``position`` on the centerline by Newton's method.

        The returned ``theta`` is not wrapped, so it stays continuous with the hint.
        """
        px, py = float(position[0]), float(position[1])
        theta = float(theta_hint)
        for _ in range(max_iter):
            x, y, dx, dy, ddx, ddy = self.derivatives(theta)
            ex, ey = px - x, py - y
            grad = -(ex * dx + ey * dy)
            if abs(grad) <= tol:
                return theta
            hess = dx * dx + dy * dy - (ex * ddx + ey * ddy)
            if hess <= 1e-3:
                hess = dx * dx + dy * dy
            step = -grad / hess
            if step > self.h:
                step = self.h
            elif step < -self.h:
                step = -self.h
            theta += step
            if not self.closed:
                theta = min(max(theta, 0.0), self.length)
        x, y, dx, dy, _, _ = self.derivatives(theta)
        grad = -((px - x) * dx + (py - y) * dy)
        if abs(grad) <= tol:
            return theta
        raise ProjectionError(f"projection did not converge (|grad|={abs(grad):.2e})", theta)

    def global_project(self, position, n_grid: int | None = None) -> float:
        """Projection without a hint: coarse grid search refined by Newton."""
        n_grid = n_grid or max(200, 4 * self.n_segments)
        theta = np.linspace(0.0, self.length, n_grid, endpoint=not self.closed)
        pts = self.derivatives_array(theta)[:, :2]
        d2 = np.sum((pts - np.asarray(position, dtype=float)[:2]) ** 2, axis=1)
        hint = float(theta[np.argmin(d2)])
        try:
            return self.project(position, hint)
        except ProjectionError as err:
            return err.theta

    def distance(self, position, theta: float) -> float:
        x, y, *_ = self.derivatives(theta)
        return math.hypot(float(position[0]) - x, float(position[1]) - y)

    def lateral_violation(self, position, margin: float = 0.0, theta_hint: float | None = None) -> float:
        """Signed distance ``||pos - c(theta~)|| - (r - margin)``; ``<= 0`` means inside."""
        if margin < 0:
            raise ValueError("margin must be non-negative")
        if theta_hint is None:
            theta = self.global_project(position)
        else:
            theta = self.project(position, theta_hint)
        return self.distance(position, theta) - (self.half_width - margin)

    def contouring_errors(self, x, theta: float) -> ContouringErrors:
        """Contouring error ``e_c`` and lag error ``e_l`` of state ``x`` at ``theta``."""
        xc, yc, dx, dy, ddx, ddy = self.derivatives(theta)
        speed = math.hypot(dx, dy)
        cos_p, sin_p = dx / speed, dy / speed
        dphi = (dx * ddy - dy * ddx) / (speed * speed)
        ex, ey = float(x[0]) - xc, float(x[1]) - yc
        e_c = sin_p * ex - cos_p * ey
        e_l = -cos_p * ex - sin_p * ey
        grad_c = np.array([sin_p, -cos_p, -dphi * e_l])
        grad_l = np.array([-cos_p, -sin_p, dphi * e_c + speed])
        return ContouringErrors(e_c, e_l, grad_c, grad_l)

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "half_width": self.half_width,
            "closed": self.closed,
            "coeffs_x": self.cx.tolist(),
            "coeffs_y": self.cy.tolist(),
        }


def build_track(waypoints, half_width: float, closed: bool = True, spacing: float = 0.02) -> Track:
    """Fit an arc-length parametrized cubic centerline through ``waypoints``.

    Args:
        waypoints: ``(n, 2)`` points in meters, ``n >= 4``. For closed tracks
            the first point must not be repeated at the end.
        half_width: Half of the track width ``r`` in meters.
        closed: Whether the track is a loop.
        spacing: Target knot spacing of the arc-length spline in meters.

    Raises:
        TrackBuildError: On too few or duplicate waypoints, or when the track
            overlaps itself within its width.
    """
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise TrackBuildError("waypoints must have shape (n, 2)")
    if pts.shape[0] < 4:
        raise TrackBuildError("at least 4 waypoints are required")
    if not np.all(np.isfinite(pts)):
        raise TrackBuildError("waypoints must be finite")
    if half_width <= 0:
        raise TrackBuildError("half width must be positive")
    seg = np.diff(np.vstack([pts, pts[:1]]) if closed else pts, axis=0)
    chord = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(chord < 1e-9):
        raise TrackBuildError("duplicate consecutive waypoints")

    t = np.concatenate([[0.0], np.cumsum(chord)])
    if closed:
        spline = CubicSpline(t, np.vstack([pts, pts[:1]]), bc_type="periodic")
    else:
        spline = CubicSpline(t, pts, bc_type="natural")

    # arc-length table on a fine grid in the chord parameter
    sub = 32
    tf = np.concatenate([np.linspace(t[i], t[i + 1], sub, endpoint=False) for i in range(len(t) - 1)] + [t[-1:]])
    ds = _arc_length(spline, tf[:-1], tf[1:])
    s_table = np.concatenate([[0.0], np.cumsum(ds)])
    length = float(s_table[-1])

    n = max(int(math.ceil(length / spacing)), 4 * pts.shape[0])
    theta = np.linspace(0.0, length, n + 1)
    tk = np.interp(theta, s_table, tf)
    # Newton refinement of s(t) = theta on each sample
    for _ in range(3):
        idx = np.clip(np.searchsorted(tf, tk, side="right") - 1, 0, len(tf) - 2)
        s_at = s_table[idx] + _arc_length(spline, tf[idx], tk)
        d = spline(tk, 1)
        tk = tk - (s_at - theta) / np.hypot(d[:, 0], d[:, 1])
    samples = spline(tk)
    if closed:
        samples[-1] = samples[0]
        fit = CubicSpline(theta, samples, bc_type="periodic")
    else:
        fit = CubicSpline(theta, samples, bc_type="natural")
    coeffs_x = fit.c[:, :, 0].T.copy()
    coeffs_y = fit.c[:, :, 1].T.copy()
    track = Track(coeffs_x, coeffs_y, length, half_width, closed)
    _check_geometry(track)
    return track


def _check_geometry(track: Track) -> None:
    r = track.half_width
    n = max(int(math.ceil(track.length / min(r / 4.0, track.h))), 16)
    theta = np.linspace(0.0, track.length, n, endpoint=not track.closed)
    d = track.derivatives_array(theta)
    speed = np.hypot(d[:, 2], d[:, 3])
    curvature = np.abs(d[:, 2] * d[:, 5] - d[:, 3] * d[:, 4]) / speed ** 3
    if np.any(curvature * r >= 1.0):
        raise TrackBuildError("centerline curvature radius smaller than half width")
    sep = np.abs(theta[:, None] - theta[None, :])
    if track.closed:
        sep = np.minimum(sep, track.length - sep)
    dist = np.hypot(d[:, None, 0] - d[None, :, 0], d[:, None, 1] - d[None, :, 1])
    if np.any((sep >= math.pi * r) & (dist < 2.0 * r)):
        raise TrackBuildError("track overlaps itself within its width")


def load_track(path: str | Path) -> Track:
    """Load a track file with keys ``width``, ``closed`` and ``waypoints``."""
    data = load_toml(path)
    unknown = set(data) - {"width", "closed", "waypoints", "spacing"}
    if unknown:
        raise TrackBuildError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("width", "closed", "waypoints"):
        if key not in data:
            raise TrackBuildError(f"{path}: missing key '{key}'")
    return build_track(
        data["waypoints"],
        0.5 * float(data["width"]),
        bool(data["closed"]),
        float(data.get("spacing", 0.02)),
    )
