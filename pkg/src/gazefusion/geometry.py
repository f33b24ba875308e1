"""Gaze geometry: pixel/patch mapping, neighborhood selection, frame renderers.

Everything in this module is pure and deterministic.  Gaze points are
normalized to [0, 1] in both axes so the same track can serve several
resolutions (raw frames and the encoder input).  Frames are float arrays of
shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

VALID_NEIGHBORHOODS = (1, 5, 9, 25)


@dataclass(frozen=True)
class PatchGrid:
    """Tessellation of a frame into square patches, indexed row-major."""

    frame_height: int
    frame_width: int
    patch_size: int
    grid_rows: int
    grid_cols: int

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols


def make_grid(frame_height: int, frame_width: int, patch_size: int) -> PatchGrid:
    """Build the patch grid for a frame, discarding any partial border patches."""
    if frame_height <= 0 or frame_width <= 0:
        raise ValidationError(
            f"frame dims must be positive, got {frame_height}x{frame_width}"
        )
    if patch_size <= 0:
        raise ValidationError(f"patch_size must be positive, got {patch_size}")
    if patch_size > min(frame_height, frame_width):
        raise ValidationError(
            f"patch_size {patch_size} exceeds frame dims {frame_height}x{frame_width}"
        )
    return PatchGrid(
        frame_height=int(frame_height),
        frame_width=int(frame_width),
        patch_size=int(patch_size),
        grid_rows=int(frame_height) // int(patch_size),
        grid_cols=int(frame_width) // int(patch_size),
    )


def clamp_gaze(x: float, y: float) -> tuple[float, float]:
    """Clamp a gaze coordinate pair into [0, 1]; non-finite input is rejected."""
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValidationError(f"gaze coordinates must be finite, got ({x}, {y})")
    return float(min(max(x, 0.0), 1.0)), float(min(max(y, 0.0), 1.0))


def gaze_pixel(frame_height: int, frame_width: int, gaze: tuple[float, float]) -> tuple[int, int]:
    """Integer pixel (row, col) a normalized gaze point falls on."""
    x, y = gaze
    row = min(int(y * frame_height), frame_height - 1)
    col = min(int(x * frame_width), frame_width - 1)
    return max(row, 0), max(col, 0)


def gaze_to_rowcol(grid: PatchGrid, gaze: tuple[float, float]) -> tuple[int, int]:
    """Patch (row, col) containing the gaze point, clamped to the grid."""
    x, y = gaze
    row = min(int(np.floor(y * grid.frame_height / grid.patch_size)), grid.grid_rows - 1)
    col = min(int(np.floor(x * grid.frame_width / grid.patch_size)), grid.grid_cols - 1)
    return max(row, 0), max(col, 0)


def gaze_to_patch(grid: PatchGrid, gaze: tuple[float, float]) -> int:
    """Row-major index of the patch containing the gaze point."""
    row, col = gaze_to_rowcol(grid, gaze)
    return row * grid.grid_cols + col


def select_patch_neighborhood(
    grid: PatchGrid, gaze: tuple[float, float], h: int
) -> list[int]:
    """Select the ``h`` patches nearest to the gaze patch.

    Ordering key is (distance, row, col); distance is Manhattan for h=5 and
    Chebyshev otherwise, so at interior gaze patches the selection is the
    center patch, the 4-neighbor cross, the 3x3 block, or the 5x5 block for
    h = 1, 5, 9, 25 respectively.  Near borders the window slides to the
    nearest in-bounds patches, so exactly ``h`` distinct indices are always
    returned (static shapes for batching).
    """
    if h not in VALID_NEIGHBORHOODS:
        raise ValidationError(f"h must be one of {VALID_NEIGHBORHOODS}, got {h}")
    if grid.n_patches < h:
        raise ValidationError(
            f"grid has {grid.n_patches} patches, fewer than h={h}"
        )
    gr, gc = gaze_to_rowcol(grid, gaze)
    manhattan = h == 5

    radius = 0 if h == 1 else (1 if h in (5, 9) else 2)
    while True:
        r0, r1 = max(gr - radius, 0), min(gr + radius, grid.grid_rows - 1)
        c0, c1 = max(gc - radius, 0), min(gc + radius, grid.grid_cols - 1)
        rows = np.arange(r0, r1 + 1)
        cols = np.arange(c0, c1 + 1)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        dr = np.abs(rr - gr)
        dc = np.abs(cc - gc)
        dist = dr + dc if manhattan else np.maximum(dr, dc)
        keep = dist <= radius
        if int(keep.sum()) >= h:
            rr, cc, dist = rr[keep], cc[keep], dist[keep]
            order = np.lexsort((cc, rr, dist))
            sel = order[:h]
            return [int(r) * grid.grid_cols + int(c) for r, c in zip(rr[sel], cc[sel])]
        radius += 1


def _check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValidationError(f"frame must have shape (H, W, 3), got {frame.shape}")
    if not np.isfinite(frame).all():
        raise ValidationError("frame contains non-finite values")
    return frame


def render_dot_overlay(
    frame: np.ndarray, gaze: tuple[float, float], radius: float = 20.0
) -> np.ndarray:
    """Paint a pure green disk of the given pixel radius at the gaze point."""
    frame = _check_frame(frame)
    if radius <= 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    h, w = frame.shape[:2]
    py, px = gaze_pixel(h, w, gaze)
    out = frame.copy()
    yy, xx = np.ogrid[:h, :w]
    disk = (yy - py) ** 2 + (xx - px) ** 2 <= radius**2
    out[disk] = np.array([0.0, 1.0, 0.0], dtype=out.dtype)
    return out


def render_heatmap_mask(
    frame: np.ndarray,
    gaze: tuple[float, float],
    radius: float = 75.0,
    floor: float = 0.3,
) -> np.ndarray:
    """Multiply the frame by a Gaussian mask centered on the gaze pixel.

    The mask is ``floor + (1 - floor) * exp(-d^2 / (2 sigma^2))`` with
    ``sigma = radius / 2``: exactly 1 at the gaze pixel, decaying to the
    context floor far away so the surroundings stay visible.
    """
    frame = _check_frame(frame)
    if radius <= 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    if not 0.0 <= floor <= 1.0:
        raise ValidationError(f"floor must be in [0, 1], got {floor}")
    h, w = frame.shape[:2]
    py, px = gaze_pixel(h, w, gaze)
    sigma = radius / 2.0
    yy, xx = np.ogrid[:h, :w]
    d2 = (yy - py) ** 2 + (xx - px) ** 2
    mask = floor + (1.0 - floor) * np.exp(-d2 / (2.0 * sigma**2))
    return (frame * mask[:, :, None]).astype(frame.dtype)


def crop_gaze_centered(
    frame: np.ndarray, gaze: tuple[float, float], crop: int = 448
) -> np.ndarray:
    """Cut a crop x crop window centered on the gaze point.

    Near the frame border the window is translated to stay fully inside the
    frame rather than zero-padded, so the encoder never sees synthetic black.
    """
    frame = _check_frame(frame)
    h, w = frame.shape[:2]
    crop = int(crop)
    if crop <= 0 or crop > min(h, w):
        raise ValidationError(f"crop {crop} invalid for frame {h}x{w}")
    x, y = gaze
    sy = int(round(y * h - crop / 2.0))
    sx = int(round(x * w - crop / 2.0))
    sy = min(max(sy, 0), h - crop)
    sx = min(max(sx, 0), w - crop)
    return frame[sy : sy + crop, sx : sx + crop].copy()


def resize_bilinear(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize; identity when the size already matches."""
    frame = np.asarray(frame)
    h, w = frame.shape[:2]
    if (h, w) == (out_h, out_w):
        return frame.copy()
    # Pixel-center alignment: output pixel i samples input at (i + 0.5) * scale - 0.5.
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = frame[y0][:, x0] * (1 - wx) + frame[y0][:, x1] * wx
    bot = frame[y1][:, x0] * (1 - wx) + frame[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(frame.dtype)
