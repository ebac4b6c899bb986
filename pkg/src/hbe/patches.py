"""Image-to-patch plumbing: extraction, similarity search, grouping, aggregation.

Images are plain 2-d float arrays (rows, cols); a patch index is the (top,
left) corner of a side x side window, vectorized row-major to length side**2.
Similarity is always measured in a fully-populated oracle image, with pixels
that were originally missing down-weighted in the distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

UNKNOWN_WEIGHT = 0.01


@dataclass(frozen=True)
class SearchConfig:
    """Similarity-search settings.

    epsilon scales the distance to the nearest neighbour into the admission
    threshold; step is the anchor-grid stride; min_group the smallest group
    the solver will model on its own.
    """

    patch_side: int = 8
    window_side: int = 25
    epsilon: float = 1.5
    step: int = 1
    min_group: int = 2

    def __post_init__(self):
        if self.window_side < self.patch_side:
            raise ValueError("window_side must be at least patch_side")
        if self.epsilon < 1:
            raise ValueError("epsilon must be at least 1")
        if self.step < 1 or self.min_group < 1:
            raise ValueError("step and min_group must be at least 1")


@dataclass
class PatchGroup:
    """A set of mutually similar patch positions sharing one model."""

    anchor: tuple
    members: list
    distances: np.ndarray = field(default_factory=lambda: np.zeros(1))


def check_patch_bounds(image, idx, side):
    top, left = idx
    h, w = image.shape
    if top < 0 or left < 0 or top + side > h or left + side > w:
        raise ValueError(
            f"patch at {idx} with side {side} exceeds image bounds {h}x{w}"
        )


def extract_patch(image, idx, side):
    """Row-major vectorization of the side x side window at idx=(top, left)."""
    image = np.asarray(image, dtype=np.float64)
    check_patch_bounds(image, idx, side)
    top, left = idx
    return image[top:top + side, left:left + side].flatten()


def patch_distance(a, b, mask_a, mask_b, unknown_weight=UNKNOWN_WEIGHT):
    """Weighted mean squared distance between two patches.

    Pixels known in both patches weigh 1, all others weigh unknown_weight,
    and the sum is normalized by the total weight.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("patches must have equal length")
    if not 0 < unknown_weight <= 1:
        raise ValueError("unknown_weight must lie in (0, 1]")
    w = np.where(
        (np.asarray(mask_a) == 1) & (np.asarray(mask_b) == 1), 1.0, unknown_weight
    )
    return float((w * (a - b) ** 2).sum() / w.sum())


class WindowIndex:
    """Sliding-window views over an oracle image and its mask, shared across
    many find_similar calls within one pipeline iteration."""

    def __init__(self, oracle, mask, side):
        self.oracle = np.ascontiguousarray(oracle, dtype=np.float64)
        self.mask = np.ascontiguousarray(mask, dtype=np.float64)
        if self.oracle.shape != self.mask.shape:
            raise ValueError("oracle and mask must have equal shape")
        h, w = self.oracle.shape
        if side > h or side > w:
            raise ValueError(f"patch side {side} exceeds image {h}x{w}")
        self.side = side
        self.n = side * side
        self.owin = sliding_window_view(self.oracle, (side, side))
        self.mwin = sliding_window_view(self.mask, (side, side))
        self.grid_h, self.grid_w = self.owin.shape[:2]

    def patch(self, idx):
        return self.owin[idx].reshape(self.n)

    def mask_patch(self, idx):
        return self.mwin[idx].reshape(self.n)

    def search(self, anchor, cfg):
        at, al = anchor
        if not (0 <= at < self.grid_h and 0 <= al < self.grid_w):
            raise ValueError(f"anchor {anchor} out of bounds")
        half = cfg.window_side // 2
        t0, t1 = max(0, at - half), min(self.grid_h - 1, at + half)
        l0, l1 = max(0, al - half), min(self.grid_w - 1, al + half)
        cand = self.owin[t0:t1 + 1, l0:l1 + 1].reshape(-1, self.n)
        cand_mask = self.mwin[t0:t1 + 1, l0:l1 + 1].reshape(-1, self.n)
        a = self.patch(anchor)
        ma = self.mask_patch(anchor)
        w = np.where((cand_mask == 1) & (ma[None, :] == 1), 1.0, UNKNOWN_WEIGHT)
        d = np.einsum("ij,ij->i", w, (cand - a[None, :]) ** 2) / w.sum(axis=1)

        ncols = l1 - l0 + 1
        tops = t0 + np.arange(t1 - t0 + 1)
        lefts = l0 + np.arange(ncols)
        raster = (tops[:, None] * self.grid_w + lefts[None, :]).ravel()
        a_flat = (at - t0) * ncols + (al - l0)
        d[a_flat] = 0.0

        others = np.ones(d.shape[0], dtype=bool)
        others[a_flat] = False
        if not others.any():
            return PatchGroup(anchor, [anchor], np.zeros(1))
        d_others = d[others]
        nearest = float(d_others.min())
        threshold = cfg.epsilon * nearest
        admit = (d <= threshold) | ~others  # anchor always included
        idx = np.flatnonzero(admit)
        order = idx[np.lexsort((raster[idx], d[idx]))]
        cap = cfg.window_side * cfg.window_side
        order = order[:cap]
        members = [(int(r // self.grid_w), int(r % self.grid_w)) for r in raster[order]]
        return PatchGroup(anchor, members, d[order].copy())


def find_similar(oracle, masks, anchor, cfg):
    """Group the patches in the search window whose weighted distance to the
    anchor patch is within epsilon times the nearest-neighbour distance.

    The anchor is excluded when determining the nearest neighbour but is
    always a member. Members are sorted by ascending distance (ties broken by
    raster index) and capped at window_side**2.
    """
    return WindowIndex(oracle, masks, cfg.patch_side).search(anchor, cfg)


def group_collaborative(groups):
    """Greedy raster-order sweep assigning one model per group of patches.

    A group whose anchor is already a member of an earlier kept group is
    dropped (the anchor inherits that group's model), so every anchor position
    stays covered by at least one kept group.
    """
    covered = set()
    kept = []
    for g in groups:
        if g.anchor in covered:
            continue
        kept.append(g)
        covered.update(g.members)
    return kept


def aggregate(patches, width, height, side):
    """Per-pixel uniform average of all patch estimates covering each pixel."""
    acc = np.zeros((height, width))
    cnt = np.zeros((height, width))
    for (top, left), vec in patches:
        block = np.asarray(vec, dtype=np.float64).reshape(side, side)
        acc[top:top + side, left:left + side] += block
        cnt[top:top + side, left:left + side] += 1.0
    if np.any(cnt == 0):
        r, c = np.argwhere(cnt == 0)[0]
        raise RuntimeError(f"pixel ({r}, {c}) is covered by no patch")
    return acc / cnt


def anchor_grid(height, width, side, step):
    """Anchor corners covering the whole image: a stride-step lattice clamped
    so the last row/column of patches touches the image border."""
    tops = list(range(0, height - side + 1, step))
    if tops[-1] != height - side:
        tops.append(height - side)
    lefts = list(range(0, width - side + 1, step))
    if lefts[-1] != width - side:
        lefts.append(width - side)
    return [(t, l) for t in tops for l in lefts]
