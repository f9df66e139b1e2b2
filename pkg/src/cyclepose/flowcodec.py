"""Instance masks <-> gradient-flow representation.

A flow target is a float32 array of shape (3, H, W): vertical flow, horizontal
flow, and the foreground probability (binary as a target).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels


@dataclass(frozen=True)
class DecodeConfig:
    prob_threshold: float = 0.5
    niter: int = 200
    step: float = 1.0
    merge_radius: float = 2.5
    min_size: int = 15


def heat_source(ys: np.ndarray, xs: np.ndarray) -> int:
    """Index of the instance pixel closest to the per-axis median."""
    ymed, xmed = np.median(ys), np.median(xs)
    return int(np.argmin((ys - ymed) ** 2 + (xs - xmed) ** 2))


def encode_flows(mask: np.ndarray) -> np.ndarray:
    """Diffuse heat from each instance's centre and return normalised gradients.

    For every instance independently, a unit of heat is injected at the
    pixel nearest the median coordinate and spread by 3x3 mean filtering
    confined to the instance for ``2 * (height + width)`` sweeps of its
    bounding box.  Flows are central differences of ``log(1 + heat)``,
    normalised per pixel.  Single-pixel instances get zero flow.
    """
    H, W = mask.shape
    out = np.zeros((3, H, W), dtype=np.float32)
    out[2] = mask > 0
    for k, sl in enumerate(ndimage.find_objects(mask), start=1):
        if sl is None:
            continue
        sr, sc = sl
        ys, xs = np.nonzero(mask[sl] == k)
        if ys.size < 2:
            continue
        ly, lx = sr.stop - sr.start, sc.stop - sc.start
        width = lx + 2
        ys = ys.astype(np.int64) + 1
        xs = xs.astype(np.int64) + 1
        src = heat_source(ys, xs)
        niter = max(2 * int(np.ptp(ys) + np.ptp(xs)), 1)
        T = np.zeros((ly + 2) * width, dtype=np.float64)
        T = kernels.diffuse(T, ys, xs, ys[src], xs[src], width, niter)
        idx = ys * width + xs
        T[idx] = np.log1p(T[idx])
        dy = T[idx + width] - T[idx - width]
        dx = T[idx + 1] - T[idx - 1]
        norm = np.sqrt(dy * dy + dx * dx)
        nz = norm > 0
        dy[nz] /= norm[nz]
        dx[nz] /= norm[nz]
        out[0, sr.start + ys - 1, sc.start + xs - 1] = dy
        out[1, sr.start + ys - 1, sc.start + xs - 1] = dx
    return out


def cluster_points(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage clusters of ``points`` cut at ``radius``.

    Equivalent to hierarchical merging with that distance threshold; labels
    are 0-based and ordered by first occurrence.
    """
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    _, first = np.unique(comp, return_index=True)
    order = np.empty(len(first), dtype=np.int64)
    order[np.argsort(first)] = np.arange(len(first))
    return order[comp]


def follow(flows: np.ndarray, fg: np.ndarray, cfg: DecodeConfig) -> np.ndarray:
    """Terminal positions, shape (N, 2), of all ``fg`` pixels after integration."""
    ys, xs = np.nonzero(fg)
    p = np.stack([ys, xs], axis=1).astype(np.float64)
    dP = np.ascontiguousarray(flows[:2], dtype=np.float64)
    return kernels.follow_flows(p, dP, int(cfg.niter), float(cfg.step))


def decode_flows(flows: np.ndarray, cfg: DecodeConfig | None = None, *,
                 prob_threshold: float | None = None) -> np.ndarray:
    """Group foreground pixels by where their flow trajectories end.

    ``flows[2]`` must already be a probability (apply a sigmoid to network
    logits first).  Returns a compact int32 label image.
    """
    cfg = cfg or DecodeConfig()
    thr = cfg.prob_threshold if prob_threshold is None else prob_threshold
    H, W = flows.shape[1:]
    fg = flows[2] > thr
    labels = np.zeros((H, W), dtype=np.int32)
    if not fg.any():
        return labels
    ends = follow(flows, fg, cfg)
    ids = cluster_points(ends, cfg.merge_radius)
    sizes = np.bincount(ids)
    keep = sizes >= cfg.min_size
    lut = np.zeros(len(sizes), dtype=np.int32)
    lut[keep] = np.arange(1, keep.sum() + 1, dtype=np.int32)
    labels[fg] = lut[ids]
    return labels


# ---------------------------------------------------------------------------
# on-disk cache
# ---------------------------------------------------------------------------

def mask_digest(mask: np.ndarray) -> str:
    h = hashlib.sha1()
    h.update(str((mask.shape, str(mask.dtype))).encode())
    h.update(np.ascontiguousarray(mask).tobytes())
    return h.hexdigest()


def save_flows(path, flows: np.ndarray) -> None:
    import tifffile

    tifffile.imwrite(path, np.asarray(flows, dtype=np.float32), photometric="minisblack")


def load_flows(path) -> np.ndarray:
    import tifffile

    flows = tifffile.imread(path).astype(np.float32)
    if flows.ndim != 3 or flows.shape[0] != 3:
        raise ValueError(f"{path}: expected a (3, H, W) flow stack, got {flows.shape}")
    return flows


class FlowCache:
    """Flow targets stored as float32 TIFF files named by mask content hash."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, mask: np.ndarray) -> Path:
        return self.root / f"{mask_digest(mask)}.tif"

    def get(self, mask: np.ndarray) -> np.ndarray:
        path = self.path_for(mask)
        if path.exists():
            return load_flows(path)
        flows = encode_flows(mask)
        tmp = path.with_suffix(f".{os.getpid()}.tmp.tif")
        save_flows(tmp, flows)
        os.replace(tmp, path)
        return flows
