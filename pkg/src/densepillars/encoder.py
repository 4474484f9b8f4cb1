"""Pillarization, feature decoration, the pillar feature network, and the
scatter step that builds the 2D pseudo-image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pointcloud import PointCloud
from .tensor import ConfigurationError, InvariantViolation, Tensor


@dataclass
class GridSpec:
    x_range: tuple = (0.0, 69.12)
    y_range: tuple = (-39.68, 39.68)
    z_range: tuple = (-3.0, 1.0)
    pillar_size: tuple = (0.16, 0.16)
    max_points_per_pillar: int = 32
    max_pillars: int = 12000
    feature_channels: int = 64

    def __post_init__(self):
        px, py = self.pillar_size
        for lo, hi, p in ((*self.x_range, px), (*self.y_range, py)):
            n = (hi - lo) / p
            if abs(n - round(n)) > 1e-6:
                raise ConfigurationError("range extent must be a multiple of pillar size")
        if self.width % 8 or self.height % 8:
            raise ConfigurationError(
                f"grid {self.height}x{self.width} must be divisible by 8 for the backbone"
            )

    @property
    def width(self) -> int:  # cells along x
        return round((self.x_range[1] - self.x_range[0]) / self.pillar_size[0])

    @property
    def height(self) -> int:  # cells along y
        return round((self.y_range[1] - self.y_range[0]) / self.pillar_size[1])


@dataclass
class PillarBatch:
    features: np.ndarray  # [P, max_points, C] (C=4 raw, C=9 decorated)
    coords: np.ndarray  # [P, 2] int (row = y index, col = x index)
    counts: np.ndarray  # [P]


def pillarize(cloud: PointCloud, g: GridSpec, seed: int = 0, cap: bool = True) -> PillarBatch:
    """Group in-range points into pillars of raw xyzr slots.

    Ranges are half-open; overfull pillars are subsampled uniformly with the
    given seed. With `cap` False (inference) all non-empty pillars are kept.
    """
    pts = cloud.points.astype(np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    keep = (
        (x >= g.x_range[0]) & (x < g.x_range[1])
        & (y >= g.y_range[0]) & (y < g.y_range[1])
        & (z >= g.z_range[0]) & (z < g.z_range[1])
    )
    pts = pts[keep]
    if pts.shape[0] == 0:
        return PillarBatch(
            np.zeros((0, g.max_points_per_pillar, 4), dtype=np.float32),
            np.zeros((0, 2), dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )
    col = np.floor((pts[:, 0] - g.x_range[0]) / g.pillar_size[0]).astype(np.int64)
    row = np.floor((pts[:, 1] - g.y_range[0]) / g.pillar_size[1]).astype(np.int64)
    lin = row * g.width + col

    rng = np.random.default_rng(seed)
    uniq, inverse, counts_all = np.unique(lin, return_inverse=True, return_counts=True)
    order = np.argsort(inverse, kind="stable")  # point indices grouped by pillar

    pillar_ids = np.arange(uniq.shape[0])
    if cap and uniq.shape[0] > g.max_pillars:
        chosen = np.sort(rng.choice(uniq.shape[0], size=g.max_pillars, replace=False))
        pillar_ids = chosen

    s = g.max_points_per_pillar
    features = np.zeros((pillar_ids.shape[0], s, 4), dtype=np.float32)
    coords = np.zeros((pillar_ids.shape[0], 2), dtype=np.int64)
    counts = np.zeros(pillar_ids.shape[0], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts_all)])
    for out_i, pid in enumerate(pillar_ids):
        members = order[starts[pid] : starts[pid + 1]]
        if members.shape[0] > s:
            members = members[np.sort(rng.choice(members.shape[0], size=s, replace=False))]
        n = members.shape[0]
        features[out_i, :n] = pts[members].astype(np.float32)
        coords[out_i] = (uniq[pid] // g.width, uniq[pid] % g.width)
        counts[out_i] = n
    return PillarBatch(features, coords, counts)


def decorate(batch: PillarBatch, g: GridSpec) -> PillarBatch:
    """Expand raw xyzr slots into the 9-channel decorated features."""
    p, s, c = batch.features.shape
    if c != 4:
        raise ConfigurationError("decorate expects raw 4-channel pillar features")
    out = np.zeros((p, s, 9), dtype=np.float32)
    if p == 0:
        return PillarBatch(out, batch.coords, batch.counts)
    feats = batch.features.astype(np.float64)
    mask = np.arange(s)[None, :] < batch.counts[:, None]  # [P, S]
    out[:, :, :4] = batch.features

    cnt = np.maximum(batch.counts, 1).astype(np.float64)[:, None]
    mean = (feats[:, :, :3] * mask[:, :, None]).sum(axis=1) / cnt  # [P, 3]
    out[:, :, 4:7] = np.where(
        mask[:, :, None], feats[:, :, :3] - mean[:, None, :], 0.0
    ).astype(np.float32)

    cell_x = g.x_range[0] + (batch.coords[:, 1] + 0.5) * g.pillar_size[0]
    cell_y = g.y_range[0] + (batch.coords[:, 0] + 0.5) * g.pillar_size[1]
    center = np.stack([cell_x, cell_y], axis=1)  # [P, 2]
    out[:, :, 7:9] = np.where(
        mask[:, :, None], feats[:, :, :2] - center[:, None, :], 0.0
    ).astype(np.float32)
    return PillarBatch(out, batch.coords, batch.counts)


@dataclass
class PFNWeights:
    weight: Tensor  # [9, feature_channels]
    bn: T.BatchNormParams

    @staticmethod
    def create(g: GridSpec, rng: np.random.Generator):
        c = g.feature_channels
        std = np.sqrt(2.0 / c)
        w = rng.normal(0.0, std, size=(9, c)).astype(np.float32)
        return PFNWeights(Tensor(w, requires_grad=True), T.BatchNormParams.create(c))

    def named_params(self, prefix="pfn"):
        return {
            f"{prefix}.weight": self.weight,
            f"{prefix}.bn.gamma": self.bn.gamma,
            f"{prefix}.bn.beta": self.bn.beta,
        }


def pfn_forward(batch: PillarBatch, weights: PFNWeights) -> Tensor:
    """Per-point linear + BN + ReLU, then masked max over the point slots."""
    p, s, c = batch.features.shape
    x = Tensor(batch.features)
    h = T.linear_map(x, weights.weight)  # [P, S, C_f]
    cf = weights.weight.shape[1]
    h = T.transpose(h, (2, 0, 1))  # [C_f, P, S]
    h = T.reshape(h, (1, cf, p, s))
    h = T.relu(T.batch_norm(h, weights.bn))
    mask = np.arange(s)[None, :] < batch.counts[:, None]  # [P, S]
    h = T.max_over_axis(h, axis=3, mask=mask[None, None, :, :])  # [1, C_f, P]
    h = T.reshape(h, (cf, p))
    return T.transpose(h, (1, 0))  # [P, C_f]


def scatter_to_pseudo_image(features: Tensor, coords: np.ndarray, g: GridSpec) -> Tensor:
    """Place per-pillar feature vectors at their grid cells; empty cells stay 0."""
    p, c = features.shape
    rows, cols = coords[:, 0], coords[:, 1]
    lin = rows * g.width + cols
    if np.unique(lin).shape[0] != p:
        raise InvariantViolation("duplicate pillar coordinates in scatter")
    out = np.zeros((1, c, g.height, g.width), dtype=features.data.dtype)
    out[0, :, rows, cols] = features.data

    def backward(grad):
        features._accumulate(grad[0][:, rows, cols].T)

    return T._make(out, (features,), backward)
