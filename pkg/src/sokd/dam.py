"""Distinctive-area detection: a three-branch head (heatmap / size /
offset), peak decoding into boxes, binary masks, and the masked
distillation loss restricted to those boxes.

One head instance serves both the teacher path and the student path;
parameter sharing is what makes the two paths' predictions comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as tc
from .errors import ShapeError
from .tensor import Rng, Tensor

BRANCHES = ("heatmap", "size", "offset")
_BRANCH_CHANNELS = {"heatmap": 1, "size": 2, "offset": 2}

# keeps the exponential size activation inside a trainable range
_SIZE_PREACT_LIMIT = 4.0


@dataclass
class DistinctiveArea:
    """A decoded box on the feature grid, in cell-center coordinates."""

    center_x: float
    center_y: float
    width: float
    height: float
    score: float

    def clipped_box(self, h: int, w: int) -> tuple[float, float, float, float]:
        """(x0, x1, y0, y1) intersected with the grid extent."""
        x0 = max(self.center_x - self.width / 2.0, 0.0)
        x1 = min(self.center_x + self.width / 2.0, float(w))
        y0 = max(self.center_y - self.height / 2.0, 0.0)
        y1 = min(self.center_y + self.height / 2.0, float(h))
        return x0, x1, y0, y1


class DamHead:
    """Three branches, each a 3x3 conv, relu, then a 1x1 conv."""

    def __init__(self, in_channels: int, mid_channels: int, weights: dict[str, Tensor]):
        self.in_channels = in_channels
        self.mid_channels = mid_channels
        self.weights = weights

    def copy(self) -> "DamHead":
        return DamHead(self.in_channels, self.mid_channels, dict(self.weights))

    def forward_arrays(self, feat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(heatmap, size, offset) activations for an NCHW feature batch.

        The three branches share one fused convolution per layer (their
        kernels are stacked along the output-channel axis), which is
        arithmetically identical to evaluating them separately."""
        w3 = np.concatenate([self.weights[f"{b}.conv3.w"].data for b in BRANCHES], axis=0)
        b3 = np.concatenate([self.weights[f"{b}.conv3.b"].data for b in BRANCHES], axis=0)
        mid = tc._conv2d_raw(feat, w3, "same") + b3.reshape(1, -1, 1, 1)
        np.maximum(mid, np.float32(0), out=mid)
        outs = []
        for i, branch in enumerate(BRANCHES):
            chunk = mid[:, i * self.mid_channels:(i + 1) * self.mid_channels]
            z = tc._conv2d_raw(chunk, self.weights[f"{branch}.conv1.w"].data, "same")
            z = z + self.weights[f"{branch}.conv1.b"].data.reshape(1, -1, 1, 1)
            if branch == "size":
                outs.append(np.exp(np.clip(z, -_SIZE_PREACT_LIMIT, _SIZE_PREACT_LIMIT)))
            else:
                outs.append(tc._sigmoid_raw(z))
        return tuple(outs)

    def build(self, tape: ad.Tape, feat: ad.Node,
              trainable: bool) -> tuple[dict[str, ad.Node], dict[str, ad.Node]]:
        """Record the head on a tape; returns (branch outputs, weight nodes)."""
        enter = tape.param if trainable else tape.constant
        nodes = {name: enter(w) for name, w in self.weights.items()}
        w3 = ad.concat0([nodes[f"{b}.conv3.w"] for b in BRANCHES])
        b3 = ad.concat0([nodes[f"{b}.conv3.b"] for b in BRANCHES])
        mid = ad.relu(ad.bias_add(ad.conv2d(feat, w3, "same"), b3))
        outs: dict[str, ad.Node] = {}
        for i, branch in enumerate(BRANCHES):
            chunk = ad.slice_channels(mid, i * self.mid_channels, (i + 1) * self.mid_channels)
            z = ad.bias_add(ad.conv2d(chunk, nodes[f"{branch}.conv1.w"], "same"),
                            nodes[f"{branch}.conv1.b"])
            if branch == "size":
                outs[branch] = ad.exp(ad.clip(z, -_SIZE_PREACT_LIMIT, _SIZE_PREACT_LIMIT))
            else:
                outs[branch] = ad.sigmoid(z)
        return outs, nodes


def build_dam_head(in_channels: int, mid_channels: int, rng: Rng) -> DamHead:
    # gain < 1 keeps the exp-activated size branch near 1.0 at init even for
    # large-scale input features
    gain = 0.3
    weights: dict[str, Tensor] = {}
    for branch in BRANCHES:
        out_ch = _BRANCH_CHANNELS[branch]
        b3 = gain / np.sqrt(in_channels * 9)
        b1 = gain / np.sqrt(mid_channels)
        w3 = (rng.child(f"{branch}.conv3").uniform((mid_channels, in_channels, 3, 3)) * 2 - 1) * b3
        w1 = (rng.child(f"{branch}.conv1").uniform((out_ch, mid_channels, 1, 1)) * 2 - 1) * b1
        weights[f"{branch}.conv3.w"] = Tensor(w3)
        weights[f"{branch}.conv3.b"] = Tensor.zeros((mid_channels,))
        weights[f"{branch}.conv1.w"] = Tensor(w1)
        weights[f"{branch}.conv1.b"] = Tensor.zeros((out_ch,))
    return DamHead(in_channels, mid_channels, weights)


def zero_dam_head(in_channels: int, mid_channels: int) -> DamHead:
    head = build_dam_head(in_channels, mid_channels, Rng(0))
    head.weights = {name: Tensor.zeros(w.dims) for name, w in head.weights.items()}
    return head


def dam_forward(head: DamHead, feat: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Branch activations for one feature map (CHW) or a batch (NCHW)."""
    single = len(feat.dims) == 3
    arr = feat.data[None] if single else feat.data
    if arr.ndim != 4:
        raise ShapeError(f"dam_forward expects CHW or NCHW, got {feat.dims}")
    if arr.shape[1] != head.in_channels:
        raise ShapeError(f"feature has {arr.shape[1]} channels, head expects {head.in_channels}")
    heat, size, offset = head.forward_arrays(arr)
    if single:
        heat, size, offset = heat[0], size[0], offset[0]
    return Tensor(heat, copy=False), Tensor(size, copy=False), Tensor(offset, copy=False)


def dam_align_loss(student_branches, teacher_branches) -> float:
    """Sum over branches of the mean squared difference between paths."""
    total = 0.0
    if len(student_branches) != len(teacher_branches):
        raise ShapeError("branch tuples differ in length")
    for s, t in zip(student_branches, teacher_branches):
        if s.dims != t.dims:
            raise ShapeError(f"branch shape mismatch: {s.dims} vs {t.dims}")
        diff = s.data.astype(np.float64) - t.data.astype(np.float64)
        total += float(np.mean(diff * diff))
    return total


def _peak_mask(hm: np.ndarray) -> np.ndarray:
    """Cells that are >= all 8 neighbours (missing border neighbours ignored)."""
    h, w = hm.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = hm
    peaks = np.ones((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            peaks &= hm >= padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    return peaks


def _decode_arrays(heat: np.ndarray, size: np.ndarray, offset: np.ndarray,
                   n: int) -> list[DistinctiveArea]:
    hm = heat[0]
    h, w = hm.shape
    peaks = _peak_mask(hm)
    rows, cols = np.nonzero(peaks)
    scores = hm[rows, cols]
    # score descending, then raster order: stable under candidate permutation
    order = np.lexsort((rows * w + cols, -scores))
    areas: list[DistinctiveArea] = []
    for idx in order:
        if len(areas) == n:
            break
        r, c = int(rows[idx]), int(cols[idx])
        area = DistinctiveArea(
            center_x=c + float(offset[0, r, c]),
            center_y=r + float(offset[1, r, c]),
            width=float(size[0, r, c]),
            height=float(size[1, r, c]),
            score=float(hm[r, c]),
        )
        x0, x1, y0, y1 = area.clipped_box(h, w)
        if x1 <= x0 or y1 <= y0:
            continue
        areas.append(area)
    return areas


def decode_areas(heatmap: Tensor, size: Tensor, offset: Tensor, n: int) -> list[DistinctiveArea]:
    """Top-n heatmap peaks decoded into boxes (may return fewer than n)."""
    if n < 1:
        raise ShapeError("decode_areas needs n >= 1")
    if heatmap.dims[0] != 1 or size.dims[0] != 2 or offset.dims[0] != 2:
        raise ShapeError("expected 1/2/2 channel heatmap/size/offset")
    return _decode_arrays(heatmap.data, size.data, offset.data, n)


def area_mask(area: DistinctiveArea, dims: tuple[int, int]) -> Tensor:
    """Binary HxW mask: a cell belongs iff its center lies inside the
    clipped box. Cell (r, c) has center (c + 0.5, r + 0.5); the box is
    half-open so zero-area boxes select nothing."""
    h, w = dims
    x0, x1, y0, y1 = area.clipped_box(h, w)
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    inside = ((rows >= y0) & (rows < y1))[:, None] & ((cols >= x0) & (cols < x1))[None, :]
    return Tensor(inside.astype(np.float32), copy=False)


def masked_distill_loss(f_s_aligned: Tensor, f_t_aug: Tensor, areas) -> float:
    """Sum over areas of the masked mean squared feature difference."""
    if f_s_aligned.dims != f_t_aug.dims:
        raise ShapeError(f"feature shape mismatch: {f_s_aligned.dims} vs {f_t_aug.dims}")
    c, h, w = f_s_aligned.dims
    diff = f_s_aligned.data.astype(np.float64) - f_t_aug.data.astype(np.float64)
    sq = diff * diff
    total = 0.0
    for area in areas:
        mask = area_mask(area, (h, w)).data
        count = float(mask.sum())
        if count == 0:
            continue
        total += float((sq * mask[None, :, :]).sum()) / (count * c)
    return total


def batched_mask_weights(areas_per_image, dims: tuple[int, int, int]) -> np.ndarray:
    """Per-image area masks folded into one weight tensor W such that
    sum(W * diff^2) equals the summed masked means; batch averaging is the
    caller's concern."""
    c, h, w = dims
    out = np.zeros((len(areas_per_image), c, h, w), dtype=np.float32)
    for i, areas in enumerate(areas_per_image):
        acc = np.zeros((h, w), dtype=np.float32)
        for area in areas:
            mask = area_mask(area, (h, w)).data
            count = float(mask.sum())
            if count == 0:
                continue
            acc += mask / np.float32(count * c)
        out[i] = acc[None, :, :]
    return out
