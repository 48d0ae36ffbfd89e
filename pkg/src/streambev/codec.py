"""Toy modality encoders, decoding heads, post-processing, and training loss.

The encoders are small convolutional stacks standing in for real lidar and
camera backbones at desk scale.  Decoding maps a quarter-resolution hidden
state back to full resolution and emits four field maps: two-class
segmentation logits, a centerness score in [0, 1], per-cell offsets to the
owning instance centre, and per-cell flow toward the next labelled time
(both in cells).  Instances are then formed FIERY-style: centerness peaks
above a threshold become centres, foreground cells join the centre their
offset points nearest to, and ids persist across frames by flow-warped
centre proximity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from streambev import autodiff as ad
from streambev.autodiff import GridTensor
from streambev.pgm import write_pgm

__all__ = [
    "EncoderParams",
    "DecoderParams",
    "DecodedFrame",
    "LossWeights",
    "InstanceLinker",
    "encode_modality",
    "decode",
    "instance_postprocess",
    "postprocess_sequence",
    "build_targets",
    "total_loss",
    "export_frame",
    "DEFAULT_CENTER_THRESHOLD",
    "DEFAULT_NMS_RADIUS",
    "CENTER_SIGMA_CELLS",
]

DEFAULT_CENTER_THRESHOLD = 0.1
DEFAULT_NMS_RADIUS = 2
CENTER_SIGMA_CELLS = 3.0
FOREGROUND_CE_WEIGHT = 2.0
_LINK_RADIUS_CELLS = 4.0


@dataclass
class EncoderParams:
    """Two-layer conv stack mapping a raw single-channel sensor grid to C channels."""

    k1: GridTensor
    b1: GridTensor
    k2: GridTensor
    b2: GridTensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "EncoderParams":
        return cls(
            k1=ad.uniform_kernel(rng, channels, 1, 3),
            b1=ad.zero_bias(channels),
            k2=ad.uniform_kernel(rng, channels, channels, 3),
            b2=ad.zero_bias(channels),
        )

    def named_tensors(self, prefix: str = "") -> list[tuple[str, GridTensor]]:
        return [
            (prefix + "k1", self.k1), (prefix + "b1", self.b1),
            (prefix + "k2", self.k2), (prefix + "b2", self.b2),
        ]


@dataclass
class DecoderParams:
    """Up-resampling trunk shared by the decoding heads, plus one head each."""

    up_kernel: GridTensor
    up_bias: GridTensor
    trunk_kernel: GridTensor
    trunk_bias: GridTensor
    seg_kernel: GridTensor
    seg_bias: GridTensor
    center_kernel: GridTensor
    center_bias: GridTensor
    offset_kernel: GridTensor
    offset_bias: GridTensor
    flow_kernel: GridTensor
    flow_bias: GridTensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "DecoderParams":
        c = channels
        return cls(
            up_kernel=ad.uniform_kernel(rng, c, c, 3),
            up_bias=ad.zero_bias(c),
            trunk_kernel=ad.uniform_kernel(rng, c, c, 3),
            trunk_bias=ad.zero_bias(c),
            seg_kernel=ad.uniform_kernel(rng, 2, c, 3),
            seg_bias=ad.zero_bias(2),
            center_kernel=ad.uniform_kernel(rng, 1, c, 3),
            center_bias=ad.zero_bias(1),
            offset_kernel=ad.uniform_kernel(rng, 2, c, 3),
            offset_bias=ad.zero_bias(2),
            flow_kernel=ad.uniform_kernel(rng, 2, c, 3),
            flow_bias=ad.zero_bias(2),
        )

    def named_tensors(self, prefix: str = "") -> list[tuple[str, GridTensor]]:
        names = [
            "up_kernel", "up_bias", "trunk_kernel", "trunk_bias",
            "seg_kernel", "seg_bias", "center_kernel", "center_bias",
            "offset_kernel", "offset_bias", "flow_kernel", "flow_bias",
        ]
        return [(prefix + n, getattr(self, n)) for n in names]


@dataclass
class DecodedFrame:
    """Field maps at full resolution; ``instance`` is filled by post-processing."""

    segmentation: GridTensor  # (B, 2, H, W) logits
    centerness: GridTensor    # (B, 1, H, W) in [0, 1]
    offset: GridTensor        # (B, 2, H, W) cells, (row, col) toward the centre
    flow: GridTensor          # (B, 2, H, W) cells per label interval
    instance: np.ndarray | None = None  # (B, H, W) int32 after post-processing

    def foreground_mask(self) -> np.ndarray:
        """Per-cell argmax of the segmentation logits (class 1 = occupied)."""
        logits = self.segmentation.data
        return logits[:, 1] > logits[:, 0]


def encode_modality(
    encoders: dict[str, EncoderParams], raw: GridTensor, modality: str
) -> GridTensor:
    """Per-modality conv stack from a raw sensor grid to the shared BEV space."""
    if modality not in encoders:
        raise KeyError(
            f"unknown modality {modality!r}; encoders exist for {sorted(encoders)}"
        )
    p = encoders[modality]
    h = ad.tanh(ad.conv2d(raw, p.k1, p.b1, stride=1, padding=1))
    return ad.tanh(ad.conv2d(h, p.k2, p.b2, stride=1, padding=1))


def _head(feature: GridTensor, kernel: GridTensor, bias: GridTensor) -> GridTensor:
    return ad.conv2d(feature, kernel, bias, stride=1, padding=(kernel.shape[2] - 1) // 2)


def decode(params: DecoderParams, state: GridTensor) -> DecodedFrame:
    """Decode a hidden state into the four field maps at full resolution."""
    feature = ad.tanh(ad.resample(state, "up4", params.up_kernel, params.up_bias))
    feature = ad.tanh(_head(feature, params.trunk_kernel, params.trunk_bias))
    return DecodedFrame(
        segmentation=_head(feature, params.seg_kernel, params.seg_bias),
        centerness=ad.sigmoid(_head(feature, params.center_kernel, params.center_bias)),
        offset=_head(feature, params.offset_kernel, params.offset_bias),
        flow=_head(feature, params.flow_kernel, params.flow_bias),
    )


# ---------------------------------------------------------------------------
# instance post-processing
# ---------------------------------------------------------------------------


@dataclass
class InstanceLinker:
    """Carries instance identity across frames by flow-warped centre proximity."""

    next_id: int = 1
    centers: dict[int, np.ndarray] = field(default_factory=dict)  # id -> predicted (r, c)

    def assign(self, found: list[tuple[np.ndarray, np.ndarray]]) -> list[int]:
        """Match found (centre, mean flow) pairs against predicted positions."""
        ids = [0] * len(found)
        unmatched = dict(self.centers)
        order = sorted(range(len(found)), key=lambda i: (found[i][0][0], found[i][0][1]))
        for i in order:
            center, _ = found[i]
            best, best_dist = None, _LINK_RADIUS_CELLS
            for known_id, predicted in unmatched.items():
                dist = float(np.hypot(*(predicted - center)))
                if dist < best_dist:
                    best, best_dist = known_id, dist
            if best is None:
                best = self.next_id
                self.next_id += 1
            else:
                del unmatched[best]
            ids[i] = best
        self.centers = {
            ids[i]: found[i][0] + found[i][1] for i in range(len(found))
        }
        self.next_id = max([self.next_id] + [i + 1 for i in ids])
        return ids


def _find_peaks(
    centerness: np.ndarray, mask: np.ndarray, threshold: float, nms_radius: int
) -> list[tuple[int, int]]:
    size = 2 * nms_radius + 1
    is_max = centerness >= maximum_filter(centerness, size=size, mode="nearest")
    candidates = np.argwhere(is_max & mask & (centerness >= threshold))
    ordered = sorted(
        (tuple(rc) for rc in candidates),
        key=lambda rc: (-centerness[rc[0], rc[1]], rc[0], rc[1]),
    )
    accepted: list[tuple[int, int]] = []
    for r, c in ordered:
        if all(max(abs(r - ar), abs(c - ac)) > nms_radius for ar, ac in accepted):
            accepted.append((r, c))
    return accepted


def instance_postprocess(
    frame: DecodedFrame,
    threshold: float = DEFAULT_CENTER_THRESHOLD,
    nms_radius: int = DEFAULT_NMS_RADIUS,
    linker: InstanceLinker | None = None,
) -> np.ndarray:
    """Assign instance ids: peaks become centres, offsets route cells to them.

    Candidate centres are restricted to predicted-foreground cells.  With a
    linker, ids persist across frames by flow-warped centre proximity;
    without one, ids are 1..k in deterministic peak order.  Fills and returns
    ``frame.instance``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    B, _, H, W = frame.centerness.shape
    fg = frame.foreground_mask()
    out = np.zeros((B, H, W), dtype=np.int32)
    for b in range(B):
        peaks = _find_peaks(frame.centerness.data[b, 0], fg[b], threshold, nms_radius)
        if not peaks:
            continue
        cells = np.argwhere(fg[b])
        # advanced indexing across the channel slice yields (n_cells, 2)
        votes = cells + frame.offset.data[b, :, cells[:, 0], cells[:, 1]]
        centers = np.asarray(peaks, dtype=float)
        nearest = np.argmin(
            ((votes[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1
        )
        labels = nearest + 1
        if linker is not None:
            found = []
            for k in range(len(peaks)):
                member = cells[labels == k + 1]
                if len(member):
                    mean_flow = frame.flow.data[b, :, member[:, 0], member[:, 1]].mean(axis=0)
                else:
                    mean_flow = np.zeros(2)
                found.append((centers[k], mean_flow))
            remap = linker.assign(found)
            labels = np.asarray([0] + remap, dtype=np.int32)[labels]
        out[b, cells[:, 0], cells[:, 1]] = labels
    frame.instance = out
    return out


def postprocess_sequence(
    frames: list[DecodedFrame],
    threshold: float = DEFAULT_CENTER_THRESHOLD,
    nms_radius: int = DEFAULT_NMS_RADIUS,
) -> list[np.ndarray]:
    """Post-process a frame sequence with ids kept consistent via flow linking."""
    if not frames:
        return []
    B = frames[0].centerness.shape[0]
    linkers = [InstanceLinker() for _ in range(B)]
    grids = []
    for frame in frames:
        per_batch = []
        for b in range(B):
            sub = DecodedFrame(
                segmentation=GridTensor(frame.segmentation.data[b : b + 1]),
                centerness=GridTensor(frame.centerness.data[b : b + 1]),
                offset=GridTensor(frame.offset.data[b : b + 1]),
                flow=GridTensor(frame.flow.data[b : b + 1]),
            )
            per_batch.append(
                instance_postprocess(sub, threshold, nms_radius, linkers[b])[0]
            )
        grid = np.stack(per_batch)
        frame.instance = grid
        grids.append(grid)
    return grids


# ---------------------------------------------------------------------------
# supervision targets and loss
# ---------------------------------------------------------------------------


def build_targets(ids: np.ndarray, flow: np.ndarray, sigma: float = CENTER_SIGMA_CELLS) -> dict:
    """Field-map targets from a ground-truth instance frame.

    Centerness is a Gaussian splat around each instance centroid; offsets
    point from each foreground cell to its own instance centroid.
    """
    H, W = ids.shape
    rows, cols = np.mgrid[0:H, 0:W].astype(float)
    seg = (ids > 0).astype(float)
    centerness = np.zeros((H, W))
    offset = np.zeros((2, H, W))
    for agent_id in np.unique(ids[ids > 0]):
        mask = ids == agent_id
        cr, cc = rows[mask].mean(), cols[mask].mean()
        d2 = (rows - cr) ** 2 + (cols - cc) ** 2
        centerness = np.maximum(centerness, np.exp(-d2 / (2.0 * sigma * sigma)))
        offset[0][mask] = cr - rows[mask]
        offset[1][mask] = cc - cols[mask]
    return {
        "seg": seg,
        "centerness": centerness,
        "offset": offset,
        "flow": flow,
        "foreground": seg.astype(bool),
    }


@dataclass
class LossWeights:
    """Fixed positive loss weights, or learned log-variance balancing terms."""

    l_seg: float = 1.0
    l_spatial: float = 0.2
    l_kld: float = 0.05
    spatial_norm: str = "l1"
    uncertainty: bool = False
    s_seg: GridTensor | None = None
    s_spatial: GridTensor | None = None
    s_kld: GridTensor | None = None

    def __post_init__(self):
        if self.spatial_norm not in ("l1", "l2"):
            raise ValueError(f"spatial_norm must be 'l1' or 'l2', got {self.spatial_norm!r}")
        if not self.uncertainty:
            if min(self.l_seg, self.l_spatial, self.l_kld) < 0:
                raise ValueError("fixed loss weights must be non-negative")
        elif self.s_seg is None:
            self.s_seg = GridTensor.zeros((1, 1, 1, 1), requires_grad=True)
            self.s_spatial = GridTensor.zeros((1, 1, 1, 1), requires_grad=True)
            self.s_kld = GridTensor.zeros((1, 1, 1, 1), requires_grad=True)

    def named_tensors(self, prefix: str = "") -> list[tuple[str, GridTensor]]:
        if not self.uncertainty:
            return []
        return [
            (prefix + "s_seg", self.s_seg),
            (prefix + "s_spatial", self.s_spatial),
            (prefix + "s_kld", self.s_kld),
        ]


def _const(arr: np.ndarray) -> GridTensor:
    return GridTensor(arr[None])


def _segmentation_loss(frame: DecodedFrame, target: dict) -> GridTensor:
    """Class-weighted cross-entropy over cells, foreground counted double."""
    seg = target["seg"]
    logp = ad.log_softmax_channel(frame.segmentation)
    fg = _const(seg[None])
    bg = _const((1.0 - seg)[None])
    picked = ad.add(
        ad.mul(ad.slice_channels(logp, 1, 2), fg),
        ad.mul(ad.slice_channels(logp, 0, 1), bg),
    )
    weight = _const((1.0 + (FOREGROUND_CE_WEIGHT - 1.0) * seg)[None])
    n_cells = seg.size * frame.segmentation.shape[0]
    return ad.affine(ad.sum_all(ad.mul(picked, weight)), scale=-1.0 / n_cells)


def _masked_regression(pred: GridTensor, target: np.ndarray, mask: np.ndarray,
                       norm: str) -> GridTensor:
    channels = pred.shape[1]
    mask_t = _const(np.broadcast_to(mask, (channels,) + mask.shape).astype(float))
    diff = ad.sub(pred, _const(target if target.ndim == 3 else target[None]))
    penalty = ad.absolute(diff) if norm == "l1" else ad.mul(diff, diff)
    count = max(int(mask.sum()) * channels, 1)
    return ad.affine(ad.sum_all(ad.mul(penalty, mask_t)), scale=1.0 / count)


def _spatial_loss(frame: DecodedFrame, target: dict, norm: str) -> GridTensor:
    fg = target["foreground"]
    total = _masked_regression(frame.centerness, target["centerness"], fg, norm)
    total = ad.add(total, _masked_regression(frame.offset, target["offset"], fg, norm))
    return ad.add(total, _masked_regression(frame.flow, target["flow"], fg, norm))


def total_loss(
    decoded: list[tuple[int, DecodedFrame]],
    targets: list[tuple[int, dict]],
    kld_total: GridTensor,
    weights: LossWeights,
) -> tuple[GridTensor, dict[str, float]]:
    """Combined training loss over timestamp-aligned frames.

    Per-frame terms are summed, so dropping a labelled timestamp removes
    exactly its contribution.  In uncertainty mode each component is weighted
    exp(-s) with +s regularisers and the s are learned.
    """
    if len(decoded) != len(targets):
        raise ValueError(
            f"{len(decoded)} decoded frames vs {len(targets)} target frames"
        )
    seg_loss = GridTensor.zeros((1, 1, 1, 1))
    spatial_loss = GridTensor.zeros((1, 1, 1, 1))
    for (t_dec, frame), (t_gt, target) in zip(decoded, targets):
        if t_dec != t_gt:
            raise ValueError(f"frame lists misaligned: {t_dec} us vs {t_gt} us")
        seg_loss = ad.add(seg_loss, _segmentation_loss(frame, target))
        spatial_loss = ad.add(spatial_loss, _spatial_loss(frame, target, weights.spatial_norm))

    if weights.uncertainty:
        total = GridTensor.zeros((1, 1, 1, 1))
        for s, component in (
            (weights.s_seg, seg_loss),
            (weights.s_spatial, spatial_loss),
            (weights.s_kld, kld_total),
        ):
            total = ad.add(total, ad.add(ad.mul(ad.exp(ad.affine(s, scale=-1.0)), component), s))
    else:
        total = ad.add(
            ad.add(
                ad.affine(seg_loss, scale=weights.l_seg),
                ad.affine(spatial_loss, scale=weights.l_spatial),
            ),
            ad.affine(kld_total, scale=weights.l_kld),
        )
    components = {
        "seg": seg_loss.item(),
        "spatial": spatial_loss.item(),
        "kld": kld_total.item(),
        "total": total.item(),
    }
    return total, components


# ---------------------------------------------------------------------------
# decoded-frame export
# ---------------------------------------------------------------------------


def export_frame(out_dir, timestamp_us: int, frame: DecodedFrame, batch: int = 0) -> None:
    """PGM per field map plus a JSON sidecar with the quantisation scales.

    Field maps go out 8-bit with a per-field scale; the instance grid, when
    present, is 16-bit.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = {
        "segmentation": ad.softmax_channel(frame.segmentation).data[batch, 1],
        "centerness": frame.centerness.data[batch, 0],
        "offset_row": frame.offset.data[batch, 0],
        "offset_col": frame.offset.data[batch, 1],
        "flow_row": frame.flow.data[batch, 0],
        "flow_col": frame.flow.data[batch, 1],
    }
    sidecar = []
    for name, grid in fields.items():
        low, high = float(grid.min()), float(grid.max())
        scale = (high - low) / 255.0 if high > low else 1.0
        quantised = np.round((grid - low) / scale)
        file_name = f"{timestamp_us:09d}_{name}.pgm"
        write_pgm(out / file_name, quantised, maxval=255)
        sidecar.append(
            {"timestamp_us": timestamp_us, "field": name, "scale": scale,
             "offset": low, "file": file_name}
        )
    if frame.instance is not None:
        file_name = f"{timestamp_us:09d}_instance.pgm"
        write_pgm(out / file_name, frame.instance[batch], maxval=65535)
        sidecar.append(
            {"timestamp_us": timestamp_us, "field": "instance", "scale": 1.0,
             "offset": 0.0, "file": file_name}
        )
    (out / f"{timestamp_us:09d}_fields.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True)
    )
