"""Asynchronous measurement update: fold an observation into the BEV state.

The update is modality-agnostic: it sees only a timestamp and an encoded
feature grid.  Incoming full-resolution features are first mapped to the
quarter-resolution hidden space.  The update itself runs two SpatialGRU
pathways (state driven by the observation, observation driven by the state),
weighs them per cell with a learned trust gate, and emits a per-cell Gaussian
KL divergence between the propagated state's distribution and the
measurement's as an auxiliary loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from streambev import autodiff as ad
from streambev.autodiff import GridTensor
from streambev.gru_ode import GruOdeState, SpatialGruParams, gru_discrete_step

__all__ = [
    "DistributionPair",
    "FusionParams",
    "OutOfOrderObservationError",
    "VARIANCE_FLOOR",
    "implicit_encode",
    "distribution_head",
    "kld_loss",
    "ode_update",
    "sync_fusion_baseline",
]

VARIANCE_FLOOR = 1e-6
SYNC_TOLERANCE_US = 1000


class OutOfOrderObservationError(ValueError):
    """An observation arrived with a timestamp earlier than the state clock."""


@dataclass
class DistributionPair:
    """Per-cell Gaussian over BEV features: mean and strictly positive variance."""

    mean: GridTensor
    variance: GridTensor


@dataclass
class FusionParams:
    """Encoder, distribution-head, dual-pathway GRU and trust-gate parameters."""

    enc_kernel: GridTensor
    enc_bias: GridTensor
    dist_state_kernel: GridTensor
    dist_state_bias: GridTensor
    dist_meas_kernel: GridTensor
    dist_meas_bias: GridTensor
    gru_pred: SpatialGruParams
    gru_obs: SpatialGruParams
    trust_kernel: GridTensor
    trust_bias: GridTensor
    sync_kernel: GridTensor
    sync_bias: GridTensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "FusionParams":
        c = channels
        trust = ad.uniform_kernel(rng, 2, 2 * c, 1)
        # mirror the second trust row so swapped pathways swap the logits;
        # equal pathway outputs then start at exactly 0.5/0.5
        trust.data[1, :c] = trust.data[0, c:]
        trust.data[1, c:] = trust.data[0, :c]
        return cls(
            enc_kernel=ad.uniform_kernel(rng, c, c, 5),
            enc_bias=ad.zero_bias(c),
            dist_state_kernel=ad.uniform_kernel(rng, 2, c, 3),
            dist_state_bias=ad.zero_bias(2),
            dist_meas_kernel=ad.uniform_kernel(rng, 2, c, 3),
            dist_meas_bias=ad.zero_bias(2),
            gru_pred=SpatialGruParams.init(rng, c),
            gru_obs=SpatialGruParams.init(rng, c),
            trust_kernel=trust,
            trust_bias=ad.zero_bias(2),
            sync_kernel=ad.uniform_kernel(rng, c, 2 * c, 3),
            sync_bias=ad.zero_bias(c),
        )

    def named_tensors(self, prefix: str = "") -> list[tuple[str, GridTensor]]:
        named = [
            ("enc_kernel", self.enc_kernel),
            ("enc_bias", self.enc_bias),
            ("dist_state_kernel", self.dist_state_kernel),
            ("dist_state_bias", self.dist_state_bias),
            ("dist_meas_kernel", self.dist_meas_kernel),
            ("dist_meas_bias", self.dist_meas_bias),
            ("trust_kernel", self.trust_kernel),
            ("trust_bias", self.trust_bias),
            ("sync_kernel", self.sync_kernel),
            ("sync_bias", self.sync_bias),
        ]
        out = [(prefix + n, t) for n, t in named]
        out += self.gru_pred.named_tensors(prefix + "gru_pred.")
        out += self.gru_obs.named_tensors(prefix + "gru_obs.")
        return out

    def tied_names(self, prefix: str = "") -> dict[str, str]:
        tied = dict(self.gru_pred.tied_names(prefix + "gru_pred."))
        tied.update(self.gru_obs.tied_names(prefix + "gru_obs."))
        return tied


def implicit_encode(params: FusionParams, feature: GridTensor) -> GridTensor:
    """Map a full-resolution BEV feature to the quarter-resolution hidden space.

    The tanh keeps encoded observations inside [-1, 1], the same box the GRU
    dynamics preserve for the state.
    """
    return ad.tanh(ad.resample(feature, "down4", params.enc_kernel, params.enc_bias))


def distribution_head(
    params: FusionParams, feature: GridTensor, branch: str
) -> DistributionPair:
    """Mean/variance estimate of a hidden feature for one branch.

    ``branch`` selects the state or measurement kernels; the variance is
    softplus-parameterised with a small positive floor.
    """
    if branch == "state":
        kernel, bias = params.dist_state_kernel, params.dist_state_bias
    elif branch == "measurement":
        kernel, bias = params.dist_meas_kernel, params.dist_meas_bias
    else:
        raise ValueError(f"unknown distribution branch {branch!r}")
    raw = ad.conv2d(feature, kernel, bias, stride=1, padding=(kernel.shape[2] - 1) // 2)
    mean = ad.slice_channels(raw, 0, 1)
    variance = ad.affine(ad.softplus(ad.slice_channels(raw, 1, 2)), shift=VARIANCE_FLOOR)
    return DistributionPair(mean=mean, variance=variance)


def kld_loss(state: DistributionPair, meas: DistributionPair) -> GridTensor:
    """Mean per-cell KL(N(state) || N(meas)) over batch and cells, as a scalar.

    Closed form for univariate Gaussians:
    log(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2.
    """
    if state.mean.shape != meas.mean.shape:
        raise ad.ShapeMismatchError(
            f"kld_loss: state shape {state.mean.shape} != measurement shape {meas.mean.shape}"
        )
    for name, pair in (("state", state), ("measurement", meas)):
        if (pair.variance.data <= 0).any():
            raise ad.DomainError(f"kld_loss: non-positive variance in the {name} distribution")
    log_ratio = ad.affine(ad.log(ad.div(meas.variance, state.variance)), scale=0.5)
    diff = ad.sub(state.mean, meas.mean)
    numerator = ad.add(state.variance, ad.mul(diff, diff))
    quad = ad.div(numerator, ad.affine(meas.variance, scale=2.0))
    per_cell = ad.affine(ad.add(log_ratio, quad), shift=-0.5)
    return ad.affine(ad.sum_all(per_cell), scale=1.0 / per_cell.data.size)


def ode_update(
    params: FusionParams,
    state: GruOdeState,
    observation,
    one_sided_kld: bool = False,
) -> tuple[GruOdeState, GridTensor]:
    """Fold an encoded observation into the propagated state.

    The observation must already live in the hidden space and must not be
    older than the state clock (streams are merged in time order upstream).
    With ``one_sided_kld`` the divergence trains only the state branch.
    """
    if observation.timestamp_us < state.clock_us:
        raise OutOfOrderObservationError(
            f"observation at {observation.timestamp_us} us precedes state clock "
            f"{state.clock_us} us; streams must be merged in time order"
        )
    h = state.h
    x_obs = observation.feature
    if x_obs.shape != h.shape:
        raise ad.ShapeMismatchError(
            f"ode_update: observation shape {x_obs.shape} != state shape {h.shape}"
        )

    path_pred = gru_discrete_step(params.gru_pred, x=x_obs, h=h)
    path_obs = gru_discrete_step(params.gru_obs, x=h, h=x_obs)
    stacked = ad.concat_channels([path_pred, path_obs])
    weights = ad.softmax_channel(ad.conv2d(stacked, params.trust_kernel, params.trust_bias))
    new_h = ad.add(
        ad.scale_channels(path_pred, ad.slice_channels(weights, 0, 1)),
        ad.scale_channels(path_obs, ad.slice_channels(weights, 1, 2)),
    )

    state_dist = distribution_head(params, h, "state")
    meas_feature = ad.detach(x_obs) if one_sided_kld else x_obs
    meas_dist = distribution_head(params, meas_feature, "measurement")
    kld = kld_loss(state_dist, meas_dist)
    return GruOdeState(h=new_h, clock_us=observation.timestamp_us), kld


def sync_fusion_baseline(params: FusionParams, lidar, camera):
    """Synchronised spatial fusion: channel concat followed by a fusion conv.

    Baseline arm for the spatial-then-temporal ablation.  Inputs must carry
    timestamps within 1 ms of each other; the fused feature keeps the lidar
    timestamp.  The convolution is linear so constructed kernels can pass
    channels through unchanged.
    """
    gap = abs(lidar.timestamp_us - camera.timestamp_us)
    if gap > SYNC_TOLERANCE_US:
        raise ValueError(
            f"sync_fusion_baseline: timestamps differ by {gap} us, beyond the "
            f"{SYNC_TOLERANCE_US} us tolerance"
        )
    stacked = ad.concat_channels([lidar.feature, camera.feature])
    pad = (params.sync_kernel.shape[2] - 1) // 2
    fused = ad.conv2d(stacked, params.sync_kernel, params.sync_bias, stride=1, padding=pad)
    from streambev.predictor import StampedObservation

    return StampedObservation(
        timestamp_us=lidar.timestamp_us, modality="fused", feature=fused
    )
