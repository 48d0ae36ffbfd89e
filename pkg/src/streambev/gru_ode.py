"""SpatialGRU cell, its continuous-time derivative form, and ODE solvers.

The cell's gates are 2-D convolutions over a spatial feature grid.  The
discrete update ``h' = z*h + (1-z)*g`` has the continuous counterpart
``dh/dt = (1-z)*(g-h)``; an explicit Euler step of size 1 recovers the
discrete update exactly.  Starting from a state inside [-1, 1] the dynamics
keep it there: at h_j = 1 the derivative is (1-z_j)(g_j-1) <= 0, and
symmetrically at -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from streambev import autodiff as ad
from streambev.autodiff import GridTensor

__all__ = [
    "SpatialGruParams",
    "GateOverride",
    "GruOdeState",
    "SolverConfig",
    "gru_gates",
    "gru_discrete_step",
    "gru_derivative",
    "ode_step",
    "MICROSECONDS_PER_SECOND",
]

MICROSECONDS_PER_SECOND = 1_000_000


@dataclass
class SpatialGruParams:
    """Gate convolution kernels and biases for one SpatialGRU cell.

    With ``weight_tying`` the input and state kernels of the reset and update
    gates are the same storage (``u_r is w_r``, ``u_z is w_z``) and the two
    gate biases coincide (``b_z is b_r``), so the tying cannot drift apart.
    ``candidate_extra`` optionally deepens the candidate path's CNN block.
    """

    w_r: GridTensor
    u_r: GridTensor
    b_r: GridTensor
    w_z: GridTensor
    u_z: GridTensor
    b_z: GridTensor
    w_h: GridTensor
    u_h: GridTensor
    b_h: GridTensor
    weight_tying: bool = True
    candidate_extra: list[tuple[GridTensor, GridTensor]] = field(default_factory=list)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        kernel_size: int = 3,
        weight_tying: bool = True,
        candidate_depth: int = 1,
    ) -> "SpatialGruParams":
        def kernel() -> GridTensor:
            return ad.uniform_kernel(rng, channels, channels, kernel_size)

        w_r, w_z = kernel(), kernel()
        b_r = ad.zero_bias(channels)
        if weight_tying:
            u_r, u_z, b_z = w_r, w_z, b_r
        else:
            u_r, u_z, b_z = kernel(), kernel(), ad.zero_bias(channels)
        extra = [
            (kernel(), ad.zero_bias(channels)) for _ in range(max(0, candidate_depth - 1))
        ]
        return cls(
            w_r=w_r, u_r=u_r, b_r=b_r,
            w_z=w_z, u_z=u_z, b_z=b_z,
            w_h=kernel(), u_h=kernel(), b_h=ad.zero_bias(channels),
            weight_tying=weight_tying,
            candidate_extra=extra,
        )

    @property
    def channels(self) -> int:
        return self.w_h.shape[0]

    @property
    def padding(self) -> int:
        return (self.w_h.shape[2] - 1) // 2

    def named_tensors(self, prefix: str = "") -> list[tuple[str, GridTensor]]:
        """Unique parameter tensors; tied aliases are listed once."""
        named = [
            ("w_r", self.w_r), ("u_r", self.u_r), ("b_r", self.b_r),
            ("w_z", self.w_z), ("u_z", self.u_z), ("b_z", self.b_z),
            ("w_h", self.w_h), ("u_h", self.u_h), ("b_h", self.b_h),
        ]
        for i, (k, b) in enumerate(self.candidate_extra):
            named.append((f"cand{i}_k", k))
            named.append((f"cand{i}_b", b))
        out, seen = [], set()
        for name, tensor in named:
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            out.append((prefix + name, tensor))
        return out

    def tied_names(self, prefix: str = "") -> dict[str, str]:
        """Alias map for checkpoint manifests, e.g. ``u_r -> w_r`` when tied."""
        if not self.weight_tying:
            return {}
        return {
            prefix + "u_r": prefix + "w_r",
            prefix + "u_z": prefix + "w_z",
            prefix + "b_z": prefix + "b_r",
        }


@dataclass
class GateOverride:
    """Test hook injecting gate values directly (sigmoids never reach {0, 1})."""

    r: GridTensor | None = None
    z: GridTensor | None = None
    g: GridTensor | None = None


@dataclass
class GruOdeState:
    """Hidden BEV state plus the current clock in integer microseconds."""

    h: GridTensor
    clock_us: int


@dataclass(frozen=True)
class SolverConfig:
    """ODE solver selection: euler/midpoint, fixed or variable step size."""

    method: str = "euler"
    step_mode: str = "fixed"
    fixed_dt_us: int | None = None
    min_step_us: int | None = None

    def __post_init__(self):
        if self.method not in ("euler", "midpoint"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.step_mode not in ("fixed", "variable"):
            raise ValueError(f"unknown step mode {self.step_mode!r}")
        if self.step_mode == "fixed":
            if self.fixed_dt_us is None or self.fixed_dt_us <= 0:
                raise ValueError("fixed step mode requires a positive fixed_dt_us")
        if self.min_step_us is not None and self.min_step_us <= 0:
            raise ValueError("min_step_us must be positive")

    @classmethod
    def fixed(cls, dt_s: float, method: str = "euler") -> "SolverConfig":
        dt_us = round(dt_s * MICROSECONDS_PER_SECOND)
        return cls(method=method, step_mode="fixed", fixed_dt_us=dt_us, min_step_us=dt_us)

    @classmethod
    def variable(cls, method: str = "euler", min_step_s: float = 0.05) -> "SolverConfig":
        return cls(
            method=method,
            step_mode="variable",
            min_step_us=round(min_step_s * MICROSECONDS_PER_SECOND),
        )

    @property
    def save_radius_us(self) -> int:
        """Half the minimum ODE step: fixed-mode state-saving match radius."""
        base = self.fixed_dt_us if self.step_mode == "fixed" else self.min_step_us
        assert base is not None
        return base


def _same_conv(x: GridTensor, kernel: GridTensor, bias: GridTensor | None = None) -> GridTensor:
    return ad.conv2d(x, kernel, bias, stride=1, padding=(kernel.shape[2] - 1) // 2)


def gru_gates(
    params: SpatialGruParams,
    x: GridTensor,
    h: GridTensor,
    override: GateOverride | None = None,
) -> tuple[GridTensor, GridTensor, GridTensor]:
    """Reset gate r, update gate z, candidate g for input x and state h."""
    if x.shape != h.shape:
        raise ad.ShapeMismatchError(
            f"gru_gates: input shape {x.shape} does not match state shape {h.shape}"
        )
    if override is not None and override.r is not None:
        r = override.r
    else:
        if params.u_r is params.w_r:
            # tied kernels: conv(W, x) + conv(W, h) == conv(W, x + h)
            r = ad.sigmoid(_same_conv(ad.add(x, h), params.w_r, params.b_r))
        else:
            r = ad.sigmoid(
                ad.add(_same_conv(x, params.w_r, params.b_r), _same_conv(h, params.u_r))
            )
    if override is not None and override.z is not None:
        z = override.z
    else:
        if params.u_z is params.w_z:
            z = ad.sigmoid(_same_conv(ad.add(x, h), params.w_z, params.b_z))
        else:
            z = ad.sigmoid(
                ad.add(_same_conv(x, params.w_z, params.b_z), _same_conv(h, params.u_z))
            )
    if override is not None and override.g is not None:
        g = override.g
    else:
        pre = ad.add(
            _same_conv(x, params.w_h, params.b_h),
            _same_conv(ad.mul(r, h), params.u_h),
        )
        for kernel, bias in params.candidate_extra:
            pre = _same_conv(ad.tanh(pre), kernel, bias)
        g = ad.tanh(pre)
    return r, z, g


def gru_discrete_step(
    params: SpatialGruParams,
    x: GridTensor,
    h: GridTensor,
    override: GateOverride | None = None,
) -> GridTensor:
    """One discrete GRU update: h' = z * h + (1 - z) * g."""
    _, z, g = gru_gates(params, x, h, override)
    return ad.add(ad.mul(z, h), ad.mul(ad.affine(z, scale=-1.0, shift=1.0), g))


def gru_derivative(
    params: SpatialGruParams,
    x: GridTensor,
    h: GridTensor,
    override: GateOverride | None = None,
) -> GridTensor:
    """Continuous-time state derivative: dh/dt = (1 - z) * (g - h)."""
    _, z, g = gru_gates(params, x, h, override)
    return ad.mul(ad.affine(z, scale=-1.0, shift=1.0), ad.sub(g, h))


def ode_step(
    solver: SolverConfig,
    params: SpatialGruParams,
    x: GridTensor,
    state: GruOdeState,
    dt_us: int,
    override: GateOverride | None = None,
) -> GruOdeState:
    """Advance the state by one explicit solver step of dt_us microseconds.

    Timestamps stay integer microseconds; dt is converted to seconds only
    here, inside the solver.  Midpoint re-evaluates the derivative at the
    half step with the same input x (no observation exists mid-step).
    """
    if dt_us <= 0:
        raise ValueError(f"ode_step: dt must be positive, got {dt_us} us")
    dt = dt_us / MICROSECONDS_PER_SECOND
    h = state.h
    if solver.method == "euler":
        h_next = ad.add(h, ad.affine(gru_derivative(params, x, h, override), scale=dt))
    else:
        f0 = gru_derivative(params, x, h, override)
        h_mid = ad.add(h, ad.affine(f0, scale=dt / 2.0))
        f_mid = gru_derivative(params, x, h_mid, override)
        h_next = ad.add(h, ad.affine(f_mid, scale=dt))
    return GruOdeState(h=h_next, clock_us=state.clock_us + dt_us)
