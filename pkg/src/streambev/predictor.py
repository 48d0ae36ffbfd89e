"""Rollout orchestration over merged asynchronous observation streams.

The past phase alternates propagation and measurement updates: the state is
advanced by ODE steps until each observation's timestamp, folded together
with the observation, and saved.  The future phase propagates only, saving
states for each requested timestamp: variable-step mode lands on requests
exactly, fixed-step mode saves the state whose clock falls within half a
step of the request.  The hidden input x is held piecewise-constant between
observations and stays frozen after the last one.

All timestamps are integer microseconds; they are converted to seconds only
inside the ODE solver, so long streams cannot drift off the matching rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from streambev import autodiff as ad
from streambev import fusion
from streambev.autodiff import GridTensor
from streambev.fusion import FusionParams
from streambev.gru_ode import GruOdeState, SolverConfig, SpatialGruParams, ode_step

__all__ = [
    "StampedObservation",
    "PredictionRequest",
    "RolloutResult",
    "MODALITY_ORDER",
    "merge_streams",
    "rollout",
    "zero_shot_extend",
    "write_trace",
    "read_trace",
]

# ties at identical timestamps are processed lidar before camera
MODALITY_ORDER = {"lidar": 0, "camera": 1, "fused": 2}


def _modality_rank(modality: str) -> tuple[int, str]:
    return (MODALITY_ORDER.get(modality, len(MODALITY_ORDER)), modality)


@dataclass
class StampedObservation:
    """One element of an asynchronous sensor stream."""

    timestamp_us: int
    modality: str
    feature: GridTensor


@dataclass(frozen=True)
class PredictionRequest:
    """Future timestamps to predict at, plus the solver that integrates there."""

    horizons_us: tuple[int, ...]
    solver: SolverConfig

    def __post_init__(self):
        horizons = tuple(int(t) for t in self.horizons_us)
        object.__setattr__(self, "horizons_us", horizons)
        for a, b in zip(horizons, horizons[1:]):
            if b <= a:
                raise ValueError(
                    f"request horizons must be strictly increasing, got {a} then {b}"
                )


@dataclass
class RolloutResult:
    """Saved (timestamp, state) pairs, accumulated KLD, and the event trace."""

    states: list[tuple[int, GridTensor]]
    kld_total: GridTensor
    trace: list[dict]
    present_us: int
    observation_count: int

    def future_states(self) -> list[tuple[int, GridTensor]]:
        return [(t, h) for t, h in self.states if t > self.present_us]

    def state_at(self, timestamp_us: int) -> GridTensor:
        """Last saved state for a timestamp (after all same-time updates)."""
        found = None
        for t, h in self.states:
            if t == timestamp_us:
                found = h
        if found is None:
            raise KeyError(f"no saved state at {timestamp_us} us")
        return found


def merge_streams(streams: list[list[StampedObservation]]) -> list[StampedObservation]:
    """Merge per-sensor streams into one time-ordered sequence.

    Stable over (timestamp, modality order); duplicate (timestamp, modality)
    pairs are rejected.
    """
    for stream in streams:
        for a, b in zip(stream, stream[1:]):
            if b.timestamp_us <= a.timestamp_us:
                raise ValueError(
                    f"stream timestamps must be strictly increasing, got "
                    f"{a.timestamp_us} then {b.timestamp_us} for {b.modality}"
                )
    merged = sorted(
        (obs for stream in streams for obs in stream),
        key=lambda o: (o.timestamp_us, _modality_rank(o.modality)),
    )
    seen: set[tuple[int, str]] = set()
    for obs in merged:
        key = (obs.timestamp_us, obs.modality)
        if key in seen:
            raise ValueError(
                f"duplicate observation for modality {obs.modality!r} at {obs.timestamp_us} us"
            )
        seen.add(key)
    return merged


def _predict_step(
    solver: SolverConfig,
    dynamics: SpatialGruParams,
    x: GridTensor,
    state: GruOdeState,
    dt_us: int,
    trace: list[dict],
    phase: str,
) -> GruOdeState:
    state = ode_step(solver, dynamics, x, state, dt_us)
    trace.append({"clock_us": state.clock_us, "kind": "predict", "dt_us": dt_us, "phase": phase})
    return state


def _propagate_to(
    solver: SolverConfig,
    dynamics: SpatialGruParams,
    x: GridTensor,
    state: GruOdeState,
    target_us: int,
    trace: list[dict],
    phase: str,
) -> GruOdeState:
    """Advance the clock to exactly target_us (shortening the last fixed step)."""
    if solver.step_mode == "variable":
        if state.clock_us < target_us:
            state = _predict_step(
                solver, dynamics, x, state, target_us - state.clock_us, trace, phase
            )
        return state
    while state.clock_us < target_us:
        dt_us = min(solver.fixed_dt_us, target_us - state.clock_us)
        state = _predict_step(solver, dynamics, x, state, dt_us, trace, phase)
    return state


def rollout(
    dynamics: SpatialGruParams,
    fusion_params: FusionParams,
    observations: list[StampedObservation],
    request: PredictionRequest,
    one_sided_kld: bool = False,
) -> RolloutResult:
    """Run the full propagate/update schedule over a merged observation stream.

    The state starts from zeroed features at the first observation's
    timestamp; the present is the last observation's timestamp.  Exactly one
    update happens per observation and one state is saved per observation and
    per requested horizon.
    """
    if not observations:
        raise ValueError("rollout requires at least one observation")
    for a, b in zip(observations, observations[1:]):
        if b.timestamp_us < a.timestamp_us:
            raise ValueError(
                f"observations are not in time order ({a.timestamp_us} then {b.timestamp_us}); "
                "merge the streams first"
            )
    solver = request.solver
    shape = observations[0].feature.shape
    state = GruOdeState(h=GridTensor.zeros(shape), clock_us=observations[0].timestamp_us)
    x = GridTensor.zeros(shape)
    kld_total = GridTensor.zeros((1, 1, 1, 1))
    trace: list[dict] = []
    states: list[tuple[int, GridTensor]] = []

    for obs in observations:
        state = _propagate_to(
            solver, dynamics, x, state, obs.timestamp_us, trace, "past"
        )
        state, kld = fusion.ode_update(fusion_params, state, obs, one_sided_kld)
        kld_total = ad.add(kld_total, kld)
        trace.append(
            {
                "clock_us": state.clock_us,
                "kind": "update",
                "modality": obs.modality,
                "kld": kld.item(),
            }
        )
        states.append((obs.timestamp_us, state.h))
        trace.append(
            {
                "clock_us": state.clock_us,
                "kind": "save",
                "timestamp_us": obs.timestamp_us,
                "phase": "past",
            }
        )
        x = obs.feature

    present_us = observations[-1].timestamp_us
    for t in request.horizons_us:
        if t <= present_us:
            raise ValueError(
                f"request horizon {t} us is not after the present timestamp {present_us} us"
            )

    if solver.step_mode == "variable":
        for t in request.horizons_us:
            if t > state.clock_us:
                state = _predict_step(
                    solver, dynamics, x, state, t - state.clock_us, trace, "future"
                )
            states.append((t, state.h))
            trace.append(
                {"clock_us": state.clock_us, "kind": "save", "timestamp_us": t, "phase": "future"}
            )
    elif request.horizons_us:
        pending = list(request.horizons_us)
        radius_den = solver.fixed_dt_us

        def match_pending() -> None:
            while pending and 2 * abs(state.clock_us - pending[0]) <= radius_den:
                t = pending.pop(0)
                states.append((t, state.h))
                trace.append(
                    {
                        "clock_us": state.clock_us,
                        "kind": "save",
                        "timestamp_us": t,
                        "phase": "future",
                    }
                )

        match_pending()
        step_budget = (request.horizons_us[-1] - present_us) // solver.fixed_dt_us + 2
        while pending:
            if step_budget == 0:
                raise RuntimeError(
                    f"fixed-step future phase failed to reach request at {pending[0]} us"
                )
            step_budget -= 1
            state = _predict_step(
                solver, dynamics, x, state, solver.fixed_dt_us, trace, "future"
            )
            match_pending()

    return RolloutResult(
        states=states,
        kld_total=kld_total,
        trace=trace,
        present_us=present_us,
        observation_count=len(observations),
    )


def zero_shot_extend(
    dynamics: SpatialGruParams,
    fusion_params: FusionParams,
    observations: list[StampedObservation],
    request: PredictionRequest,
    one_sided_kld: bool = False,
) -> RolloutResult:
    """Predict beyond the trained horizon: same code path as :func:`rollout`.

    Exists as a named entry point for the evaluation harness; no retraining
    or re-configuration is involved in extending the request.
    """
    return rollout(dynamics, fusion_params, observations, request, one_sided_kld)


def write_trace(path, trace: list[dict]) -> None:
    """Rollout trace as JSON lines, one event record per line."""
    with open(path, "w") as fh:
        for event in trace:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
