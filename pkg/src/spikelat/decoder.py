"""Turning output spike trains into class decisions.

The primary rule is first-spike decoding: the sample is classified by
whichever output neuron fires earliest, and the firing step is the
network's exit time. Two things can muddy that rule, and both are resolved
explicitly and flagged on the result:

* several neurons fire on the same step: the one with the highest pre-reset
  potential at that step wins. By default only the simultaneous spikers
  compete; ``tiebreak="all"`` lets every neuron's potential compete.
* no output neuron fires inside the window: fall back to the highest
  potential at the final step, with the exit time pinned to the window end.

Exact potential ties resolve to the lowest class index and are flagged. A
rate readout (most spikes wins) is kept alongside for comparison runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

TIEBREAKS = ("spikers", "all")


@dataclass(frozen=True)
class Decision:
    label: int
    exit_step: int     # 1-based; equals the window length on fallback
    spiked: bool       # False when no output neuron fired at all
    tied: bool         # an exact potential tie was broken by index


def _frames(arrs):
    frames = [np.asarray(a, dtype=np.float64) for a in arrs]
    if not frames:
        raise ContractError("decoding needs at least one timestep")
    if any(f.shape != frames[0].shape or f.ndim != 2 for f in frames):
        raise ContractError("per-step arrays must share one (N, C) shape")
    return frames


def decode_batch(spikes, potentials, tiebreak: str = "spikers"):
    """First-spike decisions for a batch.

    ``spikes`` and ``potentials`` are per-step sequences of (N, C) arrays,
    spike values counted as firing when positive.
    """
    if tiebreak not in TIEBREAKS:
        raise ContractError(f"tiebreak must be one of {TIEBREAKS}")
    s = _frames([getattr(a, "data", a) for a in spikes])
    u = _frames([getattr(a, "data", a) for a in potentials])
    if len(s) != len(u) or s[0].shape != u[0].shape:
        raise ContractError("spikes and potentials must align step by step")
    n, _ = s[0].shape
    t_steps = len(s)

    out = []
    for i in range(n):
        decision = None
        for t in range(t_steps):
            fired = s[t][i] > 0
            if not fired.any():
                continue
            if tiebreak == "spikers":
                pots = np.where(fired, u[t][i], -np.inf)
            else:
                pots = u[t][i]
            best = float(pots.max())
            winners = np.flatnonzero(pots == best)
            decision = Decision(
                label=int(winners[0]),
                exit_step=t + 1,
                spiked=True,
                tied=len(winners) > 1,
            )
            break
        if decision is None:
            pots = u[-1][i]
            best = float(pots.max())
            winners = np.flatnonzero(pots == best)
            decision = Decision(
                label=int(winners[0]),
                exit_step=t_steps,
                spiked=False,
                tied=len(winners) > 1,
            )
        out.append(decision)
    return out


def decode_labels(spikes, potentials, tiebreak: str = "spikers") -> np.ndarray:
    return np.array(
        [d.label for d in decode_batch(spikes, potentials, tiebreak)],
        dtype=np.int64,
    )


def rate_decode(spikes) -> np.ndarray:
    """Labels by total spike count; argmax resolves ties to the lowest index."""
    s = _frames([getattr(a, "data", a) for a in spikes])
    counts = np.sum(s, axis=0)
    return counts.argmax(axis=1)


def first_spike_time(spikes) -> np.ndarray:
    """Per-neuron first firing step (1-based), 0 where a neuron never fired."""
    s = _frames([getattr(a, "data", a) for a in spikes])
    raster = np.stack(s) > 0          # (T, N, C)
    any_fired = raster.any(axis=0)
    first = raster.argmax(axis=0) + 1
    return np.where(any_fired, first, 0)


def mean_exit_step(decisions) -> float:
    """Average decision step; the honest latency figure for a batch."""
    decisions = list(decisions)
    if not decisions:
        raise ContractError("mean_exit_step of an empty batch")
    return float(np.mean([d.exit_step for d in decisions]))
