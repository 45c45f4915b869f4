"""Collision-recovery baseline: IQ-cluster decoding of overlapped replies.

With n tags reflecting at once, the received constellation collects near
the 2^n subset sums of the per-tag channel gains.  This decoder assigns
half-bit samples to those clusters (k-means refined from the known-gain
prediction), reads each tag's on/off stream out of the memberships, and
FM0-decodes the streams.  It is a deliberately simplified stand-in for
published collision decoders: it reproduces their comparative behavior
(success falling with collision size, per-packet decode latency blowing
the Ack deadline at high link rates), not any specific algorithm's
internals.  The simulator hands it best-case help: the true channel
gains, tag clock rates, and the noise level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import phy
from .iq import IqStream
from .phy import FrameKind, UplinkConfig
from .reader import EventKind, demod_packet

# measured decode latency per collision size (two to five tags), seconds
DECODE_LATENCY_S = {2: 50.6e-6, 3: 97.2e-6, 4: 189.0e-6, 5: 275.9e-6}

SEPARABILITY_FACTOR = 3.0


def decode_latency_model(n_tags: int) -> float:
    """Processing delay charged against the protocol Ack budget."""
    if n_tags not in DECODE_LATENCY_S:
        raise ValueError(f"collision size {n_tags} outside the modeled range 2..5")
    return DECODE_LATENCY_S[n_tags]


@dataclass(frozen=True)
class ClusterSet:
    """Constellation summary: subset-sum centers and observed transitions."""

    centers: np.ndarray
    transitions: np.ndarray

    def __post_init__(self):
        if len(self.centers) > 0 and self.transitions.shape != (
            len(self.centers),
            len(self.centers),
        ):
            raise ValueError("transition matrix must be square in the center count")


def _subset_centers(gains: np.ndarray) -> np.ndarray:
    n = len(gains)
    centers = np.zeros(2**n, dtype=np.complex128)
    for mask in range(2**n):
        total = 0.0 + 0.0j
        for i in range(n):
            if mask >> i & 1:
                total += gains[i]
        centers[mask] = total
    return centers


def cluster_decode(
    x: IqStream,
    n_tags: int,
    cfg: UplinkConfig,
    known_gains: np.ndarray | None = None,
    known_rates: np.ndarray | None = None,
    noise_power: float = 0.0,
    start_time_s: float | None = None,
) -> tuple[list[np.ndarray], ClusterSet] | None:
    """Recover up to n_tags RN16 bit sequences from a collided window.

    Returns (per-tag bit arrays, cluster summary) or None when the subset
    clusters are not separable (minimum center spacing under three within-
    cluster deviations) or no packet is present.  `known_gains` and
    `known_rates` carry the simulator's channel truth; `start_time_s` is
    the common reply start in the window's time base.
    """
    if n_tags == 1:
        event = demod_packet(x, cfg, FrameKind.RN16_REPLY)
        if event.kind is not EventKind.RN16:
            return None
        bits = phy._int_to_bits(event.rn16, 16)
        return [bits], ClusterSet(np.zeros(0, dtype=complex), np.zeros((0, 0)))
    if known_gains is None or len(known_gains) != n_tags:
        raise ValueError("collided decode needs one known gain per tag")
    gains = np.asarray(known_gains, dtype=np.complex128)
    rates = (
        np.asarray(known_rates, dtype=np.float64)
        if known_rates is not None
        else np.full(n_tags, cfg.blf_hz)
    )

    samples = x.samples - np.mean(x.samples)  # carrier DC off
    fs = x.sample_rate_hz
    centers = _subset_centers(gains)
    sigma = np.sqrt(max(noise_power, 1e-300))
    if _min_center_gap(centers) < SEPARABILITY_FACTOR * sigma:
        return None

    if start_time_s is None:
        start_idx = _energy_rise(samples)
    else:
        start_idx = int(round((start_time_s - x.start_time_s) * fs))
    n_halfbits = 2 * (phy.FM0_PREAMBLE_SYMBOLS + 16 + 1)

    # gather per-tag half-bit samples on each tag's own clock grid
    sample_points: list[np.ndarray] = []
    for i in range(n_tags):
        half = fs / (2.0 * rates[i])
        idx = start_idx + ((np.arange(n_halfbits) + 0.5) * half).astype(np.int64)
        if idx[-1] >= len(samples):
            return None
        sample_points.append(samples[idx])

    # one k-means refinement pass over the pooled samples
    pooled = np.concatenate(sample_points)
    assign = np.argmin(np.abs(pooled[:, None] - centers[None, :]), axis=1)
    refined = centers.copy()
    for c in range(len(centers)):
        members = pooled[assign == c]
        if len(members):
            refined[c] = np.mean(members)
    if _min_center_gap(refined) < SEPARABILITY_FACTOR * sigma:
        return None

    transitions = np.zeros((len(refined), len(refined)))
    results: list[np.ndarray] = []
    pre = (phy.FM0_PREAMBLE_HALFBITS + 1) // 2  # on/off form of the preamble
    for i in range(n_tags):
        masks = np.argmin(np.abs(sample_points[i][:, None] - refined[None, :]), axis=1)
        states = (masks >> i) & 1
        np.add.at(transitions, (masks[:-1], masks[1:]), 1)
        if not np.array_equal(states[: len(pre)], pre):
            continue
        payload = states[len(pre) :].astype(np.float64) * 2 - 1
        first, second = payload[0:32:2], payload[1:33:2]
        bits = (first * second > 0).astype(np.uint8)
        results.append(bits)
    if not results:
        return None
    return results, ClusterSet(refined, transitions)


def _min_center_gap(centers: np.ndarray) -> float:
    if len(centers) < 2:
        return np.inf
    diff = np.abs(centers[:, None] - centers[None, :])
    diff[np.diag_indices(len(centers))] = np.inf
    return float(np.min(diff))


def _energy_rise(samples: np.ndarray) -> int:
    """First index where deviation from the window mean turns on."""
    mag = np.abs(samples)
    threshold = 0.5 * np.max(mag)
    idx = np.flatnonzero(mag > threshold)
    return int(idx[0]) if len(idx) else 0
