"""Bitwise contention resolution and the lossy channel.

Identifiers follow the CAN2.0B footprint by default: a 20-bit dynamic
segment in the most significant positions carrying the quantized priority,
and a 9-bit static segment that breaks ties.  Arbitration is simulated at
the frame level by comparing the assembled integers, which is equivalent
to bit-serial resolution for MSB-first comparison with 1 as the dominant
bit (a test asserts this against a bit-by-bit reference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class IdentifierLayout:
    """Bit widths and priority-to-integer mapping for contention identifiers."""

    dynamic_bits: int = 20
    static_bits: int = 9
    alpha: float = 1000.0
    one_dominant: bool = True  # flag recorded so the convention can be flipped in config

    def __post_init__(self):
        if self.dynamic_bits < 1 or self.static_bits < 1:
            raise ConfigError("identifier segments must have at least one bit each")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    @property
    def total_bits(self) -> int:
        return self.dynamic_bits + self.static_bits

    @property
    def dynamic_max(self) -> int:
        return (1 << self.dynamic_bits) - 1

    @property
    def static_max(self) -> int:
        return (1 << self.static_bits) - 1

    def default_static_id(self, index: int) -> int:
        """Descending assignment so subsystem 1 holds the dominant static identifier."""
        sid = self.static_max - (index - 1)
        if sid < 0:
            raise ConfigError(f"subsystem index {index} exceeds static identifier capacity")
        return sid


def round_half_away(x: float) -> int:
    """Round to nearest integer with halves away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def dynamic_identifier(m: float, layout: IdentifierLayout) -> int:
    """Quantize a priority measure into the dynamic segment, saturating at the width."""
    raw = round_half_away(layout.alpha * m)
    if raw <= 0:
        return 0
    if raw > layout.dynamic_max:
        return layout.dynamic_max
    return raw


def build_identifier(m: float, layout: IdentifierLayout, static_id: int) -> int:
    """Assemble the full identifier: dynamic segment in the most significant bits."""
    if not 0 <= static_id <= layout.static_max:
        raise ConfigError(
            f"static_id {static_id} outside [0, {layout.static_max}] for {layout.static_bits} bits"
        )
    return (dynamic_identifier(m, layout) << layout.static_bits) | static_id


def arbitrate(contenders: list[tuple[int, int]], one_dominant: bool = True) -> int | None:
    """Resolve one frame: contenders are (subsystem index, full identifier) pairs.

    Returns the winning subsystem index, or None for an empty frame.  With
    the 1-dominant convention the numerically largest identifier wins.
    """
    if not contenders:
        return None
    ids = [ident for _, ident in contenders]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate full identifiers in one frame; static ids must be unique")
    pick = max if one_dominant else min
    winner, _ = pick(contenders, key=lambda pair: pair[1])
    return winner


def transmit(q: float, rng: np.random.Generator) -> int:
    """One Bernoulli(q) packet outcome from the trial's channel stream."""
    return int(rng.random() < q)


@dataclass
class ContentionFrame:
    """One slot's contention on one channel: contenders, winner, packet outcome."""

    slot: int
    channel: int = 0
    contenders: list[tuple[int, float, int]] = field(default_factory=list)  # (index, m, full id)
    winner: int | None = None
    gamma: int | None = None

    def validate(self):
        if self.winner is not None and self.winner not in {i for i, _, _ in self.contenders}:
            raise ConfigError("frame winner is not among the contenders")
        if (self.gamma is not None) != (self.winner is not None):
            raise ConfigError("gamma must be set exactly when a winner exists")


def resolve_contention(
    slot: int,
    contenders: list[tuple[int, list[float]]],
    layout: IdentifierLayout,
    static_ids: dict[int, int],
    n_channels: int,
) -> list[ContentionFrame]:
    """Resolve all channels in ascending order; winners back off from later channels.

    ``contenders`` holds (subsystem index, per-channel priority list).  Returns
    one frame per channel; at most one channel per subsystem and one winner
    per channel.
    """
    frames = []
    granted: set[int] = set()
    for channel in range(n_channels):
        entries = [
            (idx, priorities[channel],
             build_identifier(priorities[channel], layout, static_ids[idx]))
            for idx, priorities in contenders
            if idx not in granted
        ]
        winner = arbitrate([(idx, ident) for idx, _, ident in entries], layout.one_dominant)
        frames.append(ContentionFrame(slot=slot, channel=channel, contenders=entries,
                                      winner=winner))
        if winner is not None:
            granted.add(winner)
    return frames


def arbitrate_multichannel(
    contenders: list[tuple[int, list[float]]],
    layout: IdentifierLayout,
    static_ids: dict[int, int],
    n_channels: int,
) -> dict[int, int]:
    """Channel -> winning subsystem for one slot's multi-channel contention."""
    return {
        f.channel: f.winner
        for f in resolve_contention(0, contenders, layout, static_ids, n_channels)
        if f.winner is not None
    }
