"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numbers

from .exceptions import InvalidAllocation


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_fraction(value, name: str, *, open_low: bool = False) -> float:
    value = float(value)
    if not (0.0 < value <= 1.0 if open_low else 0.0 <= value <= 1.0):
        interval = "(0, 1]" if open_low else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return value


def check_allocation(g, alloc) -> None:
    """Raise InvalidAllocation unless ``alloc`` fits the conv layers of ``g``."""
    convs = g.conv_layers
    if len(alloc.conv_pe) != len(convs):
        raise InvalidAllocation(
            f"allocation has {len(alloc.conv_pe)} conv genes, network has {len(convs)} conv layers")
    for p, layer in zip(alloc.conv_pe, convs):
        if not 1 <= p <= layer.filters:
            raise InvalidAllocation(
                f"{layer.id!r}: PE count {p} outside [1, {layer.filters}]")
    fcs = g.fc_layers
    upper = max((l.in_channels for l in fcs), default=1)
    if not 1 <= alloc.fc_pe <= upper:
        raise InvalidAllocation(f"fc_pe {alloc.fc_pe} outside [1, {upper}]")
