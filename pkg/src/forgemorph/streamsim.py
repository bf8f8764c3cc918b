"""Cycle-stepping simulator of one streaming PE.

Pixels enter one per clock with a 5-bit control word. A line buffer holds
K-1 complete rows and the current row; a window is released the cycle its
bottom-right pixel arrives. Released windows then traverse fixed-depth
register stages (tap, multiply, adder tree, activation, output). Values are
never computed, only timing.

The simulator derives stage depths from the datapath structure and is used
as the reference for the closed-form latency in :mod:`forgemorph.costmodel`.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

from .costmodel import LatencyTerms
from .exceptions import DegenerateShape


@dataclass(frozen=True)
class ControlSignal:
    valid: bool = False
    h_start: bool = False
    h_end: bool = False
    v_start: bool = False
    v_end: bool = False

    def bits(self) -> int:
        return (self.valid << 4 | self.h_start << 3 | self.h_end << 2
                | self.v_start << 1 | self.v_end)


IDLE = ControlSignal()


@dataclass
class StreamTrace:
    cycles_to_first_valid_output: int
    cycles_total: int
    outputs_emitted: int
    out_height: int
    out_width: int
    events: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "cycles_to_first_valid_output": self.cycles_to_first_valid_output,
            "cycles_total": self.cycles_total,
            "outputs_emitted": self.outputs_emitted,
            "out_height": self.out_height,
            "out_width": self.out_width,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cycle", "valid", "h_start", "h_end", "v_start", "v_end", "event"])
            for cycle, sig, event in self.events:
                w.writerow([cycle, int(sig.valid), int(sig.h_start), int(sig.h_end),
                            int(sig.v_start), int(sig.v_end), event])


def control_stream(width: int, height: int, back_porch: int = 0, front_porch: int = 0,
                   lead_in: int = 0) -> Iterator[tuple[ControlSignal, bool]]:
    """Per-cycle control words for one frame, paired with an ``is_pad`` marker.

    ``width``/``height`` here are the streamed (already padded) dimensions;
    use :func:`padded_stream` to mark the border pixels.
    """
    for _ in range(lead_in):
        yield IDLE, False
    for r in range(height):
        for c in range(width):
            yield ControlSignal(
                valid=True,
                h_start=c == 0,
                h_end=c == width - 1,
                v_start=r == 0 and c == 0,
                v_end=r == height - 1 and c == width - 1,
            ), False
        for _ in range(front_porch + back_porch):
            yield IDLE, False


def padded_stream(width, height, pad, back_porch, front_porch, lead_in):
    wp, hp = width + 2 * pad, height + 2 * pad
    r = c = 0
    for sig, _ in control_stream(wp, hp, back_porch, front_porch, lead_in):
        if not sig.valid:
            yield sig, False
            continue
        is_pad = r < pad or r >= pad + height or c < pad or c >= pad + width
        yield sig, is_pad
        c += 1
        if sig.h_end:
            r, c = r + 1, 0


def _reduction_levels(n_inputs: int) -> int:
    levels = 0
    while n_inputs > 1:
        n_inputs = (n_inputs + 1) // 2
        levels += 1
    return levels


class _Stage:
    """A chain of ``depth`` registers."""

    def __init__(self, name: str, depth: int):
        self.name = name
        self.regs = deque([None] * depth)

    def shift(self, item):
        if not self.regs:
            return item
        self.regs.append(item)
        return self.regs.popleft()


class LineBuffer:
    """K-1 row FIFOs plus the row being filled; tracks position from flags only."""

    def __init__(self, kernel: int, stride: int):
        self.k = kernel
        self.s = stride
        self.rows: deque[list] = deque(maxlen=max(kernel - 1, 0))
        self.current: list = []
        self.row_count = 0

    def push(self, sig: ControlSignal) -> bool:
        """Consume one pixel slot; True when a complete window is released."""
        if not sig.valid:
            return False
        if sig.v_start:
            self.rows.clear()
            self.row_count = 0
        if sig.h_start:
            self.current = []
        self.current.append(self.row_count)
        k = self.k
        released = False
        if len(self.rows) == k - 1 and len(self.current) >= k:
            top = self.row_count - (k - 1)
            left = len(self.current) - k
            released = top % self.s == 0 and left % self.s == 0
        if sig.h_end:
            if k > 1:
                self.rows.append(self.current)
            self.current = []
            self.row_count += 1
        return released


def _stage_plan(kernel: int, terms: LatencyTerms, compute: str, is_first: bool):
    """Register depths before and after the line buffer."""
    def pick(override, structural):
        return structural if override is None else override

    front = [("d_in", terms.d_in if is_first else 0),
             ("pad", pick(terms.t_pad, kernel - 1))]
    back = [("tap", pick(terms.t_tap, kernel))]
    n_taps = kernel * kernel
    if compute == "mac":
        back += [("mul", pick(terms.t_mul, kernel)),
                 ("add", pick(terms.t_add, _reduction_levels(n_taps) + 2)),
                 ("relu", terms.t_relu)]
    elif compute == "avg":
        back += [("mul", pick(terms.t_mul, kernel)),
                 ("add", pick(terms.t_add, _reduction_levels(n_taps) + 2))]
    elif compute == "max":
        back += [("cmp", _reduction_levels(n_taps))]
    else:
        raise ValueError(f"unknown compute kind {compute!r}")
    back.append(("out", terms.d_out))
    return front, back


def _run(width, height, kernel, stride, pad, terms: LatencyTerms, compute: str,
         is_first: bool, record: bool) -> StreamTrace:
    terms = terms or LatencyTerms()
    wp, hp = width + 2 * pad, height + 2 * pad
    out_h = (hp - kernel) // stride + 1
    out_w = (wp - kernel) // stride + 1
    if min(width, height, kernel, stride) < 1 or pad < 0 or out_h < 1 or out_w < 1:
        raise DegenerateShape(
            f"{width}x{height} frame, K={kernel}, S={stride}, pad={pad} has no valid window")

    lead_in = (terms.p_b + 2) // 2
    front_plan, back_plan = _stage_plan(kernel, terms, compute, is_first)
    front = [_Stage(n, d) for n, d in front_plan]
    back = [_Stage(n, d) for n, d in back_plan]
    lbuf = LineBuffer(kernel, stride)

    source = padded_stream(width, height, pad, terms.p_b, terms.p_f, lead_in)
    # a slot is (control word, is_pad, window_released, is_last_slot)
    remaining = True
    first_out = None
    emitted = 0
    cycle = 0
    events = []
    upcoming = next(source, None)
    while True:
        if upcoming is not None:
            sig, is_pad = upcoming
            upcoming = next(source, None)
            slot = (sig, is_pad, False, upcoming is None)
        else:
            slot = None
        for stage in front:
            slot = stage.shift(slot)
        in_event = ""
        if slot is not None:
            sig, is_pad, _, last = slot
            released = lbuf.push(sig)
            slot = (sig, is_pad, released, last)
            if sig.valid:
                in_event = "pad" if is_pad else "pixel"
            if released:
                in_event += "+window"
        for stage in back:
            slot = stage.shift(slot)
        out_event = ""
        if slot is not None:
            sig, _, released, last = slot
            if released:
                emitted += 1
                if first_out is None:
                    first_out = cycle
                out_event = "output"
            if record:
                events.append((cycle, sig, "+".join(e for e in (in_event, out_event) if e)))
            if last:
                remaining = False
        elif record:
            events.append((cycle, IDLE, in_event))
        cycle += 1
        if not remaining:
            break

    return StreamTrace(
        cycles_to_first_valid_output=first_out,
        cycles_total=cycle,
        outputs_emitted=emitted,
        out_height=out_h,
        out_width=out_w,
        events=events,
    )


def simulate_conv_stream(W: int, H: int, K: int, S: int = 1, pad: int = 0,
                         terms: LatencyTerms | None = None, is_first: bool = True,
                         record: bool = False) -> StreamTrace:
    """Drive one synthetic frame through a convolution PE and count cycles."""
    return _run(W, H, K, S, pad, terms, "mac", is_first, record)


def simulate_pool_stream(W: int, H: int, K: int, S: int | None = None, kind: str = "max",
                         pad: int = 0, terms: LatencyTerms | None = None,
                         is_first: bool = True, record: bool = False) -> StreamTrace:
    """Pooling PE: same memory controller, comparator tree or fixed-weight MAC."""
    kind = kind.lower()
    if kind in ("max", "maxpool"):
        compute = "max"
    elif kind in ("avg", "avgpool"):
        compute = "avg"
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return _run(W, H, K, K if S is None else S, pad, terms, compute, is_first, record)
