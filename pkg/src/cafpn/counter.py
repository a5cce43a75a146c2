"""Multiply-accumulate and auxiliary-storage tallies."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class OpCounter:
    """Tally of MACs and peak live auxiliary elements for one invocation.

    ``macs`` counts one per multiply-accumulate. Exponentials, divisions and
    normalization arithmetic are not counted. ``aux_peak`` is the largest
    number of auxiliary elements alive at once; inputs and the final output
    are never auxiliary.
    """

    macs: int = 0
    aux_peak: int = 0
    live: int = field(default=0, repr=False)

    def mac(self, n: int) -> None:
        if n < 0:
            raise ValueError(f"negative MAC count {n}")
        self.macs += int(n)

    def alloc(self, n: int) -> None:
        self.live += int(n)
        self.aux_peak = max(self.aux_peak, self.live)

    def free(self, n: int) -> None:
        if n > self.live:
            raise ValueError(f"freeing {n} elements but only {self.live} are live")
        self.live -= int(n)

    def __add__(self, other: OpCounter) -> OpCounter:
        # independent invocations: storage may coexist, so peaks add as a bound
        return OpCounter(self.macs + other.macs, self.aux_peak + other.aux_peak)


def record(counter: OpCounter | None, macs: int) -> None:
    if counter is not None:
        counter.mac(macs)
