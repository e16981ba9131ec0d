"""Overflow counters collected during quantized inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class LayerOverflow:
    """Per-layer counts; transience is judged against natural index order."""

    layer: str
    policy: str
    p: int
    w_bits: int
    x_bits: int
    dots: int = 0
    transient: int = 0
    persistent: int = 0
    events: int = 0

    def merge(self, other: "LayerOverflow") -> None:
        self.dots += other.dots
        self.transient += other.transient
        self.persistent += other.persistent
        self.events += other.events


@dataclass
class OverflowReport:
    layers: list[LayerOverflow] = field(default_factory=list)

    @property
    def dots(self) -> int:
        return sum(l.dots for l in self.layers)

    @property
    def transient(self) -> int:
        return sum(l.transient for l in self.layers)

    @property
    def persistent(self) -> int:
        return sum(l.persistent for l in self.layers)

    @property
    def events(self) -> int:
        return sum(l.events for l in self.layers)

    def merge(self, other: "OverflowReport") -> "OverflowReport":
        if not self.layers:
            self.layers = [LayerOverflow(**asdict(l)) for l in other.layers]
            return self
        if [l.layer for l in self.layers] != [l.layer for l in other.layers]:
            raise ValueError("reports cover different layers")
        for mine, theirs in zip(self.layers, other.layers):
            mine.merge(theirs)
        return self

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "total": {"dots": self.dots, "transient": self.transient,
                      "persistent": self.persistent, "events": self.events},
        }
