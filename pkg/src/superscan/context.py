from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .rng import Rng


@dataclass
class RunContext:
    """Per-forward state: mode, Gumbel noise source and expert-usage tallies."""

    mode: str = "infer"
    rng: Rng | None = None
    expert_calls: Counter = field(default_factory=Counter)
    spssm_calls: int = 0

    def __post_init__(self):
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {self.mode!r}")
        if self.mode == "train" and self.rng is None:
            self.rng = Rng(0)

    @property
    def training(self) -> bool:
        return self.mode == "train"
