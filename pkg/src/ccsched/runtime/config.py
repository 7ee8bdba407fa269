"""Communication and cost configuration for the simulated runtime."""
from __future__ import annotations

from dataclasses import asdict, dataclass

PROTOCOLS = ("ll", "simple")


@dataclass(frozen=True)
class CommConfig:
    channels: int = 2
    buffer_tile_elems: int = 1 << 16
    protocol: str = "simple"
    alpha: float = 5.0        # µs per ring message
    beta: float = 1.0e4       # bytes per µs
    gamma: float = 1.0e3      # element operations per µs
    lam: float = 5.0          # µs launch overhead per kernel step
    fused_alpha_factor: float = 1.25  # fused kernels hold more registers per thread

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be at least 1")
        if self.buffer_tile_elems < 1:
            raise ValueError("buffer_tile_elems must be positive")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if min(self.alpha, self.lam) < 0 or min(self.beta, self.gamma) <= 0:
            raise ValueError("cost parameters must be non-negative (beta, gamma positive)")
        if self.fused_alpha_factor < 1:
            raise ValueError("fused_alpha_factor must be at least 1")

    def check_world(self, world: int):
        if self.buffer_tile_elems % (self.channels * world):
            raise ValueError(f"buffer_tile_elems {self.buffer_tile_elems} is not divisible by "
                             f"channels x world size = {self.channels * world}")

    @property
    def alpha_eff(self) -> float:
        # the low-latency protocol halves latency at the price of half the bandwidth
        return self.alpha * (0.5 if self.protocol == "ll" else 1.0)

    @property
    def beta_eff(self) -> float:
        return self.beta * (0.5 if self.protocol == "ll" else 1.0)

    def to_json(self) -> dict:
        return asdict(self)
