"""History of generated images used for discriminator updates."""

from __future__ import annotations

import numpy as np
import torch

from .core import ConfigError


class HistoryBuffer:
    """Fixed-capacity pool of past generator outputs.

    While filling, every fresh image is pooled and returned as is. Once full,
    each draw returns the fresh image with probability 0.5; otherwise the fresh
    image replaces a uniformly chosen pooled one, which is returned instead.
    """

    def __init__(self, capacity: int = 50):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self.pool: list[torch.Tensor] = []

    def __len__(self):
        return len(self.pool)

    @property
    def warm(self) -> bool:
        return len(self.pool) >= self.capacity

    def draw(self, fresh: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        fresh = fresh.detach().clone()
        if len(self.pool) < self.capacity:
            self.pool.append(fresh)
            return fresh
        if rng.random() < 0.5:
            return fresh
        i = int(rng.integers(len(self.pool)))
        old = self.pool[i]
        self.pool[i] = fresh
        return old.to(fresh.device)

    def draw_batch(self, batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        """Per-image :meth:`draw` over the leading dimension."""
        return torch.stack([self.draw(x, rng) for x in batch.detach()])

    def state_tensor(self) -> torch.Tensor:
        if not self.pool:
            return torch.zeros(0)
        return torch.stack(self.pool)

    def load_state_tensor(self, t: torch.Tensor) -> None:
        self.pool = [x.clone() for x in t] if t.numel() else []
        if len(self.pool) > self.capacity:
            raise ConfigError(f"buffer state holds {len(self.pool)} > capacity {self.capacity}")
