"""Named, independently seeded random streams.

Every stream is a Philox4x64-10 counter-based generator (``numpy.random.Philox``)
keyed by ``SeedSequence(seed, spawn_key=(crc32(name),))``.  Components draw
from their own stream (``"data"``, ``"probes"``, ``"init"``, ...) so that
changing how many numbers one component consumes never shifts another.
"""

from __future__ import annotations

import zlib
from typing import Any

import numpy as np
import torch


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStream:
    """A single named Philox stream producing float64 torch tensors."""

    def __init__(self, seed: int, name: str):
        self.seed = int(seed)
        self.name = name
        ss = np.random.SeedSequence(self.seed, spawn_key=(_stream_key(name),))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self.generator.standard_normal(shape))

    def uniform(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self.generator.random(shape))

    def integers(self, low: int, high: int, *shape: int) -> torch.Tensor:
        """Integers in ``[low, high)``."""
        return torch.from_numpy(self.generator.integers(low, high, size=shape))

    def rademacher(self, *shape: int) -> torch.Tensor:
        signs = self.generator.integers(0, 2, size=shape).astype(np.float64)
        return torch.from_numpy(2.0 * signs - 1.0)

    def torch_seed(self) -> int:
        """A 63-bit integer for seeding torch's own initialisers."""
        return int(self.generator.integers(0, 2**63 - 1))

    def get_state(self) -> dict[str, Any]:
        state = self.generator.bit_generator.state
        return _jsonable(state)

    def set_state(self, state: dict[str, Any]) -> None:
        self.generator.bit_generator.state = _from_jsonable(state)


class RngStreams:
    """Factory for the named streams of one run; ``seed`` fixes all of them."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, RngStream] = {}

    def stream(self, name: str) -> RngStream:
        if name not in self._streams:
            self._streams[name] = RngStream(self.seed, name)
        return self._streams[name]

    def __getitem__(self, name: str) -> RngStream:
        return self.stream(name)

    def get_state(self) -> dict[str, Any]:
        return {name: s.get_state() for name, s in sorted(self._streams.items())}

    def set_state(self, states: dict[str, Any]) -> None:
        for name, st in states.items():
            self.stream(name).set_state(st)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.asarray(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
