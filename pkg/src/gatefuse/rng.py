"""Deterministic randomness with named substreams.

Every source of randomness in a run hangs off one ``RngPool`` seeded from the
run config. Substreams are keyed by name ("dropout", "gumbel",
"init/<param>", ...) and derived with a counter-based Philox generator, so
enabling one feature never shifts the draws consumed by another. Substream
states are serializable, which is what makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import InvalidArgument


def _derive_key(seed: int, name: str) -> int:
    # 128-bit Philox key from (seed, name); sha256 keeps streams independent.
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class RngPool:
    """A family of independent, individually restorable random streams."""

    def __init__(self, seed: int):
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise InvalidArgument(f"seed must be an int, got {seed!r}")
        self.seed = seed
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it on first use."""
        gen = self._streams.get(name)
        if gen is None:
            gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, name)))
            self._streams[name] = gen
        return gen

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator at the start of the named stream, never cached.

        Draws are a pure function of (seed, name), so callers can recompute
        them at any time (epoch shuffles on resume, for example).
        """
        return np.random.Generator(np.random.Philox(key=_derive_key(self.seed, name)))

    def gumbel(self, name: str, shape) -> np.ndarray:
        """Standard Gumbel(0,1) draws from the named stream, float64."""
        u = self.stream(name).random(shape)
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        return -np.log(-np.log(u))

    def truncated_normal(self, name: str, shape, std: float) -> np.ndarray:
        """Normal(0, std) truncated at two standard deviations, by rejection."""
        gen = self.stream(name)
        x = gen.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = gen.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        return x * std

    def state(self) -> dict:
        """JSON-serializable snapshot of every stream touched so far."""
        out = {}
        for name, gen in self._streams.items():
            out[name] = _state_to_json(gen.bit_generator.state)
        return out

    def set_state(self, snapshot: dict) -> None:
        """Restore streams from a `state()` snapshot (creating them as needed)."""
        for name, st in snapshot.items():
            gen = self.stream(name)
            gen.bit_generator.state = _state_from_json(st)


def _state_to_json(state: dict) -> dict:
    out = {}
    for k, v in state.items():
        if isinstance(v, dict):
            out[k] = _state_to_json(v)
        elif isinstance(v, np.ndarray):
            out[k] = {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        elif isinstance(v, (np.integer,)):
            out[k] = int(v)
        else:
            out[k] = v
    return out


def _state_from_json(state: dict) -> dict:
    out = {}
    for k, v in state.items():
        if isinstance(v, dict) and "__ndarray__" in v:
            out[k] = np.array(v["__ndarray__"], dtype=v["dtype"])
        elif isinstance(v, dict):
            out[k] = _state_from_json(v)
        else:
            out[k] = v
    return out
