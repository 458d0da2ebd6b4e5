"""Brownian driver increments shared by the solver, the signal simulator and
the particle oracle.

Increments come from the counter-based Philox generator keyed by the manifest
seed, so driver l / step n is a pure function of (seed, L, n_steps, dt) with
no streaming state.  Every increment is quantized to a multiple of 2^-26
(about 1.5e-8, statistically invisible at desk-scale dt): block sums of
quantized values are exact integer arithmetic in float64, which is what makes
refinement studies bit-stable (coarsening commutes exactly and endpoint
values survive coarsening unchanged).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, SizeError

GENERATOR_ID = "philox4x64-q26"
_QUANTUM = 2.0 ** -26
_MAX_ELEMENTS = 200_000_000
_MAGIC = b"BPTH"


@dataclass(frozen=True)
class BrownianPath:
    """L independent driver increment columns with seed provenance."""

    L: int
    n_steps: int
    dt: float
    increments: np.ndarray  # (n_steps, L)
    seed: int
    generator_id: str = GENERATOR_ID

    def endpoint(self) -> np.ndarray:
        """B_T per driver (exact under the quantized representation)."""
        return block_sums(self.increments, self.n_steps)[0]


def generate(seed: int, L: int, n_steps: int, dt: float) -> BrownianPath:
    """Draw i.i.d. centered Gaussian increments with variance dt."""
    if L <= 0 or n_steps <= 0 or dt <= 0:
        raise ConfigurationError("generate needs positive seed-independent parameters")
    if n_steps * L > _MAX_ELEMENTS:
        raise SizeError(f"path of {n_steps}x{L} increments exceeds the safety limit")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    inc = rng.standard_normal((n_steps, L)) * np.sqrt(dt)
    inc = np.rint(inc / _QUANTUM) * _QUANTUM
    return BrownianPath(L=int(L), n_steps=int(n_steps), dt=float(dt),
                        increments=inc, seed=int(seed))


def block_sums(increments: np.ndarray, k: int) -> np.ndarray:
    """Sum consecutive blocks of k rows, accumulating left to right."""
    n, L = increments.shape
    blocks = increments.reshape(n // k, k, L)
    acc = np.zeros((n // k, L))
    for j in range(k):
        acc += blocks[:, j, :]
    return acc


def coarsen(path: BrownianPath, k: int) -> BrownianPath:
    """Merge every k consecutive increments; endpoints are preserved exactly."""
    if k <= 0 or path.n_steps % k != 0:
        raise ConfigurationError(f"coarsening factor {k} does not divide {path.n_steps}")
    if k == 1:
        return path
    inc = block_sums(path.increments, k)
    return BrownianPath(L=path.L, n_steps=path.n_steps // k, dt=path.dt * k,
                        increments=inc, seed=path.seed,
                        generator_id=path.generator_id)


def write_path(path: BrownianPath, filename) -> None:
    """Binary dump: 24-byte header (magic 'BPTH', version, L, n_steps) then
    row-major little-endian float64 increments."""
    header = np.zeros(3, dtype="<u8")
    header[0] = int.from_bytes(_MAGIC + (1).to_bytes(4, "little"), "little")
    header[1] = path.L
    header[2] = path.n_steps
    with open(filename, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(path.increments.astype("<f8").tobytes(order="C"))


def read_path(filename, dt: float, seed: int = -1) -> BrownianPath:
    """Read a dump written by write_path. dt and seed live in the manifest,
    not the dump, and must be supplied by the caller."""
    with open(filename, "rb") as fh:
        raw = fh.read(24)
        if len(raw) != 24 or raw[:4] != _MAGIC:
            raise ConfigurationError(f"{filename} is not a driver dump (bad magic)")
        L = int(np.frombuffer(raw, dtype="<u8", count=1, offset=8)[0])
        n_steps = int(np.frombuffer(raw, dtype="<u8", count=1, offset=16)[0])
        inc = np.frombuffer(fh.read(), dtype="<f8").reshape(n_steps, L).copy()
    return BrownianPath(L=L, n_steps=n_steps, dt=float(dt), increments=inc,
                        seed=int(seed))
