"""Grids, fields, ensembles, the counter-based RNG and binary file formats.

Layout convention: a field's values are stored flat in row-major axis order
with the channel index fastest, i.e. ``values.reshape(*dims, channels)``.
The grid quadrature weight is the uniform cell volume ``prod(spacing)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# --------------------------------------------------------------------------
# errors


class ReflowError(Exception):
    """Base class for all package errors."""


class InvalidFieldError(ReflowError, ValueError):
    pass


class FormatError(ReflowError, ValueError):
    """Corrupt or unrecognised binary header."""


class LengthMismatchError(FormatError):
    pass


class DegenerateLawError(ReflowError, ArithmeticError):
    pass


class DivergenceError(ReflowError, ArithmeticError):
    pass


class BlowUpError(ReflowError, ArithmeticError):
    def __init__(self, message: str, tau: float | None = None):
        super().__init__(message)
        self.tau = tau


class StepCapError(ReflowError, RuntimeError):
    pass


class CFLError(ReflowError, ValueError):
    pass


# --------------------------------------------------------------------------
# grid / field / ensemble


@dataclass(frozen=True)
class Grid:
    """Periodic grid on the torus with ``channels`` values per point."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...] = ()
    channels: int = 1

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if not dims or any(n < 2 for n in dims):
            raise ValueError(f"all grid dims must be >= 2, got {dims}")
        spacing = self.spacing or tuple(2 * math.pi / n for n in dims)
        spacing = tuple(float(h) for h in spacing)
        if len(spacing) != len(dims) or any(not h > 0 for h in spacing):
            raise ValueError("spacing must hold one positive value per axis")
        if int(self.channels) < 1:
            raise ValueError("channels must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "channels", int(self.channels))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def npoints(self) -> int:
        return math.prod(self.dims)

    @property
    def size(self) -> int:
        """Length of a flat field bound to this grid."""
        return self.npoints * self.channels

    @property
    def shape(self) -> tuple[int, ...]:
        return self.dims + (self.channels,)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(n * h for n, h in zip(self.dims, self.spacing))

    def coordinates(self) -> list[np.ndarray]:
        """Per-axis 1D coordinate arrays ``x_j = j * spacing``."""
        return [np.arange(n) * h for n, h in zip(self.dims, self.spacing)]

    def meshgrid(self) -> list[np.ndarray]:
        return np.meshgrid(*self.coordinates(), indexing="ij")


@dataclass(frozen=True)
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != self.grid.size:
            raise InvalidFieldError(
                f"field length {values.size} does not match grid size {self.grid.size}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidFieldError("field has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, grid: Grid, array) -> Field:
        array = np.asarray(array, dtype=np.float64)
        if array.shape == grid.dims and grid.channels == 1:
            array = array[..., None]
        return cls(grid, array.reshape(-1))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> Field:
        """Sample ``fn(*coords)`` on the grid (scalar or channel-last output)."""
        return cls.from_array(grid, fn(*grid.meshgrid()))

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def with_values(self, values) -> Field:
        return Field(self.grid, values)

    def __add__(self, other: Field) -> Field:
        _check_same_grid(self.grid, other.grid)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: Field) -> Field:
        _check_same_grid(self.grid, other.grid)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, a: float) -> Field:
        return Field(self.grid, float(a) * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True)
class Ensemble:
    """Empirical law: ``values[i]`` is the flat field of member ``i``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        values = values.reshape(values.shape[0], -1)
        if values.shape[0] == 0:
            raise ValueError("ensemble must be nonempty")
        if values.shape[1] != self.grid.size:
            raise InvalidFieldError(
                f"member length {values.shape[1]} does not match grid size {self.grid.size}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidFieldError("ensemble has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_fields(cls, fields) -> Ensemble:
        fields = list(fields)
        if not fields:
            raise ValueError("ensemble must be nonempty")
        grid = fields[0].grid
        for f in fields[1:]:
            _check_same_grid(grid, f.grid)
        return cls(grid, np.stack([f.values for f in fields]))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> Field:
        return Field(self.grid, self.values[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def members(self) -> list[Field]:
        return list(self)

    @property
    def arrays(self) -> np.ndarray:
        return self.values.reshape((len(self),) + self.grid.shape)


def _check_same_grid(a: Grid, b: Grid):
    if a != b:
        raise ValueError(f"grid mismatch: {a} vs {b}")


def l2_norm(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Quadrature L2 norm over the last axis of a batch of flat fields."""
    values = np.asarray(values, dtype=np.float64)
    return np.sqrt(grid.cell_volume * np.sum(values * values, axis=-1))


def field_l2_norm(f: Field) -> float:
    if not np.all(np.isfinite(f.values)):
        raise InvalidFieldError("field has non-finite entries")
    return float(l2_norm(f.values, f.grid))


# --------------------------------------------------------------------------
# RNG

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_scalar(x: int) -> int:
    return int(_mix64(np.array([x & _MASK], dtype=np.uint64))[0])


@dataclass
class Rng:
    """Counter-based SplitMix64 stream.

    Output ``i`` (0-based) is ``mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)``,
    identical to the reference sequential SplitMix64 generator seeded with
    ``seed``. Uniforms take the top 53 bits; normals use Box-Muller on
    consecutive uniform pairs ``(cos, sin)`` interleaved.
    """

    seed: int
    counter: int = field(default=0)

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
            return _mix64(state)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))  # 1 - u in (0, 1]
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return float(z[0]) if size is None else z[:n].reshape(size)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        u = self.uniform(size)
        if size is None:
            return int(u * high)
        return np.floor(u * high).astype(np.int64)

    def split(self, key: int) -> Rng:
        """Independent child stream; does not advance this stream."""
        return Rng(_mix_scalar(_mix_scalar(self.seed) ^ (int(key) * _GOLDEN)))


def gaussian_field(grid: Grid, rng: Rng) -> Field:
    return Field(grid, rng.normal(grid.size))


# --------------------------------------------------------------------------
# binary formats (little-endian)

FIELD_MAGIC = b"RFL1"
ENSEMBLE_MAGIC = b"RFE1"
CHECKPOINT_MAGIC = b"RFM1"


def _pack_grid(grid: Grid) -> bytes:
    d = grid.ndim
    return (
        struct.pack(f"<I{d}II", d, *grid.dims, grid.channels)
        + struct.pack(f"<{d}d", *grid.spacing)
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LengthMismatchError(
                f"unexpected end of data: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def finish(self):
        if self.pos != len(self.data):
            raise LengthMismatchError(f"{len(self.data) - self.pos} trailing bytes")


def _read_grid(r: _Reader) -> Grid:
    (d,) = r.unpack("<I")
    if not 1 <= d <= 8:
        raise FormatError(f"implausible dimension count {d}")
    dims = r.unpack(f"<{d}I")
    (channels,) = r.unpack("<I")
    spacing = r.unpack(f"<{d}d")
    try:
        return Grid(tuple(dims), tuple(spacing), channels)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def _check_magic(r: _Reader, magic: bytes):
    got = r.take(4) if len(r.data) >= 4 else r.data
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")


def encode_field(f: Field) -> bytes:
    return FIELD_MAGIC + _pack_grid(f.grid) + f.values.astype("<f8").tobytes()


def decode_field(data: bytes) -> Field:
    r = _Reader(data)
    _check_magic(r, FIELD_MAGIC)
    grid = _read_grid(r)
    values = r.f64(grid.size)
    r.finish()
    return Field(grid, values)


def encode_ensemble(ens: Ensemble) -> bytes:
    return (
        ENSEMBLE_MAGIC
        + struct.pack("<I", len(ens))
        + _pack_grid(ens.grid)
        + ens.values.astype("<f8").tobytes()
    )


def decode_ensemble(data: bytes) -> Ensemble:
    r = _Reader(data)
    _check_magic(r, ENSEMBLE_MAGIC)
    (count,) = r.unpack("<I")
    if count == 0:
        raise FormatError("ensemble file holds zero members")
    grid = _read_grid(r)
    values = r.f64(count * grid.size)
    r.finish()
    return Ensemble(grid, values.reshape(count, grid.size))


def encode_checkpoint(kind: str, sizes, weights) -> bytes:
    tag = kind.encode("utf-8")
    sizes = [int(s) for s in sizes]
    weights = np.asarray(weights, dtype="<f8").reshape(-1)
    return (
        CHECKPOINT_MAGIC
        + struct.pack("<I", len(tag))
        + tag
        + struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
        + struct.pack("<Q", weights.size)
        + weights.tobytes()
    )


def decode_checkpoint(data: bytes) -> tuple[str, list[int], np.ndarray]:
    r = _Reader(data)
    _check_magic(r, CHECKPOINT_MAGIC)
    (taglen,) = r.unpack("<I")
    if taglen > 256:
        raise FormatError("implausible model kind tag length")
    try:
        kind = r.take(taglen).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("model kind tag is not utf-8") from exc
    (nsizes,) = r.unpack("<I")
    sizes = list(r.unpack(f"<{nsizes}I"))
    (nweights,) = r.unpack("<Q")
    weights = r.f64(nweights)
    r.finish()
    return kind, sizes, weights


def save_field(path, f: Field):
    Path(path).write_bytes(encode_field(f))


def load_field(path) -> Field:
    return decode_field(Path(path).read_bytes())


def save_ensemble(path, ens: Ensemble):
    Path(path).write_bytes(encode_ensemble(ens))


def load_ensemble(path) -> Ensemble:
    return decode_ensemble(Path(path).read_bytes())
