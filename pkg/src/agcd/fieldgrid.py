"""Gridded atmospheric states, synthetic weather-like data and the grid file format.

The synthetic generator builds a geopotential-like field ``z`` as a sum of
Gaussian blobs.  Blob centres rotate rigidly about the domain centre, the
field is diffused with a periodic heat kernel, and every sample carries a
hidden per-step amplitude growth factor (intensifying, steady or decaying
regime).  Temperature, zonal and meridional wind are derived from ``z``.
Because rotation and isotropic diffusion commute, the state at step ``n`` is
rendered in closed form rather than integrated, so every time index is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, LengthError, ShapeError
from .numcore import DTYPE

MAGIC = "AGCD-GRID"
VERSION = "1"

# Regime growth factors per 6-hour step and the trend word attached to each.
GROWTH_REGIMES: dict[str, float] = {"weakening": 0.88, "steady": 1.0, "strengthening": 1.12}


@dataclass(frozen=True)
class GridSpec:
    latitudes: tuple[float, ...]
    longitudes: tuple[float, ...]
    variables: tuple[str, ...]

    def __post_init__(self):
        lats = np.asarray(self.latitudes, dtype=DTYPE)
        lons = np.asarray(self.longitudes, dtype=DTYPE)
        if lats.size == 0 or lons.size == 0:
            raise ContractError("GridSpec needs at least one latitude and longitude")
        if np.any(np.abs(lats) > 90):
            raise ContractError("latitudes must lie in [-90, 90]")
        if lats.size > 1 and np.any(np.diff(lats) >= 0):
            raise ContractError("latitudes must be strictly decreasing")
        if np.any(lons < 0) or np.any(lons >= 360):
            raise ContractError("longitudes must lie in [0, 360)")
        if len(set(self.variables)) != len(self.variables) or not self.variables:
            raise ContractError("variable names must be unique and nonempty")
        for v in self.variables:
            if not v or any(c in v for c in ", \n"):
                raise ContractError(f"invalid variable name {v!r}")

    @property
    def H(self) -> int:
        return len(self.latitudes)

    @property
    def W(self) -> int:
        return len(self.longitudes)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    @classmethod
    def regular(cls, H: int = 16, W: int = 16, variables: Sequence[str] = ("z", "t", "u", "v")) -> "GridSpec":
        """Equal-angle grid with cell-centred latitudes (84.375 .. -84.375 for H=16)."""
        dlat = 180.0 / H
        lats = tuple(90.0 - dlat / 2 - i * dlat for i in range(H))
        lons = tuple(j * 360.0 / W for j in range(W))
        return cls(lats, lons, tuple(variables))


@dataclass
class AtmosphericState:
    sample_id: str
    time_index: int
    fields: dict[str, np.ndarray]

    def validate(self, spec: GridSpec) -> None:
        if not self.sample_id:
            raise ContractError("sample_id must be nonempty")
        for name in spec.variables:
            arr = self.fields.get(name)
            if arr is None:
                raise ContractError(f"state {self.sample_id}: missing variable {name!r}")
            if arr.shape != spec.shape:
                raise ShapeError(f"state {self.sample_id}: {name} has shape {arr.shape}, expected {spec.shape}")

    def stack(self, variables: Sequence[str]) -> np.ndarray:
        return np.stack([self.fields[v] for v in variables]).astype(DTYPE)

    @classmethod
    def from_stack(cls, sample_id: str, time_index: int, arr: np.ndarray, variables: Sequence[str]) -> "AtmosphericState":
        return cls(sample_id, time_index, {v: np.array(arr[i], dtype=DTYPE) for i, v in enumerate(variables)})


@dataclass(frozen=True)
class BlobTruth:
    variable: str
    row: float
    col: float
    amplitude: float
    sign: int


@dataclass
class OracleAnnotation:
    """Blob truth for one state plus the sample's hidden growth regime."""

    sample_id: str
    time_index: int
    blobs: list[BlobTruth]
    regime: str

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "time_index": self.time_index,
            "regime": self.regime,
            "blobs": [[b.variable, b.row, b.col, b.amplitude, b.sign] for b in self.blobs],
        }

    @classmethod
    def from_json(cls, d: dict) -> "OracleAnnotation":
        blobs = [BlobTruth(v, float(r), float(c), float(a), int(s)) for v, r, c, a, s in d["blobs"]]
        return cls(d["sample_id"], int(d["time_index"]), blobs, d["regime"])


@dataclass
class Dataset:
    """Sequences of states sharing one grid; ``sequences[i][k]`` is step k of sample i."""

    spec: GridSpec
    sequences: list[list[AtmosphericState]]
    annotations: list[list[OracleAnnotation]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def states(self) -> Iterable[AtmosphericState]:
        for seq in self.sequences:
            yield from seq

    def pairs(self, lead: int = 1) -> list[tuple[AtmosphericState, AtmosphericState]]:
        return [(seq[k], seq[k + lead]) for seq in self.sequences for k in range(len(seq) - lead)]


@dataclass(frozen=True)
class GeneratorParams:
    rotation_per_step: float = 0.16
    diffusivity: float = 0.06
    min_blobs: int = 1
    max_blobs: int = 3
    sigma_range: tuple[float, float] = (1.4, 2.4)
    amplitude_range: tuple[float, float] = (1.0, 3.0)
    temperature_coupling: float = 0.8
    meridional_contrast: float = 2.0
    max_start: int = 0


# ---------------------------------------------------------------------------
# dynamics


def diffuse_periodic(field_: np.ndarray, kappa: float, steps: float = 1.0) -> np.ndarray:
    """Exact periodic heat-kernel step; the zero wavenumber (domain mean) is untouched."""
    H, W = field_.shape
    ky = 2 * np.pi * np.fft.fftfreq(H)
    kx = 2 * np.pi * np.fft.fftfreq(W)
    # discrete Laplacian symbol, matching a 5-point stencil
    lap = (2 * np.cos(ky)[:, None] - 2) + (2 * np.cos(kx)[None, :] - 2)
    spec = np.fft.fft2(field_) * np.exp(kappa * steps * lap)
    return np.real(np.fft.ifft2(spec))


def _periodic_delta(x: np.ndarray, c: float, n: int) -> np.ndarray:
    d = x - c
    return d - n * np.round(d / n)


def render_blobs(shape: tuple[int, int], centers, sigmas, amplitudes) -> np.ndarray:
    H, W = shape
    rows = np.arange(H, dtype=DTYPE)
    cols = np.arange(W, dtype=DTYPE)
    out = np.zeros(shape, dtype=DTYPE)
    for (r0, c0), s, a in zip(centers, sigmas, amplitudes):
        dr = _periodic_delta(rows, r0, H)
        dc = _periodic_delta(cols, c0, W)
        out += a * np.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2) / (2 * s * s))
    return out


def rotate_about_center(r: float, c: float, angle: float, shape: tuple[int, int]) -> tuple[float, float]:
    H, W = shape
    cr, cc = (H - 1) / 2.0, (W - 1) / 2.0
    dr, dc = r - cr, c - cc
    ca, sa = math.cos(angle), math.sin(angle)
    nr = cr + ca * dr - sa * dc
    nc = cc + sa * dr + ca * dc
    return nr % H, nc % W


def derive_fields(z: np.ndarray, spec: GridSpec, gp: GeneratorParams) -> dict[str, np.ndarray]:
    lat = np.deg2rad(np.asarray(spec.latitudes, dtype=DTYPE))
    t = gp.temperature_coupling * z + gp.meridional_contrast * np.cos(lat)[:, None] * np.ones((1, spec.W))
    dz_drow = (np.roll(z, -1, axis=0) - np.roll(z, 1, axis=0)) / 2.0
    dz_dcol = (np.roll(z, -1, axis=1) - np.roll(z, 1, axis=1)) / 2.0
    out = {"z": z, "t": t, "u": -dz_drow, "v": dz_dcol}
    return {name: out[name] for name in spec.variables}


def gen_synthetic(
    seed: int,
    n_samples: int,
    spec: GridSpec | None = None,
    horizon_steps: int = 1,
    params: GeneratorParams | None = None,
    prefix: str = "s",
) -> Dataset:
    """Deterministic dataset of ``n_samples`` sequences with ``horizon_steps + 1`` states each."""
    if n_samples < 0:
        raise ContractError("n_samples must be >= 0")
    if horizon_steps < 1:
        raise ContractError("horizon_steps must be >= 1")
    spec = spec or GridSpec.regular()
    if set(spec.variables) - {"z", "t", "u", "v"}:
        raise ContractError("synthetic generator only knows variables z, t, u, v")
    gp = params or GeneratorParams()
    rng = np.random.default_rng(seed)
    regimes = list(GROWTH_REGIMES)
    sequences, annotations = [], []
    for i in range(n_samples):
        nb = int(rng.integers(gp.min_blobs, gp.max_blobs + 1))
        r0 = rng.uniform(0, spec.H, nb)
        c0 = rng.uniform(0, spec.W, nb)
        sig = rng.uniform(*gp.sigma_range, nb)
        amp = rng.uniform(*gp.amplitude_range, nb)
        sign = np.where(rng.random(nb) < 0.6, 1, -1)
        regime = regimes[int(rng.integers(len(regimes)))]
        start = int(rng.integers(0, gp.max_start + 1)) if gp.max_start else 0
        growth = GROWTH_REGIMES[regime]
        sid = f"{prefix}{i:05d}"
        seq, ann = [], []
        for k in range(horizon_steps + 1):
            n = start + k
            centers = [rotate_about_center(r, c, gp.rotation_per_step * n, spec.shape) for r, c in zip(r0, c0)]
            amps = sign * amp * growth**n
            z = diffuse_periodic(render_blobs(spec.shape, centers, sig, amps), gp.diffusivity, n)
            seq.append(AtmosphericState(sid, n, derive_fields(z, spec, gp)))
            peak = [a * s * s / (s * s + 2 * gp.diffusivity * n) for a, s in zip(amp * growth**n, sig)]
            blobs = [BlobTruth("z", rc[0], rc[1], float(p), int(sg)) for rc, p, sg in zip(centers, peak, sign)]
            ann.append(OracleAnnotation(sid, n, blobs, regime))
        sequences.append(seq)
        annotations.append(ann)
    return Dataset(spec, sequences, annotations)


# ---------------------------------------------------------------------------
# weights, statistics, climatology


def latitude_weights(spec: GridSpec) -> np.ndarray:
    c = np.cos(np.deg2rad(np.asarray(spec.latitudes, dtype=DTYPE)))
    return c / c.mean()


@dataclass
class NormStats:
    mean: dict[str, float]
    std: dict[str, float]

    STD_FLOOR = 1e-6

    @classmethod
    def fit(cls, states: Iterable[AtmosphericState], variables: Sequence[str]) -> "NormStats":
        sums = {v: [] for v in variables}
        for s in states:
            for v in variables:
                sums[v].append(s.fields[v])
        if not any(sums[v] for v in variables):
            raise ContractError("NormStats.fit needs at least one state")
        mean = {v: float(np.mean(sums[v])) for v in variables}
        std = {v: max(float(np.std(sums[v])), cls.STD_FLOOR) for v in variables}
        return cls(mean, std)

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls({k: float(v) for k, v in d["mean"].items()}, {k: max(float(v), cls.STD_FLOOR) for k, v in d["std"].items()})


def _check_stats(state: AtmosphericState, stats: NormStats) -> None:
    for v in state.fields:
        if v not in stats.mean or v not in stats.std:
            raise ContractError(f"no normalization statistics for variable {v!r}")


def normalize_state(state: AtmosphericState, stats: NormStats) -> AtmosphericState:
    _check_stats(state, stats)
    f = {v: (x - stats.mean[v]) / max(stats.std[v], NormStats.STD_FLOOR) for v, x in state.fields.items()}
    return AtmosphericState(state.sample_id, state.time_index, f)


def denormalize_state(state: AtmosphericState, stats: NormStats) -> AtmosphericState:
    _check_stats(state, stats)
    f = {v: x * max(stats.std[v], NormStats.STD_FLOOR) + stats.mean[v] for v, x in state.fields.items()}
    return AtmosphericState(state.sample_id, state.time_index, f)


@dataclass
class ClimatologyTable:
    fields: dict[str, np.ndarray]


def compute_climatology(states: Iterable[AtmosphericState] | Dataset) -> ClimatologyTable:
    if isinstance(states, Dataset):
        states = states.states()
    acc: dict[str, np.ndarray] = {}
    n = 0
    for s in states:
        for v, x in s.fields.items():
            acc[v] = acc[v] + x if v in acc else np.array(x, dtype=DTYPE)
        n += 1
    if n == 0:
        raise ContractError("climatology of an empty dataset is undefined")
    return ClimatologyTable({v: a / n for v, a in acc.items()})


def anomaly(state: AtmosphericState, clim: ClimatologyTable) -> dict[str, np.ndarray]:
    return {v: x - clim.fields[v] for v, x in state.fields.items()}


# ---------------------------------------------------------------------------
# AGCD-GRID v1 files


def write_grid_file(path: str | Path, dataset: Dataset) -> None:
    """Write every state of ``dataset`` (sequences flattened in order)."""
    spec = dataset.spec
    states = list(dataset.states())
    header = f"{MAGIC} {VERSION} {spec.H} {spec.W} {len(spec.variables)} {len(states)} {','.join(spec.variables)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for s in states:
            s.validate(spec)
            if "\n" in s.sample_id:
                raise ContractError("sample_id may not contain newlines")
            fh.write(f"{s.sample_id}\n{s.time_index}\n".encode("utf-8"))
            fh.write(s.stack(spec.variables).astype("<f8").tobytes())


def _readline(fh) -> bytes:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise LengthError("grid file truncated inside a text line")
    return line[:-1]


def read_grid_file(path: str | Path, spec: GridSpec | None = None) -> Dataset:
    """Read an AGCD-GRID v1 file; consecutive states of one sample form a sequence.

    Latitudes and longitudes are not stored; ``spec`` supplies them, else a
    regular grid of the stored size is assumed.
    """
    with open(path, "rb") as fh:
        head = fh.readline()
        try:
            parts = head.decode("utf-8").rstrip("\n").split(" ")
        except UnicodeDecodeError as exc:
            raise FormatError("grid header is not UTF-8") from exc
        if len(parts) != 7 or parts[0] != MAGIC:
            raise FormatError(f"bad grid file magic: {head[:16]!r}")
        if parts[1] != VERSION:
            raise FormatError(f"unsupported grid version {parts[1]}")
        H, W, nv, ns = (int(x) for x in parts[2:6])
        variables = tuple(parts[6].split(",")) if parts[6] else ()
        if len(variables) != nv:
            raise FormatError("variable count does not match header")
        if spec is None:
            spec = GridSpec.regular(H, W, variables)
        elif spec.shape != (H, W) or spec.variables != variables:
            raise FormatError("grid file does not match the supplied GridSpec")
        nbytes = nv * H * W * 8
        sequences: list[list[AtmosphericState]] = []
        for _ in range(ns):
            sid = _readline(fh).decode("utf-8")
            t = int(_readline(fh))
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise LengthError(f"payload for {sid!r} truncated: {len(raw)} of {nbytes} bytes")
            arr = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(nv, H, W)
            state = AtmosphericState.from_stack(sid, t, arr, variables)
            if sequences and sequences[-1][-1].sample_id == sid:
                sequences[-1].append(state)
            else:
                sequences.append([state])
        if fh.read(1):
            raise FormatError("trailing bytes after declared samples")
    return Dataset(spec, sequences)
