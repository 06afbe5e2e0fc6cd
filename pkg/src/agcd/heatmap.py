"""Deterministic field rendering, binary PPM output and quantized field digests."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, NumericError

REGIONS = (
    "north-west", "north", "north-east",
    "west", "central", "east",
    "south-west", "south", "south-east",
)

DEFAULT_ANCHORS = (
    (0.0, (59, 76, 192)),
    (0.25, (124, 159, 249)),
    (0.5, (221, 221, 221)),
    (0.75, (245, 156, 125)),
    (1.0, (180, 4, 38)),
)


@dataclass(frozen=True)
class RGBImage:
    H: int
    W: int
    pixels: bytes  # row-major RGB triples

    def __post_init__(self):
        if self.H <= 0 or self.W <= 0:
            raise ContractError(f"image dimensions must be positive, got {self.H}x{self.W}")
        if len(self.pixels) != 3 * self.H * self.W:
            raise ContractError("pixel buffer length does not match image size")

    def array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.H, self.W, 3)

    def ppm_bytes(self) -> bytes:
        return f"P6\n{self.W} {self.H}\n255\n".encode("ascii") + self.pixels


@dataclass(frozen=True)
class ColormapSpec:
    anchors: tuple[tuple[float, tuple[int, int, int]], ...] = DEFAULT_ANCHORS
    bounds: tuple[tuple[str, float, float], ...] = ()

    def __post_init__(self):
        pos = [a[0] for a in self.anchors]
        if len(pos) < 2 or pos[0] != 0.0 or pos[-1] != 1.0 or any(b <= a for a, b in zip(pos, pos[1:])):
            raise ContractError("colormap anchors must increase strictly from 0 to 1")
        for name, lo, hi in self.bounds:
            if not lo < hi:
                raise ContractError(f"bounds for {name!r} need lo < hi")

    def bounds_for(self, variable: str) -> tuple[float, float]:
        for name, lo, hi in self.bounds:
            if name == variable:
                return lo, hi
        raise ContractError(f"no colormap bounds for variable {variable!r}")

    @classmethod
    def from_stats(cls, stats, width: float = 3.0) -> "ColormapSpec":
        """Dataset-global bounds mean +- width*std, fixed before training."""
        bounds = tuple((v, stats.mean[v] - width * stats.std[v], stats.mean[v] + width * stats.std[v]) for v in stats.mean)
        return cls(DEFAULT_ANCHORS, bounds)


def colorize(v: np.ndarray, anchors=DEFAULT_ANCHORS) -> np.ndarray:
    """Piecewise-linear colours for normalized values ``v`` in [0, 1]."""
    pos = np.array([a[0] for a in anchors])
    cols = np.array([a[1] for a in anchors], dtype=np.float64)
    rgb = np.stack([np.interp(v, pos, cols[:, c]) for c in range(3)], axis=-1)
    return np.floor(rgb + 0.5).astype(np.uint8)


def render_field(field: np.ndarray, cmap: ColormapSpec, variable: str | None = None,
                 lo: float | None = None, hi: float | None = None) -> RGBImage:
    field = np.asarray(field, dtype=np.float64)
    if np.isnan(field).any() or not np.isfinite(field).all():
        raise NumericError("render_field: non-finite value in field")
    if lo is None or hi is None:
        if variable is None:
            raise ContractError("render_field needs a variable name or explicit bounds")
        lo, hi = cmap.bounds_for(variable)
    if not lo < hi:
        raise ContractError("render_field: lo must be < hi")
    v = np.clip((field - lo) / (hi - lo), 0.0, 1.0)
    rgb = colorize(v, cmap.anchors)
    H, W = field.shape
    return RGBImage(H, W, rgb.tobytes())


def write_ppm(image: RGBImage, path: str | Path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(image.ppm_bytes())
    except OSError as exc:
        raise OSError(f"write_ppm: cannot write {path}: {exc}") from exc


def round_half_away(x: float, ndigits: int = 1) -> float:
    q = 10.0**ndigits
    r = math.floor(abs(x) * q + 0.5) / q
    r = math.copysign(r, x)
    return 0.0 if r == 0 else r


def region_of(row: int, col: int, H: int, W: int) -> str:
    band_r = min(3 * row // H, 2)
    band_c = min(3 * col // W, 2)
    return REGIONS[3 * band_r + band_c]


def region_parts(label: str) -> tuple[int, int]:
    """(row band, column band) of a region label."""
    i = REGIONS.index(label)
    return divmod(i, 3)


def region_from_parts(row_band: int, col_band: int) -> str:
    return REGIONS[3 * row_band + col_band]


@dataclass(frozen=True)
class FieldDigest:
    variable: str
    region: str          # region of the argmax
    max_value: float
    min_value: float
    min_region: str
    gradient: float      # mean gradient magnitude
    tendency: str | None = None

    def __post_init__(self):
        if self.region not in REGIONS or self.min_region not in REGIONS:
            raise ContractError("digest region must be one of the nine fixed labels")

    def to_json(self) -> dict:
        return {
            "variable": self.variable, "region": self.region, "max": self.max_value,
            "min": self.min_value, "min_region": self.min_region,
            "gradient": self.gradient, "tendency": self.tendency,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FieldDigest":
        return cls(d["variable"], d["region"], float(d["max"]), float(d["min"]), d["min_region"],
                   float(d["gradient"]), d.get("tendency"))

    def hash(self) -> str:
        import json
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def field_digest(field: np.ndarray, variable: str, tendency: str | None = None) -> FieldDigest:
    field = np.asarray(field, dtype=np.float64)
    H, W = field.shape
    imax = int(np.argmax(field))  # first occurrence: smallest row-major index
    imin = int(np.argmin(field))
    gr = (np.roll(field, -1, 0) - np.roll(field, 1, 0)) / 2.0
    gc = (np.roll(field, -1, 1) - np.roll(field, 1, 1)) / 2.0
    grad = float(np.mean(np.sqrt(gr * gr + gc * gc)))
    return FieldDigest(
        variable,
        region_of(imax // W, imax % W, H, W),
        round_half_away(float(field.flat[imax])),
        round_half_away(float(field.flat[imin])),
        region_of(imin // W, imin % W, H, W),
        round_half_away(grad),
        tendency,
    )


def digest_state(fields: dict[str, np.ndarray], variables: Sequence[str], tendency: str | None = None) -> list[FieldDigest]:
    return [field_digest(fields[v], v, tendency) for v in variables]
