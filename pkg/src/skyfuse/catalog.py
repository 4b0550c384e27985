"""Star catalog ingest.

The only accepted format is a 4-column CSV::

    # optional comments
    id,ra_deg,dec_deg,vmag
    1,101.2871,-16.7161,-1.46

Conversion from native Hipparcos/Gaia distributions to this schema is a
preprocessing step outside this package.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

HEADER = "id,ra_deg,dec_deg,vmag"


class CatalogError(ValueError):
    """Base class for catalog problems. ``line`` is 1-based, or None."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CatalogParseError(CatalogError):
    pass


class CatalogRangeError(CatalogError):
    pass


class EmptyCatalogError(CatalogError):
    pass


@dataclass(frozen=True)
class StarRecord:
    id: int
    ra_deg: float
    dec_deg: float
    vmag: float


@dataclass(frozen=True)
class Catalog:
    stars: tuple[StarRecord, ...]
    source_name: str = "<memory>"
    _arrays: dict = field(default=None, init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.stars)

    def __iter__(self):
        return iter(self.stars)

    def arrays(self) -> dict[str, np.ndarray]:
        """Column view (cached): ``id``, ``ra``, ``dec``, ``vmag`` and unit vectors ``xyz``."""
        if self._arrays is None:
            cols = {
                "id": np.array([s.id for s in self.stars], dtype=np.int64),
                "ra": np.array([s.ra_deg for s in self.stars], dtype=np.float64),
                "dec": np.array([s.dec_deg for s in self.stars], dtype=np.float64),
                "vmag": np.array([s.vmag for s in self.stars], dtype=np.float64),
            }
            a, d = np.radians(cols["ra"]), np.radians(cols["dec"])
            cols["xyz"] = np.stack([np.cos(d) * np.cos(a), np.cos(d) * np.sin(a), np.sin(d)], axis=1)
            object.__setattr__(self, "_arrays", cols)
        return self._arrays


def _parse_float(text: str, name: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CatalogParseError(f"non-numeric {name} {text!r}", lineno) from None
    if not math.isfinite(value):
        raise CatalogParseError(f"non-finite {name} {text!r}", lineno)
    return value


def parse_catalog(stream: TextIO | str, source_name: str | None = None) -> Catalog:
    """Parse the 4-column CSV format into a :class:`Catalog`.

    ``stream`` may be a text stream or the CSV content itself. ``ra_deg``
    equal to 360 is folded to 0; anything else outside [0, 360) or a
    declination outside [-90, 90] raises :class:`CatalogRangeError`.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
        source_name = source_name or "<string>"
    source_name = source_name or getattr(stream, "name", "<stream>")

    stars: list[StarRecord] = []
    seen: set[int] = set()
    first_content = True
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n").strip()
        if not line or line.startswith("#"):
            continue
        if first_content and line.replace(" ", "") == HEADER:
            first_content = False
            continue
        first_content = False

        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 4:
            raise CatalogParseError(f"expected 4 fields, got {len(fields)}", lineno)
        try:
            star_id = int(fields[0])
        except ValueError:
            raise CatalogParseError(f"non-integer id {fields[0]!r}", lineno) from None
        if star_id <= 0:
            raise CatalogRangeError(f"id must be positive, got {star_id}", lineno)
        ra = _parse_float(fields[1], "ra_deg", lineno)
        dec = _parse_float(fields[2], "dec_deg", lineno)
        vmag = _parse_float(fields[3], "vmag", lineno)

        if ra == 360.0:
            ra = 0.0
        if not 0.0 <= ra < 360.0:
            raise CatalogRangeError(f"ra_deg {ra} outside [0, 360)", lineno)
        if not -90.0 <= dec <= 90.0:
            raise CatalogRangeError(f"dec_deg {dec} outside [-90, 90]", lineno)
        if star_id in seen:
            raise CatalogParseError(f"duplicate id {star_id}", lineno)
        seen.add(star_id)
        stars.append(StarRecord(star_id, ra, dec, vmag))

    if not stars:
        raise EmptyCatalogError(f"no data lines in {source_name}")
    return Catalog(tuple(stars), source_name)


def read_catalog(path) -> Catalog:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_catalog(fh, source_name=str(path))


def serialize_catalog(catalog: Catalog | Iterable[StarRecord]) -> str:
    # repr() of a float round-trips exactly
    lines = [HEADER]
    for s in catalog:
        lines.append(f"{s.id},{s.ra_deg!r},{s.dec_deg!r},{s.vmag!r}")
    return "\n".join(lines) + "\n"


def write_catalog(catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_catalog(catalog))


def filter_by_magnitude(catalog: Catalog, vmag_max: float) -> Catalog:
    kept = tuple(s for s in catalog.stars if s.vmag <= vmag_max)
    return Catalog(kept, catalog.source_name)


# Galactic north pole in ICRS, used to give the synthetic sky a Milky-Way-like
# density band.
_GAL_POLE_RA = 192.85948
_GAL_POLE_DEC = 27.12825


def synthetic_catalog(
    n_stars: int,
    rng: np.random.Generator,
    mag_bright: float = -1.5,
    mag_faint: float = 7.0,
    mag_slope: float = 0.45,
    band_contrast: float = 2.0,
    band_width_deg: float = 15.0,
) -> Catalog:
    """Draw a Hipparcos-like synthetic sky.

    Magnitudes follow ``dN/dm ~ 10**(mag_slope * m)`` between the two limits.
    Positions are uniform on the sphere, thinned by rejection so that the
    density near the galactic plane is ``1 + band_contrast`` times the density
    at the galactic poles.
    """
    if n_stars < 1:
        raise ValueError("n_stars must be >= 1")
    pole = np.array(
        [
            math.cos(math.radians(_GAL_POLE_DEC)) * math.cos(math.radians(_GAL_POLE_RA)),
            math.cos(math.radians(_GAL_POLE_DEC)) * math.sin(math.radians(_GAL_POLE_RA)),
            math.sin(math.radians(_GAL_POLE_DEC)),
        ]
    )
    width = math.radians(band_width_deg)
    ras: list[np.ndarray] = []
    decs: list[np.ndarray] = []
    have = 0
    while have < n_stars:
        m = 2 * (n_stars - have) + 64
        ra = rng.uniform(0.0, 360.0, m)
        sin_dec = rng.uniform(-1.0, 1.0, m)
        dec = np.degrees(np.arcsin(sin_dec))
        cos_dec = np.sqrt(1.0 - sin_dec**2)
        v = np.stack(
            [cos_dec * np.cos(np.radians(ra)), cos_dec * np.sin(np.radians(ra)), sin_dec],
            axis=1,
        )
        gal_lat = np.arcsin(np.clip(v @ pole, -1.0, 1.0))
        accept = (1.0 + band_contrast * np.exp(-0.5 * (gal_lat / width) ** 2)) / (
            1.0 + band_contrast
        )
        keep = rng.uniform(0.0, 1.0, m) < accept
        ras.append(ra[keep])
        decs.append(dec[keep])
        have += int(keep.sum())
    ra = np.concatenate(ras)[:n_stars]
    dec = np.concatenate(decs)[:n_stars]

    # inverse CDF of the truncated exponential in magnitude
    a = math.log(10.0) * mag_slope
    u = rng.uniform(0.0, 1.0, n_stars)
    lo, hi = math.exp(a * mag_bright), math.exp(a * mag_faint)
    vmag = np.log(lo + u * (hi - lo)) / a

    stars = tuple(
        StarRecord(i + 1, round(float(r), 6) % 360.0, round(float(d), 6), round(float(mg), 3))
        for i, (r, d, mg) in enumerate(zip(ra, dec, vmag))
    )
    return Catalog(stars, "synthetic")
