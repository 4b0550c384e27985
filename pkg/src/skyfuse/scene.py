"""Synthetic observations: attitude sampling, pinhole projection, rendering.

Pixel convention: pixel ``(row j, col i)`` covers ``[i, i+1) x [j, j+1)`` in
continuous image coordinates, so its center sits at ``(i + 0.5, j + 0.5)``
and the optical axis lands on ``(image_px / 2, image_px / 2)``. ``u`` grows
to the right (columns), ``v`` grows downward (rows). At roll 0 celestial
north is up.

On-disk dataset layout (directory)::

    meta.txt     key=value lines (see ``write_dataset``)
    samples.bin  count fixed-size little-endian records, packed, no padding:
                   label     u32
                   attitude  3 x f64   (boresight_ra_deg, boresight_dec_deg, roll_deg)
                   image     image_px*image_px x f32, row-major
                   heatmap   heat_px*heat_px x f32, row-major
                   coords    3*n_stars x f32
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import Catalog
from .sphere import ClusterModel, to_unit_vector


@dataclass(frozen=True)
class CameraModel:
    fov_deg: float = 20.0
    image_px: int = 128
    psf_sigma_px: float = 1.2
    mag_zero: float = 3.0
    mag_limit: float = 6.0

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 90.0:
            raise ValueError("fov_deg must be in (0, 90)")
        if self.image_px < 16:
            raise ValueError("image_px must be >= 16")
        if self.psf_sigma_px <= 0:
            raise ValueError("psf_sigma_px must be > 0")
        if self.mag_limit < self.mag_zero:
            raise ValueError("mag_limit must be >= mag_zero")

    @property
    def focal_px(self) -> float:
        return self.image_px / (2.0 * math.tan(math.radians(self.fov_deg) / 2.0))


@dataclass(frozen=True)
class RenderConfig:
    """Per-dataset rendering knobs that are not camera properties."""

    heat_px: int = 32
    heat_sigma: float = 1.0
    n_stars: int = 8
    noise_sigma: float = 0.02


@dataclass(frozen=True)
class Attitude:
    boresight_ra_deg: float
    boresight_dec_deg: float
    roll_deg: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.boresight_dec_deg <= 90.0:
            raise ValueError("boresight_dec_deg outside [-90, 90]")

    def boresight(self) -> np.ndarray:
        return to_unit_vector(self.boresight_ra_deg, self.boresight_dec_deg)

    def camera_axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x, y, z) camera axes in ICRS: x = +u (right), y = +v (down), z = boresight."""
        a = math.radians(self.boresight_ra_deg)
        d = math.radians(self.boresight_dec_deg)
        r = math.radians(self.roll_deg)
        z = self.boresight()
        east = np.array([-math.sin(a), math.cos(a), 0.0])
        north = np.array([-math.sin(d) * math.cos(a), -math.sin(d) * math.sin(a), math.cos(d)])
        # right-handed camera frame: x = y cross z with y = -north, so x = -east
        x0, y0 = -east, -north
        x = math.cos(r) * x0 + math.sin(r) * y0
        y = -math.sin(r) * x0 + math.cos(r) * y0
        return x, y, z


def sample_attitude(rng: np.random.Generator) -> Attitude:
    ra = rng.uniform(0.0, 360.0)
    dec = math.degrees(math.asin(rng.uniform(-1.0, 1.0)))
    roll = rng.uniform(0.0, 360.0)
    return Attitude(float(ra), float(dec), float(roll))


def project_stars(catalog: Catalog, attitude: Attitude, camera: CameraModel) -> np.ndarray:
    """Gnomonic projection of the visible catalog stars.

    Returns an ``(M, 3)`` array of ``(u_px, v_px, intensity)`` rows sorted by
    descending intensity, ties by catalog id. Stars behind the camera, fainter
    than ``mag_limit`` or farther than ``fov/sqrt(2)`` from the boresight are
    dropped.
    """
    cols = catalog.arrays()
    xyz, vmag, ids = cols["xyz"], cols["vmag"], cols["id"]
    x, y, z = attitude.camera_axes()
    depth = xyz @ z
    max_angle = math.radians(camera.fov_deg) / math.sqrt(2.0)
    keep = (depth > 0.0) & (vmag <= camera.mag_limit) & (depth >= math.cos(max_angle))
    p = xyz[keep]
    depth = depth[keep]
    f = camera.focal_px
    c = camera.image_px / 2.0
    u = c + f * (p @ x) / depth
    v = c + f * (p @ y) / depth
    intensity = np.minimum(1.0, 10.0 ** (-0.4 * (vmag[keep] - camera.mag_zero)))
    order = np.lexsort((ids[keep], -intensity))
    return np.stack([u, v, intensity], axis=1)[order]


def _splat(canvas: np.ndarray, u: float, v: float, peak: float, sigma: float) -> None:
    size = canvas.shape[0]
    reach = 4.0 * sigma
    i0 = max(0, int(math.floor(u - 0.5 - reach)))
    i1 = min(size - 1, int(math.ceil(u - 0.5 + reach)))
    j0 = max(0, int(math.floor(v - 0.5 - reach)))
    j1 = min(size - 1, int(math.ceil(v - 0.5 + reach)))
    if i0 > i1 or j0 > j1:
        return
    dx = np.arange(i0, i1 + 1) + 0.5 - u
    dy = np.arange(j0, j1 + 1) + 0.5 - v
    r2 = dy[:, None] ** 2 + dx[None, :] ** 2
    blob = peak * np.exp(-r2 / (2.0 * sigma * sigma))
    blob[r2 > reach * reach] = 0.0
    canvas[j0 : j1 + 1, i0 : i1 + 1] += blob


def render_image(
    stars: np.ndarray,
    camera: CameraModel,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Photometric frame: Gaussian PSF per star, additive noise, clip to [0, 1]."""
    img = np.zeros((camera.image_px, camera.image_px))
    for u, v, intensity in np.asarray(stars).reshape(-1, 3):
        _splat(img, u, v, intensity, camera.psf_sigma_px)
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng")
        img += rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def render_heatmap(
    stars: np.ndarray, heat_px: int, heat_sigma: float, image_px: int
) -> np.ndarray:
    """Geometry-only map: every star gets a unit-peak Gaussian at heatmap scale."""
    hm = np.zeros((heat_px, heat_px))
    scale = heat_px / image_px
    for u, v, _ in np.asarray(stars).reshape(-1, 3):
        _splat(hm, u * scale, v * scale, 1.0, heat_sigma)
    return np.clip(hm, 0.0, 1.0)


def coord_vector(stars: np.ndarray, n_stars: int, camera: CameraModel) -> np.ndarray:
    """Fixed-length ``(u, v, intensity)`` list of the brightest in-frame stars.

    ``u`` and ``v`` are normalized by ``image_px``; stars outside the frame
    (kept by ``project_stars`` for their PSF tails) are skipped. Unused slots
    are exactly zero.
    """
    out = np.zeros(3 * n_stars)
    stars = np.asarray(stars).reshape(-1, 3)
    px = camera.image_px
    inside = (stars[:, 0] >= 0) & (stars[:, 0] < px) & (stars[:, 1] >= 0) & (stars[:, 1] < px)
    chosen = stars[inside][:n_stars]
    rows = chosen.copy()
    rows[:, :2] /= px
    out[: rows.size] = rows.ravel()
    return out


@dataclass
class Sample:
    image: np.ndarray
    heatmap: np.ndarray
    coords: np.ndarray
    label: int
    attitude: Attitude
    noise_seed: int


def sample_seed(master_seed: int, index: int) -> int:
    """Seed of the private RNG stream for sample ``index``."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_sample(
    index: int,
    catalog: Catalog,
    model: ClusterModel,
    camera: CameraModel,
    render: RenderConfig,
    master_seed: int,
) -> Sample:
    seed = sample_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    att = sample_attitude(rng)
    stars = project_stars(catalog, att, camera)
    image = render_image(stars, camera, render.noise_sigma, rng)
    heat = render_heatmap(stars, render.heat_px, render.heat_sigma, camera.image_px)
    coords = coord_vector(stars, render.n_stars, camera)
    label = model.labels(att.boresight()[None, :])[0]
    return Sample(
        image.astype(np.float32),
        heat.astype(np.float32),
        coords.astype(np.float32),
        int(label),
        att,
        seed,
    )


@dataclass
class Dataset:
    """Struct-of-arrays dataset; indexing yields :class:`Sample` objects."""

    images: np.ndarray  # (N, P, P) float32
    heatmaps: np.ndarray  # (N, H, H) float32
    coords: np.ndarray  # (N, 3 n_stars) float32
    labels: np.ndarray  # (N,) int64
    attitudes: np.ndarray  # (N, 3) float64: ra, dec, roll
    k: int
    camera: CameraModel
    render: RenderConfig
    split: str = "train"
    master_seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("dataset must be non-empty")
        if np.any(self.labels >= self.k) or np.any(self.labels < 0):
            raise ValueError("label outside [0, k)")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        ra, dec, roll = self.attitudes[i]
        return Sample(
            self.images[i],
            self.heatmaps[i],
            self.coords[i],
            int(self.labels[i]),
            Attitude(float(ra), float(dec), float(roll)),
            sample_seed(self.master_seed, i),
        )

    def boresights(self) -> np.ndarray:
        return to_unit_vector(self.attitudes[:, 0], self.attitudes[:, 1])


def _make_chunk(args):
    indices, catalog, model, camera, render, master_seed = args
    return [make_sample(i, catalog, model, camera, render, master_seed) for i in indices]


def generate_dataset(
    catalog: Catalog,
    model: ClusterModel,
    count: int,
    camera: CameraModel = CameraModel(),
    render: RenderConfig = RenderConfig(),
    master_seed: int = 0,
    split: str = "train",
    workers: int = 1,
) -> Dataset:
    """Render ``count`` labeled samples.

    Each sample draws from its own stream seeded by ``(master_seed, index)``,
    so the result does not depend on ``workers`` or on generation order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if workers > 1 and count > 1:
        chunks = np.array_split(np.arange(count), min(workers * 4, count))
        jobs = [(c.tolist(), catalog, model, camera, render, master_seed) for c in chunks]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = [s for part in pool.map(_make_chunk, jobs) for s in part]
    else:
        samples = _make_chunk((range(count), catalog, model, camera, render, master_seed))

    return Dataset(
        images=np.stack([s.image for s in samples]),
        heatmaps=np.stack([s.heatmap for s in samples]),
        coords=np.stack([s.coords for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        attitudes=np.array(
            [
                (s.attitude.boresight_ra_deg, s.attitude.boresight_dec_deg, s.attitude.roll_deg)
                for s in samples
            ],
            dtype=np.float64,
        ),
        k=model.k,
        camera=camera,
        render=render,
        split=split,
        master_seed=master_seed,
    )


def record_dtype(image_px: int, heat_px: int, n_stars: int) -> np.dtype:
    return np.dtype(
        [
            ("label", "<u4"),
            ("attitude", "<f8", (3,)),
            ("image", "<f4", (image_px, image_px)),
            ("heatmap", "<f4", (heat_px, heat_px)),
            ("coords", "<f4", (3 * n_stars,)),
        ]
    )


def write_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "skyfuse-dataset-1",
        "k": ds.k,
        "count": len(ds),
        "split": ds.split,
        "master_seed": ds.master_seed,
        **asdict(ds.camera),
        **asdict(ds.render),
        **ds.extra,
    }
    with open(d / "meta.txt", "w", encoding="utf-8", newline="\n") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value!r}\n" if isinstance(value, float) else f"{key}={value}\n")

    rec = np.empty(len(ds), dtype=record_dtype(ds.camera.image_px, ds.render.heat_px, ds.render.n_stars))
    rec["label"] = ds.labels
    rec["attitude"] = ds.attitudes
    rec["image"] = ds.images
    rec["heatmap"] = ds.heatmaps
    rec["coords"] = ds.coords
    with open(d / "samples.bin", "wb") as fh:
        fh.write(rec.tobytes())


def read_meta(path) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    return meta


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = read_meta(d / "meta.txt")
    camera = CameraModel(
        fov_deg=float(meta["fov_deg"]),
        image_px=int(meta["image_px"]),
        psf_sigma_px=float(meta["psf_sigma_px"]),
        mag_zero=float(meta["mag_zero"]),
        mag_limit=float(meta["mag_limit"]),
    )
    render = RenderConfig(
        heat_px=int(meta["heat_px"]),
        heat_sigma=float(meta["heat_sigma"]),
        n_stars=int(meta["n_stars"]),
        noise_sigma=float(meta["noise_sigma"]),
    )
    dtype = record_dtype(camera.image_px, render.heat_px, render.n_stars)
    raw = (d / "samples.bin").read_bytes()
    count = int(meta["count"])
    if len(raw) != count * dtype.itemsize:
        raise ValueError(
            f"samples.bin holds {len(raw)} bytes, expected {count} x {dtype.itemsize}"
        )
    rec = np.frombuffer(raw, dtype=dtype)
    known = {"format", "k", "count", "split", "master_seed"} | set(asdict(camera)) | set(asdict(render))
    return Dataset(
        images=rec["image"].copy(),
        heatmaps=rec["heatmap"].copy(),
        coords=rec["coords"].copy(),
        labels=rec["label"].astype(np.int64),
        attitudes=rec["attitude"].copy(),
        k=int(meta["k"]),
        camera=camera,
        render=render,
        split=meta.get("split", "train"),
        master_seed=int(meta.get("master_seed", 0)),
        extra={key: v for key, v in meta.items() if key not in known},
    )


def default_workers() -> int:
    return max(1, int(os.environ.get("SKYFUSE_THREADS", "1")))
