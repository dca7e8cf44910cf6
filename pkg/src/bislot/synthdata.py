"""Procedural bilateral fundus-like image pairs with known structure.

Each patient gets one layout (optic disc, macula, vessel arcades) rendered for
the left eye and mirrored exactly for the right eye.  Between the eyes only the
label-driven properties (disc radius, lesions, brightness), the background
texture and the pixel noise differ.

Four labels:

* 0 normal      -- none of the findings below
* 1 disc asym.  -- |disc radius L - disc radius R| >= ``asym_threshold``.  Both
  eyes' radii are marginally uniform on ``disc_radius_range`` whatever the
  label, so one eye alone carries no information about it.
* 2 lesions     -- bright dots in at least one eye
* 3 pallor      -- one eye globally brightened relative to the other; the
  shared per-patient brightness varies more than the shift itself.

Images are stored as ``uint8`` ``(3, S, S)`` arrays; ``as_float`` maps to [0, 1].
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import grid_side
from .tensor import Rng

NUM_CLASSES = 4
CLASS_NAMES = ("normal", "disc_asymmetry", "lesions", "pallor")
SPLITS = ("train", "val", "test")

# per-eye structure record layout (float32)
PARAM_FIELDS = ("disc_cx", "disc_cy", "disc_r", "disc_aspect", "mac_cx", "mac_cy",
                "v0_x0", "v0_y0", "v0_x1", "v0_y1", "v1_x0", "v1_y0", "v1_x1", "v1_y1",
                "v2_x0", "v2_y0", "v2_x1", "v2_y1", "n_lesions", "brightness")
N_PARAMS = len(PARAM_FIELDS)

MAGIC = b"BSLT"
FORMAT_VERSION = 1


@dataclass
class DatasetSpec:
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    image_side: int = 64
    patch_size: int = 8
    seed: int = 0
    disc_radius_range: tuple[float, float] = (6.0, 11.0)
    asym_threshold: float = 1.5
    prevalence: tuple[float, float, float] = (0.4, 0.3, 0.3)   # classes 1, 2, 3

    def __post_init__(self):
        grid_side(self.image_side, self.patch_size)
        lo, hi = self.disc_radius_range
        if not 0 < lo < hi:
            raise ValueError("disc_radius_range must be increasing and positive")
        if hi - lo < 3 * self.asym_threshold:
            raise ValueError("disc radius range must span at least 3 asymmetry thresholds")

    @property
    def num_tokens(self) -> int:
        return grid_side(self.image_side, self.patch_size) ** 2

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class BilateralSample:
    left: np.ndarray            # uint8 (3, S, S)
    right: np.ndarray
    labels: np.ndarray          # uint8 (C,)
    disc_mask_left: np.ndarray  # bool (N,)
    disc_mask_right: np.ndarray
    params_left: np.ndarray     # float32 (N_PARAMS,)
    params_right: np.ndarray

    def targets(self, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
        from .encoder import patch_targets
        return patch_targets(as_float(self.left), patch_size), patch_targets(
            as_float(self.right), patch_size)


@dataclass
class Dataset:
    """Column-stacked samples of one split."""

    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray
    disc_mask_left: np.ndarray
    disc_mask_right: np.ndarray
    params_left: np.ndarray
    params_right: np.ndarray
    label_source: np.ndarray = field(default=None)   # index of the sample whose labels apply

    def __post_init__(self):
        if self.label_source is None:
            self.label_source = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: list[BilateralSample]) -> Dataset:
        return cls(*(np.stack([getattr(s, f) for s in samples]) for f in (
            "left", "right", "labels", "disc_mask_left", "disc_mask_right", "params_left",
            "params_right")))

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.left[idx], self.right[idx], self.labels[idx], self.disc_mask_left[idx],
                       self.disc_mask_right[idx], self.params_left[idx], self.params_right[idx],
                       self.label_source[idx])

    def sample(self, i: int) -> BilateralSample:
        return BilateralSample(self.left[i], self.right[i], self.labels[i], self.disc_mask_left[i],
                               self.disc_mask_right[i], self.params_left[i], self.params_right[i])


def as_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# rendering


def _smooth_field(rng: Rng, side: int, coarse: int = 6) -> np.ndarray:
    """Bilinearly upsampled coarse noise in roughly [-1, 1]."""
    grid = rng.normal((coarse, coarse))
    pos = np.linspace(0, coarse - 1, side)
    i0 = np.clip(np.floor(pos).astype(int), 0, coarse - 2)
    t = pos - i0
    rows = grid[i0] * (1 - t)[:, None] + grid[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]


def _bezier_distance(xx, yy, p0, p1, p2, samples: int = 96) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    d2 = (xx[None] - pts[:, 0, None, None]) ** 2 + (yy[None] - pts[:, 1, None, None]) ** 2
    return np.sqrt(d2.min(axis=0))


def _layout(spec: DatasetSpec, rng: Rng) -> dict:
    """Left-eye structure parameters in pixel units."""
    s = spec.image_side
    scale = s / 64.0
    lo, hi = spec.disc_radius_range
    return {
        "disc_cx": s * 0.32 + rng.uniform(None, -3, 3) * scale,
        "disc_cy": s * 0.5 + rng.uniform(None, -4, 4) * scale,
        "disc_r": rng.uniform(None, lo, hi) * scale,
        "disc_aspect": rng.uniform(None, 0.93, 1.07),
        "mac_dx": (22 + rng.uniform(None, -2, 2)) * scale,
        "mac_dy": rng.uniform(None, -2, 3) * scale,
        "arc_spread": rng.uniform(None, 14, 20) * scale,
        "arc_reach": rng.uniform(None, 30, 38) * scale,
        "nasal_vessel": bool(rng.uniform() < 0.5),
        "brightness": rng.uniform(None, 0.8, 1.2),
        "hue": rng.uniform(None, -0.04, 0.04),
        # vessel control-point offsets, shared by both eyes (mirrored)
        "vessel_jitter": rng.uniform((3, 4), -1.5, 1.5) * scale,
    }


def _render_eye(spec: DatasetSpec, lay: dict, mirror: bool, rng: Rng, disc_r: float,
                lesions: bool, pallor: float):
    s = spec.image_side
    scale = s / 64.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    vj = lay["vessel_jitter"]

    # the right eye is an exact horizontal mirror of the left layout
    sign = -1.0 if mirror else 1.0
    cx = lay["disc_cx"] if not mirror else s - lay["disc_cx"]
    cy = lay["disc_cy"]
    mac_x = cx + sign * lay["mac_dx"]
    mac_y = cy + lay["mac_dy"]

    base = np.array([0.78 + lay["hue"], 0.36, 0.18])
    tex = 1.0 + 0.06 * _smooth_field(rng, s)
    img = base[:, None, None] * tex[None]

    # macula: dark gaussian blob
    mac = np.exp(-((xx - mac_x) ** 2 + (yy - mac_y) ** 2) / (2 * (4.5 * scale) ** 2))
    img = img * (1 - 0.45 * mac)[None]

    # vessels: two arcades curving temporally around the macula, optional nasal branch
    vessels = []
    for i, vert in enumerate((-1.0, 1.0)):
        p0 = np.array([cx, cy])
        p1 = np.array([cx + sign * (8 * scale + vj[i, 0]), cy + vert * lay["arc_spread"] + vj[i, 1]])
        p2 = np.array([cx + sign * (lay["arc_reach"] + vj[i, 2]),
                       cy + vert * lay["arc_spread"] * 0.8 + vj[i, 3]])
        vessels.append((p0, p1, p2))
    if lay["nasal_vessel"]:
        p0 = np.array([cx, cy])
        vessels.append((p0, np.array([cx - sign * 8 * scale, cy - 6 * scale + vj[2, 1]]),
                        np.array([cx - sign * (16 * scale + vj[2, 2]), cy - 12 * scale + vj[2, 3]])))
    vessel_mask = np.zeros((s, s))
    for p0, p1, p2 in vessels:
        d = _bezier_distance(xx, yy, p0, p1, p2)
        vessel_mask = np.maximum(vessel_mask, np.exp(-(d / (1.1 * scale)) ** 2))
    img = img * (1 - 0.5 * vessel_mask)[None]

    # optic disc: bright ellipse with a soft 1-px rim
    rx, ry = disc_r, disc_r * lay["disc_aspect"]
    rho = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    edge = np.clip((1.0 - rho) * min(rx, ry) + 0.5, 0.0, 1.0)
    disc_col = np.array([0.97, 0.88, 0.62])
    img = img * (1 - edge)[None] + disc_col[:, None, None] * edge[None]

    n_les = 0
    if lesions:
        n_les = int(rng.integers(2, 5))
        les_col = np.array([0.98, 0.93, 0.35])
        for _ in range(n_les):
            ang, rad = rng.uniform(None, 0, 2 * np.pi), rng.uniform(None, 0, 0.36 * s)
            lx, ly = s / 2 + rad * np.cos(ang), s / 2 + rad * np.sin(ang)
            lr = rng.uniform(None, 2.0, 3.0) * scale
            w = np.clip(lr + 0.5 - np.sqrt((xx - lx) ** 2 + (yy - ly) ** 2), 0.0, 1.0)
            img = img * (1 - w)[None] + les_col[:, None, None] * w[None]

    img = img * lay["brightness"] * (1.0 + pallor)
    # circular fundus aperture
    r_ap = np.sqrt((xx - s / 2) ** 2 + (yy - s / 2) ** 2)
    aperture = np.clip(0.47 * s - r_ap + 0.5, 0.0, 1.0)
    img = img * aperture[None] + rng.normal((3, s, s), 0.01)
    img = np.clip(img, 0.0, 1.0)

    # ground-truth disc mask: patch centres inside the ellipse
    p = spec.patch_size
    g = s // p
    centers = (np.arange(g) + 0.5) * p
    pcx, pcy = np.meshgrid(centers, centers)
    mask = (((pcx - cx) / rx) ** 2 + ((pcy - cy) / ry) ** 2 <= 1.0).reshape(-1)

    params = np.full(N_PARAMS, np.nan, dtype=np.float32)
    params[0:6] = (cx, cy, disc_r, lay["disc_aspect"], mac_x, mac_y)
    for vi, (p0, _, p2) in enumerate(vessels):
        params[6 + 4 * vi: 10 + 4 * vi] = (*p0, *p2)
    params[18] = n_les
    params[19] = lay["brightness"] * (1.0 + pallor)
    return img, mask, params


def _paired_radius(r_left: float, lo: float, hi: float, positive: bool, thr: float,
                   rng: Rng) -> float:
    """Right-eye radius, uniform on [lo, hi] whatever ``r_left`` and ``positive``."""
    width = hi - lo
    if positive:
        d = rng.uniform(None, thr, 2 * thr) * (1 if rng.uniform() < 0.5 else -1)
        return lo + (r_left - lo + d) % width
    r = r_left + rng.uniform(None, -thr / 4, thr / 4)
    if r < lo:
        r = 2 * lo - r
    elif r > hi:
        r = 2 * hi - r
    return r


def generate_sample(spec: DatasetSpec, rng: Rng) -> BilateralSample:
    scale = spec.image_side / 64.0
    p_asym, p_les, p_pal = spec.prevalence
    asym = rng.uniform() < p_asym
    les = rng.uniform() < p_les
    pal = rng.uniform() < p_pal
    lay = _layout(spec, rng)
    lo, hi = (v * scale for v in spec.disc_radius_range)
    r_left = lay["disc_r"]
    r_right = _paired_radius(r_left, lo, hi, asym, spec.asym_threshold * scale, rng)

    les_eyes = (False, False)
    if les:
        les_eyes = [(True, False), (False, True), (True, True)][int(rng.integers(0, 3))]
    pal_eye = int(rng.integers(0, 2)) if pal else -1
    shift = rng.uniform(None, 0.22, 0.32)

    left, m_l, p_l = _render_eye(spec, lay, False, rng.child(1), r_left, les_eyes[0],
                                 shift if pal_eye == 0 else 0.0)
    right, m_r, p_r = _render_eye(spec, lay, True, rng.child(2), r_right, les_eyes[1],
                                  shift if pal_eye == 1 else 0.0)
    labels = np.zeros(NUM_CLASSES, dtype=np.uint8)
    labels[1] = abs(r_left - r_right) >= spec.asym_threshold * scale
    labels[2] = les
    labels[3] = pal
    labels[0] = not labels[1:].any()
    return BilateralSample(to_uint8(left), to_uint8(right), labels, m_l, m_r, p_l, p_r)


def generate_split(spec: DatasetSpec, split: str) -> Dataset:
    base = Rng(spec.seed, stream_id=100 + SPLITS.index(split))
    n = spec.split_size(split)
    return Dataset.from_samples([generate_sample(spec, base.child(i)) for i in range(n)])


def generate_dataset(spec: DatasetSpec) -> dict[str, Dataset]:
    return {split: generate_split(spec, split) for split in SPLITS}


# ---------------------------------------------------------------------------
# perturbations


def add_gaussian_noise(img, sigma: float, rng: Rng) -> np.ndarray:
    """i.i.d. N(0, sigma^2) per pixel, clamped to [0, 1]; float in, float out."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return np.clip(x + rng.normal(x.shape, sigma), 0.0, 1.0)


def derangement(n: int, rng: Rng) -> np.ndarray:
    """Uniform random permutation with no fixed point (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def shuffle_pairs(data: Dataset, mode: str, rng: Rng, perm: np.ndarray | None = None) -> Dataset:
    """Reassign right eyes across samples by a derangement.

    Labels, left eyes and left masks stay with their sample; ``label_source``
    records that labels follow the left eye.  ``mode`` is ``eval_shuffle`` or
    ``train_shuffle`` (identical mechanics; the name documents intent).
    """
    if mode not in ("eval_shuffle", "train_shuffle"):
        raise ValueError(f"unknown shuffle mode {mode!r}")
    n = len(data)
    if perm is None:
        perm = derangement(n, rng)
    perm = np.asarray(perm)
    if np.any(perm == np.arange(n)):
        raise ValueError("shuffle permutation must be a derangement")
    return Dataset(data.left, data.right[perm], data.labels, data.disc_mask_left,
                   data.disc_mask_right[perm], data.params_left, data.params_right[perm],
                   data.label_source)


# ---------------------------------------------------------------------------
# binary export / import
#
# little-endian layout:
#   header  : magic "BSLT" | u16 version | u16 image_side | u16 patch_size | u16 classes
#             | u32 n_train | u32 n_val | u32 n_test | i64 seed | f64 r_lo | f64 r_hi
#             | f64 asym_threshold | 3 x f64 prevalence
#   records : for each split in (train, val, test), for each sample:
#             left  u8[3*S*S] (C, H, W order) | right u8[3*S*S]
#             disc mask left / right: ceil(N/8) bytes each, np.packbits little bit order
#             labels u8[C] | params left / right: f32[20] each

_HEADER = struct.Struct("<4sHHHHIIIqdddddd")


def _record_size(spec: DatasetSpec) -> int:
    s, n = spec.image_side, spec.num_tokens
    return 2 * 3 * s * s + 2 * ((n + 7) // 8) + NUM_CLASSES + 2 * 4 * N_PARAMS


def save_dataset(path, spec: DatasetSpec, splits: dict[str, Dataset]) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, spec.image_side, spec.patch_size,
                              NUM_CLASSES, len(splits["train"]), len(splits["val"]),
                              len(splits["test"]), spec.seed, *spec.disc_radius_range,
                              spec.asym_threshold, *spec.prevalence))
        for name in SPLITS:
            d = splits[name]
            for i in range(len(d)):
                fh.write(d.left[i].astype(np.uint8).tobytes())
                fh.write(d.right[i].astype(np.uint8).tobytes())
                fh.write(np.packbits(d.disc_mask_left[i], bitorder="little").tobytes())
                fh.write(np.packbits(d.disc_mask_right[i], bitorder="little").tobytes())
                fh.write(d.labels[i].astype(np.uint8).tobytes())
                fh.write(d.params_left[i].astype("<f4").tobytes())
                fh.write(d.params_right[i].astype("<f4").tobytes())


def load_dataset(path) -> tuple[DatasetSpec, dict[str, Dataset]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for a dataset header")
    (magic, version, side, patch, classes, n_tr, n_va, n_te, seed, r_lo, r_hi, thr,
     p1, p2, p3) = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    if classes != NUM_CLASSES:
        raise ValueError(f"dataset has {classes} classes, expected {NUM_CLASSES}")
    spec = DatasetSpec(n_train=n_tr, n_val=n_va, n_test=n_te, image_side=side, patch_size=patch,
                       seed=seed, disc_radius_range=(r_lo, r_hi), asym_threshold=thr,
                       prevalence=(p1, p2, p3))
    rec = _record_size(spec)
    total = n_tr + n_va + n_te
    if len(raw) != _HEADER.size + rec * total:
        raise ValueError("dataset file size does not match its header")
    img = 3 * side * side
    nbytes = (spec.num_tokens + 7) // 8
    n = spec.num_tokens
    dt = np.dtype([("left", np.uint8, img), ("right", np.uint8, img),
                   ("ml", np.uint8, nbytes), ("mr", np.uint8, nbytes),
                   ("labels", np.uint8, classes), ("pl", "<f4", N_PARAMS),
                   ("pr", "<f4", N_PARAMS)])
    arr = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=total)
    out: dict[str, Dataset] = {}
    start = 0
    for name, size in zip(SPLITS, (n_tr, n_va, n_te)):
        a = arr[start:start + size]
        start += size
        unpack = lambda m: np.unpackbits(m, axis=1, bitorder="little")[:, :n].astype(bool)  # noqa: E731
        out[name] = Dataset(
            left=a["left"].reshape(size, 3, side, side).copy(),
            right=a["right"].reshape(size, 3, side, side).copy(),
            labels=a["labels"].copy(),
            disc_mask_left=unpack(a["ml"]), disc_mask_right=unpack(a["mr"]),
            params_left=a["pl"].astype(np.float32), params_right=a["pr"].astype(np.float32))
    return spec, out


def spec_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)


def disc_center_patch(params: np.ndarray, spec: DatasetSpec) -> tuple[float, float]:
    """Disc centre in patch-grid units (column, row)."""
    return float(params[0]) / spec.patch_size - 0.5, float(params[1]) / spec.patch_size - 0.5


def disc_area_patches(params: np.ndarray, spec: DatasetSpec) -> float:
    return math.pi * float(params[2]) ** 2 * float(params[3]) / spec.patch_size ** 2
