"""Procedural two-domain smoke scenes.

Both domains share one geometric model: anisotropic, rotated Gaussian puffs
over a linear background gradient. Target scenes additionally get
multiplicative texture noise on the smoke density, hard-edged background
clutter and a gamma shift, so geometry statistics match across domains while
pixel statistics do not.

Dataset file layout (little-endian)::

    magic        6 bytes  b"DADET1"
    height       uint32
    width        uint32
    scene_count  uint32
    per scene:
      split      uint8    0 source_train, 1 target_train, 2 target_test, 3 source_test
      seed       uint64
      domain     uint8    0 source, 1 target
      image      float64[height * width], row-major
      n_runs     uint32
      runs       uint32[n_runs]   mask run lengths, alternating 0-runs and 1-runs,
                                  starting with a (possibly empty) 0-run
      n_boxes    uint32
      boxes      float64[n_boxes * 4]   x_min, y_min, x_max, y_max
"""
import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"DADET1"
SPLITS = ("source_train", "target_train", "target_test", "source_test")


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1


class DatasetFormatError(ValueError):
    """Raised for truncated or inconsistent dataset files; ``field`` names the culprit."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class DomainParams:
    puff_count: tuple = (1, 3)
    puff_radius: tuple = (2.5, 6.5)
    intensity: tuple = (0.6, 1.0)
    background: tuple = (0.05, 0.35)
    texture_noise: float = 0.0
    gamma: float = 1.0
    clutter_density: float = 0.0  # expected clutter patches per 64x64 area
    mask_threshold: float = 0.15  # fraction of a puff's peak intensity

    def __post_init__(self):
        for name in ("puff_count", "puff_radius", "intensity", "background"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.puff_count[0] < 0 or self.puff_radius[0] <= 0:
            raise ValueError("puff_count must be >= 0 and puff_radius > 0")
        if self.texture_noise < 0 or self.clutter_density < 0 or self.gamma <= 0:
            raise ValueError("texture_noise, clutter_density must be >= 0 and gamma > 0")
        if not 0 < self.mask_threshold < 1:
            raise ValueError("mask_threshold must lie in (0, 1)")


SOURCE_PARAMS = DomainParams()
TARGET_PARAMS = DomainParams(texture_noise=0.6, gamma=0.35, clutter_density=3.0)


@dataclass(eq=False)
class Scene:
    image: np.ndarray
    domain: Domain
    boxes: np.ndarray
    mask: np.ndarray
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.domain == other.domain
            and self.image.tobytes() == other.image.tobytes()
            and self.mask.tobytes() == other.mask.tobytes()
            and self.boxes.tobytes() == other.boxes.tobytes()
        )

    def digest(self):
        h = hashlib.sha256()
        h.update(struct.pack("<QB", self.seed, int(self.domain)))
        for arr in (self.image, self.mask, self.boxes):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _tight_box(mask):
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def generate_scene(seed, domain, params=None, size=(64, 64)):
    """Render one scene. Fully determined by (seed, domain, params, size)."""
    domain = Domain(domain)
    if params is None:
        params = SOURCE_PARAMS if domain == Domain.SOURCE else TARGET_PARAMS
    h, w = size
    geom = np.random.default_rng([seed, 0])
    look = np.random.default_rng([seed, 1 + int(domain)])

    yy, xx = np.mgrid[0:h, 0:w] + 0.5

    lo, hi = geom.uniform(*params.background, size=2)
    angle = geom.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx / w + np.sin(angle) * yy / h
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    background = lo + (hi - lo) * t

    n_puffs = int(geom.integers(params.puff_count[0], params.puff_count[1] + 1))
    density = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    boxes = []
    cutoff = -2.0 * np.log(params.mask_threshold)
    for _ in range(n_puffs):
        cx = geom.uniform(0.1 * w, 0.9 * w)
        cy = geom.uniform(0.1 * h, 0.9 * h)
        sx, sy = geom.uniform(*params.puff_radius, size=2)
        theta = geom.uniform(0, np.pi)
        peak = geom.uniform(*params.intensity)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        q = (u / sx) ** 2 + (v / sy) ** 2
        density += peak * np.exp(-0.5 * q)
        puff_mask = q < cutoff
        mask |= puff_mask.astype(np.uint8)
        boxes.append(_tight_box(puff_mask))
    density = np.clip(density, 0.0, 1.0)

    if domain == Domain.TARGET:
        if params.texture_noise > 0:
            field_ = gaussian_filter(look.normal(size=(h, w)), sigma=2.0)
            field_ /= max(field_.std(), 1e-12)
            density = np.clip(density * (1.0 + params.texture_noise * field_), 0.0, 1.0)
        n_clutter = look.poisson(params.clutter_density * h * w / 4096.0)
        for _ in range(n_clutter):
            cw, ch = look.integers(2, 9, size=2)
            x0 = int(look.integers(0, w - cw + 1))
            y0 = int(look.integers(0, h - ch + 1))
            background[y0:y0 + ch, x0:x0 + cw] = look.uniform(0.0, 1.0)

    image = background + (1.0 - background) * density
    image = np.clip(image, 0.0, 1.0)
    if domain == Domain.TARGET and params.gamma != 1.0:
        image = image ** params.gamma

    box_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return Scene(image=image, domain=domain, boxes=box_arr, mask=mask, seed=int(seed))


@dataclass(eq=False)
class Dataset:
    splits: dict = field(default_factory=lambda: {name: [] for name in SPLITS})
    size: tuple = (64, 64)

    def __post_init__(self):
        for name in SPLITS:
            self.splits.setdefault(name, [])

    def __len__(self):
        return sum(len(v) for v in self.splits.values())

    def __getitem__(self, split):
        return self.splits[split]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return tuple(self.size) == tuple(other.size) and all(
            self.splits[name] == other.splits[name] for name in SPLITS
        )

    def checksum(self):
        h = hashlib.sha256()
        h.update(struct.pack("<II", *self.size))
        for name in SPLITS:
            h.update(name.encode())
            for scene in self.splits[name]:
                h.update(scene.digest().encode())
        return h.hexdigest()

    def split_checksums(self):
        out = {}
        for name in SPLITS:
            h = hashlib.sha256()
            for scene in self.splits[name]:
                h.update(scene.digest().encode())
            out[name] = h.hexdigest()
        return out


def generate_split(seed, counts, source_params=None, target_params=None, size=(64, 64)):
    """Build a dataset with one scene seed stream shared by all splits.

    ``counts`` maps split name to scene count; missing splits default to 0.
    Seeds are drawn without repetition so no two scenes share a seed.
    """
    source_params = source_params or SOURCE_PARAMS
    target_params = target_params or TARGET_PARAMS
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown split(s): {sorted(unknown)}")
    if any(int(c) < 0 for c in counts.values()):
        raise ValueError("split counts must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x64617461,)))
    used = set()
    dataset = Dataset(size=tuple(size))
    for name in SPLITS:
        domain = Domain.SOURCE if name.startswith("source") else Domain.TARGET
        params = source_params if domain == Domain.SOURCE else target_params
        for _ in range(int(counts.get(name, 0))):
            s = int(rng.integers(0, 2**63))
            while s in used:
                s = int(rng.integers(0, 2**63))
            used.add(s)
            dataset.splits[name].append(generate_scene(s, domain, params, size))
    return dataset


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


def _rle_encode(mask):
    flat = mask.reshape(-1).astype(np.uint8)
    change = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges)
    if flat.size and flat[0] == 1:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def _rle_decode(runs, shape):
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(shape)


def dumps(dataset):
    h, w = dataset.size
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", h, w, len(dataset)))
    for split_id, name in enumerate(SPLITS):
        for scene in dataset.splits[name]:
            buf.write(struct.pack("<BQB", split_id, scene.seed, int(scene.domain)))
            buf.write(np.ascontiguousarray(scene.image, dtype="<f8").tobytes())
            runs = _rle_encode(scene.mask)
            buf.write(struct.pack("<I", len(runs)))
            buf.write(runs.astype("<u4").tobytes())
            buf.write(struct.pack("<I", len(scene.boxes)))
            buf.write(np.ascontiguousarray(scene.boxes, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def read(self, n, field):
        if self.pos + n > len(self.data):
            raise DatasetFormatError(field, f"file truncated at byte {len(self.data)}, needed {n} more")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, field):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), field))


def loads(data):
    r = _Reader(data)
    magic = r.read(len(MAGIC), "magic")
    if magic != MAGIC:
        raise DatasetFormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
    h, w, count = r.unpack("<III", "header")
    if h == 0 or w == 0:
        raise DatasetFormatError("height" if h == 0 else "width", "image dimension must be positive")
    dataset = Dataset(size=(h, w))
    for k in range(count):
        split_id, seed, domain = r.unpack("<BQB", f"scene[{k}].header")
        if split_id >= len(SPLITS):
            raise DatasetFormatError(f"scene[{k}].split", f"unknown split id {split_id}")
        if domain > 1:
            raise DatasetFormatError(f"scene[{k}].domain", f"unknown domain {domain}")
        image = np.frombuffer(r.read(8 * h * w, f"scene[{k}].image"), dtype="<f8")
        (n_runs,) = r.unpack("<I", f"scene[{k}].n_runs")
        runs = np.frombuffer(r.read(4 * n_runs, f"scene[{k}].runs"), dtype="<u4")
        total = int(runs.astype(np.int64).sum())
        if total != h * w:
            raise DatasetFormatError(
                "height/width",
                f"header declares {h}x{w}={h * w} pixels but scene[{k}] mask covers {total}",
            )
        (n_boxes,) = r.unpack("<I", f"scene[{k}].n_boxes")
        boxes = np.frombuffer(r.read(32 * n_boxes, f"scene[{k}].boxes"), dtype="<f8")
        scene = Scene(
            image=image.astype(np.float64).reshape(h, w),
            domain=Domain(domain),
            boxes=boxes.astype(np.float64).reshape(-1, 4),
            mask=_rle_decode(runs, (h, w)),
            seed=int(seed),
        )
        dataset.splits[SPLITS[split_id]].append(scene)
    if r.pos != len(data):
        raise DatasetFormatError(
            "scene_count", f"{len(data) - r.pos} trailing bytes after {count} declared scenes"
        )
    return dataset


def export_scenes(dataset, path):
    with open(path, "wb") as fh:
        fh.write(dumps(dataset))


def import_scenes(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
