"""Synthetic insulator scenes: strings of discs on varied backgrounds.

Classes: 0 normal string (box around the whole string), 1 self-explosion
(a missing disc; box around the gap), 2 partial damage (a notched disc; box
around that disc). A defective string carries only its defect box.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bbox_loss import BBox
from .metrics import Detection, read_jsonl, write_jsonl
from .tensor import load_tnsr, save_tnsr

NORMAL, EXPLOSION, DAMAGE = 0, 1, 2

PALETTES = {
    # glass: blue-green tones; porcelain: browns and off-whites
    "glass": [(0.30, 0.62, 0.58), (0.25, 0.48, 0.70), (0.40, 0.72, 0.45)],
    "porcelain": [(0.55, 0.33, 0.22), (0.86, 0.84, 0.78), (0.68, 0.52, 0.38)],
}


@dataclass
class SceneSpec:
    canvas: int = 128
    background: str = "random"          # flat | gradient | noise | random
    objects: tuple[int, int] = (1, 2)
    discs: tuple[int, int] = (4, 7)
    disc_radius: tuple[float, float] = (6.0, 9.0)
    spacing: float = 1.25               # disc pitch in radii
    thickness: float = 0.5              # disc half-thickness in radii
    angle_jitter: float = 10.0          # degrees around horizontal/vertical
    p_explosion: float = 0.35
    p_damage: float = 0.35
    notch_degrees: tuple[float, float] = (130.0, 180.0)   # angular width of the damage notch
    pixel_noise: float = 0.02
    palettes: tuple[str, ...] = ("glass", "porcelain")

    def __post_init__(self):
        self.objects = tuple(self.objects)
        self.discs = tuple(self.discs)
        self.disc_radius = tuple(self.disc_radius)
        self.palettes = tuple(self.palettes)
        self.notch_degrees = tuple(self.notch_degrees)
        if self.background not in ("flat", "gradient", "noise", "random"):
            raise ValueError(f"unknown background mode {self.background!r}")
        if not 4 <= self.discs[0] <= self.discs[1] <= 10:
            raise ValueError("disc count range must lie within 4..10")
        if not 1 <= self.objects[0] <= self.objects[1]:
            raise ValueError("object count range must be >= 1")
        if self.p_explosion < 0 or self.p_damage < 0 or self.p_explosion + self.p_damage > 1:
            raise ValueError("defect probabilities must be non-negative and sum to <= 1")
        if not 0 < self.notch_degrees[0] <= self.notch_degrees[1] < 360:
            raise ValueError("notch_degrees must satisfy 0 < lo <= hi < 360")
        longest = (self.discs[1] - 1) * self.spacing * self.disc_radius[1] + 2 * self.disc_radius[1]
        if longest + 4 > self.canvas:
            raise ValueError(f"longest string ({longest:.0f}px) does not fit a {self.canvas}px canvas")

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scene spec keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class SampleRecord:
    image: str
    annotations: list[tuple[BBox, int]] = field(default_factory=list)


# -- rendering ---------------------------------------------------------------------

def _background(rng, spec: SceneSpec, mode: str) -> np.ndarray:
    n = spec.canvas
    base = rng.uniform(0.15, 0.85, size=3)
    if mode == "flat":
        img = np.broadcast_to(base[:, None, None], (3, n, n)).copy()
    elif mode == "gradient":
        other = rng.uniform(0.15, 0.85, size=3)
        ang = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
        t = (np.cos(ang) * xx + np.sin(ang) * yy)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = base[:, None, None] * (1 - t) + other[:, None, None] * t
    else:
        # value noise: random lattice, bilinear upsample, two octaves
        img = np.zeros((3, n, n))
        for cells, amp in ((4, 0.7), (9, 0.3)):
            lat = rng.uniform(0.1, 0.9, size=(3, cells + 1, cells + 1))
            pos = np.linspace(0, cells, n)
            i0 = np.minimum(pos.astype(int), cells - 1)
            f = pos - i0
            rows = lat[:, i0, :] * (1 - f)[None, :, None] + lat[:, i0 + 1, :] * f[None, :, None]
            img += amp * (rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :])
    return img


def _ellipse_mask(xx, yy, cx, cy, a, b, theta):
    """Filled ellipse, semi-axis ``a`` along direction ``theta`` and ``b`` across it."""
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, u, v


def _mask_box(mask) -> BBox | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return BBox((x0 + x1) / 2, (y0 + y1) / 2, float(x1 - x0), float(y1 - y0))


def _string_extent(n_discs, r, spec: SceneSpec, theta):
    half_len = (n_discs - 1) * spec.spacing * r / 2 + spec.thickness * r + 0.6 * r
    ex = abs(math.cos(theta)) * half_len + abs(math.sin(theta)) * r
    ey = abs(math.sin(theta)) * half_len + abs(math.cos(theta)) * r
    return ex + 1, ey + 1


def generate_scene(seed: int, spec: SceneSpec | None = None):
    """Render one scene. Returns (image [3,H,W] float32 in [0,1], [(BBox, class), ...])."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    n = spec.canvas
    mode = spec.background if spec.background != "random" else ("flat", "gradient", "noise")[rng.integers(3)]
    img = _background(rng, spec, mode)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    count = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    placed: list[tuple[float, float, float, float]] = []
    annotations: list[tuple[BBox, int]] = []
    for _ in range(count):
        n_discs = int(rng.integers(spec.discs[0], spec.discs[1] + 1))
        r = float(rng.uniform(*spec.disc_radius))
        theta = math.radians(rng.choice([0.0, 90.0]) + rng.uniform(-spec.angle_jitter, spec.angle_jitter))
        ex, ey = _string_extent(n_discs, r, spec, theta)
        spot = None
        for _try in range(40):
            cx = rng.uniform(ex + 1, n - ex - 1)
            cy = rng.uniform(ey + 1, n - ey - 1)
            box = (cx - ex - 3, cy - ey - 3, cx + ex + 3, cy + ey + 3)
            if all(box[2] <= p[0] or p[2] <= box[0] or box[3] <= p[1] or p[3] <= box[1] for p in placed):
                spot = (cx, cy, box)
                break
        if spot is None:
            continue
        cx, cy, box = spot
        placed.append(box)
        annotations.append(_draw_string(img, rng, spec, xx, yy, cx, cy, r, theta, n_discs))

    if spec.pixel_noise > 0:
        img = img + rng.normal(0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), annotations


def _draw_string(img, rng, spec, xx, yy, cx, cy, r, theta, n_discs):
    u_dir = (math.cos(theta), math.sin(theta))
    pitch = spec.spacing * r
    u = rng.random()
    label = EXPLOSION if u < spec.p_explosion else DAMAGE if u < spec.p_explosion + spec.p_damage else NORMAL
    defect = int(rng.integers(1, n_discs - 1)) if label == EXPLOSION else int(rng.integers(0, n_discs))

    pal = PALETTES[spec.palettes[int(rng.integers(len(spec.palettes)))]]
    color = np.clip(np.array(pal[int(rng.integers(len(pal)))]) + rng.normal(0, 0.04, 3), 0, 1)

    # rod with end fittings
    half = (n_discs - 1) * pitch / 2 + spec.thickness * r + 0.6 * r
    rod, _, _ = _ellipse_mask(xx, yy, cx, cy, half, max(1.0, 0.16 * r), theta)
    rod_color = np.array([0.25, 0.25, 0.27]) + rng.normal(0, 0.03, 3)
    img[:, rod] = rod_color[:, None]
    string_mask = rod.copy()

    target_box = None
    notch_start = rng.uniform(0, 2 * math.pi)
    notch_width = math.radians(rng.uniform(*spec.notch_degrees))
    for k in range(n_discs):
        off = (k - (n_discs - 1) / 2) * pitch
        dcx, dcy = cx + off * u_dir[0], cy + off * u_dir[1]
        # disc: thin along the rod, wide across it
        mask, a_coord, b_coord = _ellipse_mask(xx, yy, dcx, dcy, spec.thickness * r, r, theta)
        if label == EXPLOSION and k == defect:
            gap, _, _ = _ellipse_mask(xx, yy, dcx, dcy, pitch / 2, r, theta)
            target_box = _mask_box(gap)
            continue
        if label == DAMAGE and k == defect:
            target_box = _mask_box(mask)
            ang = np.arctan2(b_coord / r, a_coord / (spec.thickness * r))
            rel = np.mod(ang - notch_start, 2 * math.pi)
            rad = np.sqrt((a_coord / (spec.thickness * r)) ** 2 + (b_coord / r) ** 2)
            mask = mask & ~((rel < notch_width) & (rad > 0.2))
        rad2 = (a_coord / (spec.thickness * r)) ** 2 + (b_coord / r) ** 2
        shade = 0.7 + 0.3 * (1 - np.clip(rad2, 0, 1))
        img[:, mask] = color[:, None] * shade[mask][None, :]
        string_mask |= mask
    if label == NORMAL:
        target_box = _mask_box(string_mask)
    return target_box, label


# -- dataset -------------------------------------------------------------------------

def _split_order(n: int, seed: int) -> list[int]:
    return sorted(range(n), key=lambda i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest())


def split_sizes(n: int, ratio=(6, 2, 2)) -> tuple[int, int, int]:
    tot = sum(ratio)
    n_train = round(n * ratio[0] / tot)
    n_val = round(n * ratio[1] / tot)
    return n_train, n_val, n - n_train - n_val


def build_dataset(spec: SceneSpec | None, n: int, out_dir, split=(6, 2, 2), seed: int = 0) -> dict[str, Path]:
    """Render ``n`` scenes into ``out_dir`` and write train/val/test JSONL manifests."""
    spec = spec or SceneSpec()
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records: dict[int, list[Detection]] = {}
    for i in range(n):
        img, anns = generate_scene(_scene_seed(seed, i), spec)
        rel = f"images/{i:05d}.tnsr"
        save_tnsr(out / rel, img)
        records[i] = [Detection(rel, b, c) for b, c in anns]
    order = _split_order(n, seed)
    n_train, n_val, _ = split_sizes(n, split)
    parts = {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}
    paths = {}
    for name, idx in parts.items():
        p = out / f"{name}.jsonl"
        write_jsonl(p, [d for i in sorted(idx) for d in records[i]])
        paths[name] = p
    with open(out / "spec.json", "w") as fh:
        json.dump({"seed": seed, "n": n, "split": list(split), "spec": asdict(spec)}, fh, indent=2, sort_keys=True)
    return paths


def _scene_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1, dtype=np.uint64)[0])


def load_split(data_dir, name: str) -> list[SampleRecord]:
    """Group a manifest's annotations by image, in first-seen order."""
    data_dir = Path(data_dir)
    recs: dict[str, SampleRecord] = {}
    for d in read_jsonl(data_dir / f"{name}.jsonl"):
        recs.setdefault(d.image, SampleRecord(d.image)).annotations.append((d.bbox, d.cls))
    return list(recs.values())


def load_images(data_dir, records: list[SampleRecord]) -> np.ndarray:
    return np.stack([load_tnsr(os.path.join(data_dir, r.image)) for r in records]).astype(np.float32)
