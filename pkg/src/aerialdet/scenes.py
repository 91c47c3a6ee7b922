"""Synthetic aerial scenes: textured background, moving sprites, camera pan.

Everything is deterministic given the seeds. Human sprites are tall
(1:2.5) with head, banded torso and split legs. Cars are wide (2:1) with
a mottled body, panel seams, a dark window and wheels. Clutter is square
value noise.
Each human's clothing comes from its texture seed, so assigning seeds
to person ids 1..12 gives distinguishable synthetic "persons".
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .imagecore import BoundingBox, resize_bilinear

SPRITE_KINDS = ("human", "car", "clutter")


@dataclass(frozen=True)
class SpriteSpec:
    kind: str
    size: int                      # height for humans, width for cars, side for clutter
    velocity: tuple = (0.0, 0.0)   # px/frame, screen coordinates
    texture_seed: int = 0
    start: tuple = (0, 0)          # top-left at frame 0
    person_id: int = 0

    def __post_init__(self):
        if self.kind not in SPRITE_KINDS:
            raise ConfigError(f"unknown sprite kind {self.kind!r}")
        if self.size < 2:
            raise ConfigError("sprite size must be >= 2")

    @property
    def extent(self) -> tuple:
        return sprite_extent(self.kind, self.size)

    def box_at(self, t: int) -> BoundingBox:
        w, h = self.extent
        x = math.floor(self.start[0] + self.velocity[0] * t + 0.5)
        y = math.floor(self.start[1] + self.velocity[1] * t + 0.5)
        return BoundingBox(x, y, w, h)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 160
    height: int = 120
    n_frames: int = 60
    camera_pan: tuple = (0.0, 0.0)
    sprites: tuple = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8 or self.n_frames < 1:
            raise ConfigError("scene must be at least 8x8 with one frame")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        for j, sp in enumerate(self.sprites):
            for t in (0, self.n_frames - 1):
                b = sp.box_at(t)
                if b.x < 0 or b.y < 0 or b.x + b.w > self.width or b.y + b.h > self.height:
                    raise ConfigError(f"sprite {j} ({sp.kind}) leaves the frame by frame {t}")


@dataclass(frozen=True)
class GroundTruth:
    frame: int
    sprite: int
    kind: str
    box: BoundingBox

    def to_json(self) -> str:
        return json.dumps({"frame": self.frame, "sprite": self.sprite, "kind": self.kind,
                           "box": list(self.box)}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "GroundTruth":
        rec = json.loads(line)
        return cls(int(rec["frame"]), int(rec["sprite"]), rec["kind"], BoundingBox(*rec["box"]))


@dataclass
class Scene:
    frames: list
    truth: list = field(default_factory=list)

    def boxes(self, frame: int, kind: str | None = None) -> list:
        return [g.box for g in self.truth if g.frame == frame and (kind is None or g.kind == kind)]


def sprite_extent(kind: str, size: int) -> tuple:
    """(w, h) of a sprite of the given kind and nominal size."""
    if kind == "human":
        return max(2, round(size / 2.5)), size
    if kind == "car":
        return size, max(2, round(size / 2))
    return size, size


def value_noise(height: int, width: int, cell: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth noise in [0, 1]: a random lattice bilinearly upsampled."""
    gh = max(2, int(math.ceil(height / cell)) + 1)
    gw = max(2, int(math.ceil(width / cell)) + 1)
    grid = rng.random((gh, gw))
    big = resize_bilinear(grid, max(2, int(round(gw * cell))), max(2, int(round(gh * cell))))
    return big[:height, :width]


def background_texture(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    coarse = value_noise(height, width, 24.0, rng)
    fine = value_noise(height, width, 8.0, rng)
    return 0.25 + 0.35 * coarse + 0.15 * fine


def render_sprite(kind: str, size: int, texture_seed: int) -> np.ndarray:
    """Sprite appearance as an (h, w) array in [0, 1]."""
    w, h = sprite_extent(kind, size)
    rng = np.random.default_rng([texture_seed, SPRITE_KINDS.index(kind)])
    yy = (np.arange(h)[:, None] + 0.5) / h
    xx = (np.arange(w)[None, :] + 0.5) / w
    if kind == "human":
        shirt, pants = rng.uniform(0.05, 0.35), rng.uniform(0.6, 0.95)
        if rng.random() < 0.5:
            shirt, pants = pants, shirt
        stripe_period = rng.uniform(0.06, 0.12)
        img = np.full((h, w), 0.5)
        torso = (yy >= 0.18) & (yy < 0.55)
        bands = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * yy / stripe_period))
        img = np.where(torso, shirt + 0.25 * (bands - 0.5), img)
        legs = yy >= 0.55
        gap = np.abs(xx - 0.5) < 0.12
        img = np.where(legs & ~gap, pants, img)
        img = np.where(legs & gap, 0.5 * (shirt + pants) * 0.4, img)
        head = ((xx - 0.5) / 0.32) ** 2 + ((yy - 0.09) / 0.09) ** 2 <= 1.0
        skin = rng.uniform(0.7, 0.95)
        img = np.where(yy < 0.18, 0.35 * pants + 0.2, img)
        img = np.where(head, skin, img)
        img = img + rng.normal(0, 0.04, size=(h, w))
    elif kind == "car":
        body = rng.uniform(0.3, 0.9)
        img = body + 0.15 * (value_noise(h, w, 3.0, rng) - 0.5)
        panels = np.abs(((xx * 4) % 1.0) - 0.5) < 0.06
        img = np.where(panels & (yy > 0.45), body - 0.25, img)
        window = (yy > 0.15) & (yy < 0.45) & (xx > 0.25) & (xx < 0.75)
        img = np.where(window, 0.08 + 0.1 * (xx - 0.25), img)
        wheels = (yy > 0.8) & ((np.abs(xx - 0.2) < 0.08) | (np.abs(xx - 0.8) < 0.08))
        img = np.where(wheels, 0.02, img)
        img = img + rng.normal(0, 0.03, size=(h, w))
    else:
        img = value_noise(h, w, max(2.0, size / 5), rng)
        img = 0.1 + 0.8 * img
    return np.clip(img, 0.0, 1.0)


def generate_scene(cfg: SceneConfig) -> Scene:
    rng = np.random.default_rng([cfg.seed, 7])
    px, py = cfg.camera_pan
    span_x = int(math.ceil(abs(px) * (cfg.n_frames - 1))) + 2
    span_y = int(math.ceil(abs(py) * (cfg.n_frames - 1))) + 2
    canvas = background_texture(cfg.height + span_y, cfg.width + span_x, rng)
    ox = 0 if px >= 0 else span_x - 1
    oy = 0 if py >= 0 else span_y - 1
    looks = [render_sprite(s.kind, s.size, s.texture_seed) for s in cfg.sprites]
    noise_rng = np.random.default_rng([cfg.seed, 11])
    frames, truth = [], []
    for t in range(cfg.n_frames):
        x0 = ox + math.floor(px * t + 0.5)
        y0 = oy + math.floor(py * t + 0.5)
        frame = canvas[y0:y0 + cfg.height, x0:x0 + cfg.width].copy()
        for j, (sp, look) in enumerate(zip(cfg.sprites, looks)):
            b = sp.box_at(t)
            frame[b.y:b.y + b.h, b.x:b.x + b.w] = look
            truth.append(GroundTruth(t, j, sp.kind, b))
        if cfg.noise_sigma > 0:
            frame = frame + noise_rng.normal(0.0, cfg.noise_sigma, size=frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0))
    return Scene(frames, truth)


def person_scene_config(person_id: int, seed: int = 0, n_frames: int = 60, width: int = 240,
                        height: int = 150, noise_sigma: float = 0.01) -> SceneConfig:
    """A panning-camera clip of one synthetic person plus one car.

    The camera pans 2 px/frame left or right. Each sprite moves 1 px/frame
    against the pan on screen, i.e. 1 px/frame relative to the ground,
    which is where the flow estimate is reliable. The human walks in the
    lower band and the car drives in the upper band, so they never overlap.
    """
    rng = np.random.default_rng([seed, person_id, 13])
    pan = (float(rng.choice([-2, 2])), 0.0)

    def relative_velocity(drift):
        return float(np.sign(pan[0])), float(rng.choice([-drift, 0.0, drift]))

    def place(w, h, v, y_lo, y_hi):
        span = n_frames - 1
        xs = [0.0, width - w - abs(v[0]) * span]
        ys = [y_lo, y_hi - h - abs(v[1]) * span]
        if xs[1] < 0 or ys[1] < ys[0]:
            raise ConfigError("scene too small for the requested clip length")
        x = rng.uniform(*xs) + (abs(v[0]) * span if v[0] < 0 else 0.0)
        y = rng.uniform(*ys) + (abs(v[1]) * span if v[1] < 0 else 0.0)
        return float(round(x)), float(round(y))

    sprites = []
    band = int(height * 0.32)
    rel = relative_velocity(0.5)
    v = (rel[0] - pan[0], rel[1] - pan[1])
    size = int(rng.integers(36, 45))
    w, h = sprite_extent("human", size)
    sprites.append(SpriteSpec("human", size, v, person_id * 1000 + int(rng.integers(4)),
                              place(w, h, v, band + 1, height - 1), person_id))
    # the car band is narrow, so the car drifts less vertically
    rel = relative_velocity(0.25)
    v = (rel[0] - pan[0], rel[1] - pan[1])
    size = int(rng.integers(26, 35))
    w, h = sprite_extent("car", size)
    sprites.append(SpriteSpec("car", size, v, int(rng.integers(1 << 30)), place(w, h, v, 1, band - 1)))
    return SceneConfig(width, height, n_frames, pan, tuple(sprites), noise_sigma,
                       int(rng.integers(1 << 31)))


# -- direct patch rendering --------------------------------------------------

def _jittered_crop(frame, box: BoundingBox, rng, patch_size: int) -> np.ndarray:
    """Crop around ``box`` with a random margin, mimicking motion-blob boxes."""
    fh, fw = frame.shape
    mx = int(rng.integers(0, max(1, box.w // 3) + 1))
    my = int(rng.integers(0, max(1, box.h // 5) + 1))
    grow = BoundingBox(box.x - mx, box.y - my, box.w + mx + int(rng.integers(0, mx + 1)),
                       box.h + my + int(rng.integers(0, my + 1)))
    c = grow.clamp(fw, fh)
    patch = frame[c.y:c.y + c.h, c.x:c.x + c.w]
    return resize_bilinear(patch, patch_size, patch_size)


def synthetic_patch_dataset(n_samples: int, patch_size: int = 32, seed: int = 42,
                            positive_fraction: float = 0.25, n_persons: int = 12):
    """Human / nonhuman patches rendered straight from sprites.

    Returns (patches (N, s, s), labels (N,), person_ids (N,)). Every sample
    is attributed to one of ``n_persons`` synthetic videos; positives use
    that person's clothing texture. Negatives are cars, clutter and bare
    background in roughly equal shares.
    """
    if n_samples < 2:
        raise ConfigError("need at least two samples")
    rng = np.random.default_rng([seed, 3])
    n_pos = max(1, int(round(n_samples * positive_fraction)))
    labels = np.zeros(n_samples, dtype=np.intp)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(n_samples)]
    persons = (np.arange(n_samples) % n_persons) + 1
    persons = persons[rng.permutation(n_samples)]
    patches = np.empty((n_samples, patch_size, patch_size))
    for i in range(n_samples):
        frame = background_texture(72, 72, rng)
        if labels[i] == 1:
            size = int(rng.integers(24, 45))
            sp = SpriteSpec("human", size, texture_seed=int(persons[i]) * 1000 + int(rng.integers(4)))
        else:
            kind = ("car", "clutter", "background")[int(rng.integers(3))]
            if kind == "background":
                w, h = int(rng.integers(10, 30)), int(rng.integers(10, 30))
                x, y = int(rng.integers(0, 72 - w)), int(rng.integers(0, 72 - h))
                patches[i] = _jittered_crop(frame, BoundingBox(x, y, w, h), rng, patch_size)
                continue
            size = int(rng.integers(14, 40)) if kind == "car" else int(rng.integers(8, 24))
            sp = SpriteSpec(kind, size, texture_seed=int(rng.integers(1 << 30)))
        look = render_sprite(sp.kind, sp.size, sp.texture_seed)
        h, w = look.shape
        x, y = int(rng.integers(0, 72 - w)), int(rng.integers(0, 72 - h))
        frame[y:y + h, x:x + w] = look
        frame = np.clip(frame + rng.normal(0, 0.01, frame.shape), 0, 1)
        patches[i] = _jittered_crop(frame, BoundingBox(x, y, w, h), rng, patch_size)
    return patches, labels, persons


# -- on-disk scene layout ----------------------------------------------------

def write_truth(truth, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(g.to_json() + "\n" for g in truth))
    tmp.replace(path)


def read_truth(path) -> list:
    lines = Path(path).read_text().splitlines()
    return [GroundTruth.from_json(line) for line in lines if line.strip()]
