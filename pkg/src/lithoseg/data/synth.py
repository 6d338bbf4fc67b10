"""Synthetic ureteroscopy-like clips with exact ground truth.

A scene is built in the coordinate frame of frame 5: one to three elliptical
stones, a rod-shaped laser fiber entering from the right border and small
debris specks in the fluid. Frames 1-4 are rendered by sampling the scene at
displaced coordinates; the laser is attached to the scope and does not move.
All randomness comes from a single ``numpy.random.Generator`` seeded per clip.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

from .types import LASER, NUM_FRAMES, STONE, ClipSequence

log = logging.getLogger(__name__)

# clamp ranges for relative-area draws
_STONE_AREA_RANGE = (0.02, 0.85)
_LASER_AREA_RANGE = (0.006, 0.08)


@dataclass(frozen=True)
class SceneParams:
    """Scene statistics. Area targets are fractions of the image (mean, sd)."""

    stone_area: tuple[float, float] = (0.3570, 0.1702)
    laser_area: tuple[float, float] = (0.0345, 0.0107)
    debris_density: float = 6.0  # specks per 10k pixels
    motion: float = 6.0  # pixels between frame 1 and frame 5
    jitter: float = 0.05
    style: Literal["vitro", "vivo"] = "vitro"

    @classmethod
    def vitro(cls, **kw) -> "SceneParams":
        return cls(**kw)

    @classmethod
    def vivo(cls, **kw) -> "SceneParams":
        base = dict(stone_area=(0.1084, 0.0865), laser_area=(0.0222, 0.0067),
                    debris_density=8.0, motion=5.0, jitter=0.06, style="vivo")
        base.update(kw)
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **kw) -> "SceneParams":
        if name == "vitro":
            return cls.vitro(**kw)
        if name == "vivo":
            return cls.vivo(**kw)
        raise ValueError(f"unknown scene preset {name!r}")

    def clamped(self) -> "SceneParams":
        """Copy with every field forced into its valid range; changes are logged."""
        fixes = {}

        def area(name, value):
            mean, sd = value
            new = (min(max(mean, 1e-3), 0.95), max(sd, 0.0))
            if new != (mean, sd):
                fixes[name] = new
            return new

        stone = area("stone_area", self.stone_area)
        laser = area("laser_area", self.laser_area)
        motion = max(self.motion, 0.0)
        jitter = max(self.jitter, 0.0)
        debris = max(self.debris_density, 0.0)
        style = self.style if self.style in ("vitro", "vivo") else "vitro"
        for name, new in (("motion", motion), ("jitter", jitter),
                          ("debris_density", debris), ("style", style)):
            if new != getattr(self, name):
                fixes[name] = new
        if fixes:
            log.warning("clamped scene parameters: %s", fixes)
        return dataclasses.replace(self, stone_area=stone, laser_area=laser, motion=motion,
                                   jitter=jitter, debris_density=debris, style=style)


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def radius(self, x, y):
        """Normalized elliptical radius; <= 1 inside."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.cx, y - self.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return np.sqrt((u / self.a) ** 2 + (v / self.b) ** 2)

    def scaled(self, k: float) -> "Ellipse":
        return dataclasses.replace(self, a=self.a * k, b=self.b * k)


@dataclass(frozen=True)
class Rod:
    """Fiber of given width entering at (x0, y0) and pointing along ``angle + pi``."""

    x0: float
    y0: float
    angle: float
    length: float
    width: float

    def coords(self, x, y):
        dx, dy = -math.cos(self.angle), -math.sin(self.angle)
        rx, ry = x - self.x0, y - self.y0
        along = rx * dx + ry * dy
        across = -rx * dy + ry * dx
        return along, across

    def contains(self, x, y):
        along, across = self.coords(x, y)
        return (along >= 0) & (along <= self.length) & (np.abs(across) <= self.width / 2)


@dataclass
class Scene:
    size: int
    stones: list
    laser: Rod
    debris: list
    background_tex: np.ndarray
    stone_tex: np.ndarray
    pad: int
    colors: dict
    motion_field: np.ndarray  # (2, H, W) displacement of frame 1 relative to frame 5
    highlights: list = dataclasses.field(default_factory=list)
    blur: float = 0.6


def _smooth_noise(rng, shape, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field / (np.abs(field).max() + 1e-12)


def _colors(rng: np.random.Generator, style: str) -> dict:
    """Per-clip palette; stones and debris share a tone drawn around a base colour."""
    if style == "vivo":
        base = dict(background=(0.55, 0.24, 0.21), stone=(0.80, 0.66, 0.48), tex_amp=0.18)
    else:
        base = dict(background=(0.50, 0.40, 0.34), stone=(0.76, 0.64, 0.44), tex_amp=0.12)
    stone = np.clip(np.asarray(base["stone"]) * rng.uniform(0.8, 1.15)
                    + rng.uniform(-0.05, 0.05, 3), 0.05, 0.95)
    return dict(background=base["background"], stone=tuple(stone),
                debris=tuple(np.clip(stone * rng.uniform(0.85, 1.05), 0, 1)),
                laser=(0.95, 0.97, 0.93), halo=rng.uniform(0.15, 0.35),
                tex_amp=base["tex_amp"])


def stone_laser_mask(stones, laser: Rod, size: int) -> np.ndarray:
    """Label image of frame 5 from the analytic shapes (laser drawn over stones)."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), np.uint8)
    for e in stones:
        mask[e.radius(x, y) <= 1.0] = STONE
    mask[laser.contains(x, y)] = LASER
    return mask


def build_scene(rng: np.random.Generator, params: SceneParams, size: int) -> Scene:
    """Draw the analytic shapes, textures and motion of one clip."""
    # laser: fixed orientation, entering from the right border
    width = rng.uniform(0.035, 0.055) * size
    laser_area = float(np.clip(rng.normal(*params.laser_area), *_LASER_AREA_RANGE))
    length = laser_area * size * size / width + 2.0
    laser = Rod(x0=size + 1.0, y0=rng.uniform(0.45, 0.75) * size,
                angle=math.radians(rng.uniform(-15, 15)), length=length, width=width)

    stone_area = float(np.clip(rng.normal(*params.stone_area), *_STONE_AREA_RANGE))
    n = int(rng.choice([1, 2, 3], p=[0.45, 0.35, 0.20]))
    share = rng.dirichlet(np.full(n, 2.0))
    stones = []
    for i in range(n):
        ratio = rng.uniform(0.6, 1.0)
        a = math.sqrt(share[i] * stone_area * size * size / (math.pi * ratio))
        stones.append(Ellipse(cx=rng.uniform(0.15, 0.7) * size, cy=rng.uniform(0.2, 0.8) * size,
                              a=a, b=a * ratio, angle=rng.uniform(0, math.pi)))
    # rescale radii until the visible stone area hits the drawn target
    scale = 1.0
    for _ in range(10):
        mask = stone_laser_mask([e.scaled(scale) for e in stones], laser, size)
        actual = max(float((mask == STONE).mean()), 1e-4)
        scale *= float(np.clip(math.sqrt(stone_area / actual), 0.5, 2.0))
    stones = [e.scaled(scale) for e in stones]

    n_debris = int(rng.poisson(params.debris_density * size * size / 1e4))
    debris = []
    for _ in range(n_debris):
        r = rng.uniform(0.6, 3.5) * size / 128
        debris.append(Ellipse(cx=rng.uniform(0, size), cy=rng.uniform(0, size),
                              a=r, b=r * rng.uniform(0.5, 1.0), angle=rng.uniform(0, math.pi)))

    pad = int(math.ceil(2 * params.motion)) + 4
    canvas = (size + 2 * pad, size + 2 * pad)
    colors = _colors(rng, params.style)
    # specular glints on the stones, same colour family as the fibre
    highlights = []
    for _ in range(int(rng.integers(0, 5))):
        e = stones[int(rng.integers(len(stones)))]
        t, rho = rng.uniform(0, 2 * math.pi), 0.7 * math.sqrt(rng.uniform())
        r = rng.uniform(1.0, 3.0) * size / 128
        highlights.append(Ellipse(cx=e.cx + rho * e.a * math.cos(t), cy=e.cy + rho * e.b * math.sin(t),
                                  a=r, b=r * rng.uniform(0.4, 1.0), angle=rng.uniform(0, math.pi)))
    blur = rng.uniform(0.6, 1.6)
    if params.style == "vivo":
        bg_tex = 0.6 * _smooth_noise(rng, canvas, size / 32) + 0.4 * _smooth_noise(rng, canvas, size / 8)
    else:
        bg_tex = _smooth_noise(rng, canvas, size / 4)
    stone_tex = 0.7 * _smooth_noise(rng, canvas, size / 40) + 0.3 * _smooth_noise(rng, canvas, 1.0)

    theta = rng.uniform(0, 2 * math.pi)
    shift = params.motion * rng.uniform(0.6, 1.0)
    translation = np.array([shift * math.cos(theta), shift * math.sin(theta)]).reshape(2, 1, 1)
    warp = np.stack([_smooth_noise(rng, (size, size), size / 6) for _ in range(2)])
    motion_field = translation + 0.35 * params.motion * warp

    return Scene(size=size, stones=stones, laser=laser, debris=debris, background_tex=bg_tex,
                 stone_tex=stone_tex, pad=pad, colors=colors, motion_field=motion_field,
                 highlights=highlights, blur=blur)


def frame_displacements(scene: Scene) -> np.ndarray:
    """(5, 2, H, W) displacement of each frame; frame 5 is the reference (zero)."""
    tau = np.array([(NUM_FRAMES - k) / (NUM_FRAMES - 1) for k in range(1, NUM_FRAMES + 1)])
    return (tau.reshape(-1, 1, 1, 1) * scene.motion_field[None]).astype(np.float64)


def render_frame(scene: Scene, displacement: np.ndarray) -> np.ndarray:
    """Noise-free RGB rendering of the scene seen through ``displacement``."""
    size = scene.size
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    px, py = x + displacement[0], y + displacement[1]
    coords = np.stack([py + scene.pad, px + scene.pad])
    bg_tex = ndimage.map_coordinates(scene.background_tex, coords, order=1, mode="nearest")
    st_tex = ndimage.map_coordinates(scene.stone_tex, coords, order=1, mode="nearest")
    c = scene.colors

    img = np.empty((size, size, 3))
    img[:] = c["background"]
    img *= (1.0 + c["tex_amp"] * bg_tex)[..., None]
    # vignette of the endoscope light
    r2 = ((x - size / 2) ** 2 + (y - size / 2) ** 2) / (size / 2) ** 2
    img *= (1.0 - 0.25 * r2)[..., None]

    stone_r = np.full((size, size), np.inf)
    for e in scene.stones:
        stone_r = np.minimum(stone_r, e.radius(px, py))
    in_stone = stone_r <= 1.0
    debris_hit = np.zeros((size, size), bool)
    for e in scene.debris:
        debris_hit |= e.radius(px, py) <= 1.0
    debris_hit &= ~in_stone
    img[debris_hit] = np.asarray(c["debris"]) * (0.85 + 0.1 * st_tex[debris_hit, None])
    shade = 1.0 - 0.3 * np.clip(stone_r, 0, 1) ** 2 + 0.2 * st_tex
    img[in_stone] = np.asarray(c["stone"]) * shade[in_stone, None]
    glint = np.zeros((size, size), bool)
    for e in scene.highlights:
        glint |= e.radius(px, py) <= 1.0
    glint &= in_stone
    img[glint] = 0.5 * img[glint] + 0.5 * np.asarray(c["laser"])

    # light scattered around the fibre brightens its surroundings
    _, across = scene.laser.coords(x, y)
    along, _ = scene.laser.coords(x, y)
    gap = np.maximum(np.abs(across) - scene.laser.width / 2, 0)
    gap = np.hypot(gap, np.maximum(along - scene.laser.length, 0))
    halo = c["halo"] * np.exp(-(gap / (0.03 * size)) ** 2)
    img += halo[..., None] * (np.asarray(c["laser"]) - img)

    # laser is fixed to the scope: drawn in screen coordinates
    in_laser = scene.laser.contains(x, y)
    glow = 0.8 + 0.2 * (1.0 - (2 * across / scene.laser.width) ** 2)
    img[in_laser] = np.asarray(c["laser"]) * glow[in_laser, None]

    img = ndimage.gaussian_filter(img, sigma=(scene.blur, scene.blur, 0), mode="nearest")
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_clip(seed: int, params: SceneParams | None = None, size: int = 256,
                            clip_id: str | None = None) -> ClipSequence:
    """Render a five-frame clip; identical ``seed`` and params give identical pixels."""
    params = (params or SceneParams()).clamped()
    rng = np.random.default_rng(seed)
    scene = build_scene(rng, params, size)
    disp = frame_displacements(scene)
    frames = []
    for k in range(NUM_FRAMES):
        img = render_frame(scene, disp[k])
        if params.jitter > 0:
            gain = 1.0 + params.jitter * rng.standard_normal()
            img = img * gain + (params.jitter / 2) * rng.standard_normal(img.shape)
        frames.append(np.clip(img, 0.0, 1.0))
    mask = stone_laser_mask(scene.stones, scene.laser, size)
    return ClipSequence(frames=np.stack(frames).astype(np.float32), mask=mask,
                        clip_id=clip_id or f"synth_{seed:06d}", motion=disp.astype(np.float32))


def true_displacement(motion: np.ndarray, a: int, b: int, iterations: int = 10) -> np.ndarray:
    """Ground-truth field ``d`` with ``I_b(x + d(x)) = I_a(x)`` for moving scene pixels.

    ``a`` and ``b`` are 1-based frame indices; ``motion`` comes from
    ``ClipSequence.motion``. Solved by fixed-point iteration of
    ``d = D_a(x) - D_b(x + d)``.
    """
    da = motion[a - 1].astype(np.float64)
    db = motion[b - 1].astype(np.float64)
    h, w = da.shape[1:]
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    d = da - db
    for _ in range(iterations):
        coords = np.stack([y + d[1], x + d[0]])
        db_at = np.stack([ndimage.map_coordinates(db[c], coords, order=1, mode="nearest")
                          for c in range(2)])
        d = da - db_at
    return d
