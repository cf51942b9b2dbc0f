"""Procedural scene vocabulary, renderer, and programmatic quality scorer.

Prompts at desk scale are scenes: 1-4 objects drawn from a 16-token
vocabulary (4 shapes x 4 gray levels), each with an explicit placement.
``score_image`` template-matches every prompted object at its placement,
giving dependency-free ground truth in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
LEVELS = {"dark": 0.25, "dim": 0.5, "bright": 0.75, "white": 1.0}
VOCAB = tuple(f"{level}_{shape}" for shape in SHAPES for level in LEVELS)
TOKEN_IDS = {name: i for i, name in enumerate(VOCAB)}


def token_parts(token: str) -> tuple[str, float]:
    level, shape = token.split("_")
    return shape, LEVELS[level]


@dataclass(frozen=True)
class SceneObject:
    token: str
    cy: float
    cx: float
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    height: int = 32
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 4:
            raise ValueError("scene must contain 1-4 objects")
        for obj in self.objects:
            if obj.token not in TOKEN_IDS:
                raise ValueError(f"unknown token {obj.token!r}")
            if not (
                obj.radius <= obj.cy <= self.height - 1 - obj.radius
                and obj.radius <= obj.cx <= self.width - 1 - obj.radius
            ):
                raise ValueError(f"object {obj.token} placed outside the canvas")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1 :]:
                dist = np.hypot(a.cy - b.cy, a.cx - b.cx)
                if dist < max(a.radius, b.radius):
                    raise ValueError("object centers closer than one object radius")

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(obj.token for obj in self.objects)

    def text(self) -> str:
        return ", ".join(
            f"{o.token} at ({o.cy:.1f},{o.cx:.1f}) r={o.radius:.1f}" for o in self.objects
        )

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "objects": [
                {"token": o.token, "cy": o.cy, "cx": o.cx, "radius": o.radius}
                for o in self.objects
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(
            objects=tuple(
                SceneObject(o["token"], float(o["cy"]), float(o["cx"]), float(o["radius"]))
                for o in d["objects"]
            ),
            height=int(d["height"]),
            width=int(d["width"]),
        )


def shape_template(shape: str, radius: float) -> np.ndarray:
    """Soft-edged [0,1] mask of side 2*ceil(radius)+1, centered."""
    r = int(np.ceil(radius))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    if shape == "circle":
        margin = radius + 0.5 - np.hypot(dy, dx)
    elif shape == "square":
        margin = 0.85 * radius + 0.5 - np.maximum(np.abs(dy), np.abs(dx))
    elif shape == "triangle":
        # apex up; 30-degree flanks, flat base
        margin = np.minimum.reduce(
            [dy + radius, 0.7 * radius - dy, 0.577 * (dy + radius) - np.abs(dx) + 0.5]
        )
    elif shape == "cross":
        arm = max(1.0, 0.35 * radius)
        horiz = np.minimum(arm + 0.5 - np.abs(dy), radius + 0.5 - np.abs(dx))
        vert = np.minimum(arm + 0.5 - np.abs(dx), radius + 0.5 - np.abs(dy))
        margin = np.maximum(horiz, vert)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.clip(margin, 0.0, 1.0)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Draw the scene on a black canvas; overlaps blend by max."""
    spec.validate()
    canvas = np.zeros((spec.height, spec.width))
    for obj in spec.objects:
        shape, level = token_parts(obj.token)
        stamp = level * shape_template(shape, obj.radius)
        r = stamp.shape[0] // 2
        cy, cx = int(round(obj.cy)), int(round(obj.cx))
        y0, x0 = max(cy - r, 0), max(cx - r, 0)
        y1, x1 = min(cy + r + 1, spec.height), min(cx + r + 1, spec.width)
        sy, sx = y0 - (cy - r), x0 - (cx - r)
        window = canvas[y0:y1, x0:x1]
        np.maximum(window, stamp[sy : sy + y1 - y0, sx : sx + x1 - x0], out=window)
    return canvas


def score_image(image: np.ndarray, spec: SceneSpec) -> float:
    """Mean per-object template match (clamped NCC) at each placement."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:  # accept [H,W,1]
        img = img[..., 0]
    if img.shape != (spec.height, spec.width):
        raise ValueError(f"image shape {img.shape} does not match canvas "
                         f"({spec.height}, {spec.width})")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    scores = []
    for obj in spec.objects:
        shape, level = token_parts(obj.token)
        template = level * shape_template(shape, obj.radius)
        r = template.shape[0] // 2
        cy, cx = int(round(obj.cy)), int(round(obj.cx))
        y0, x0 = max(cy - r, 0), max(cx - r, 0)
        y1, x1 = min(cy + r + 1, spec.height), min(cx + r + 1, spec.width)
        patch = img[y0:y1, x0:x1]
        tmpl = template[y0 - (cy - r) : y1 - (cy - r), x0 - (cx - r) : x1 - (cx - r)]
        dp = patch - patch.mean()
        dt = tmpl - tmpl.mean()
        denom = np.sqrt((dp * dp).sum() * (dt * dt).sum())
        if denom < 1e-12:
            scores.append(0.0)
        else:
            scores.append(float(np.clip((dp * dt).sum() / denom, 0.0, 1.0)))
    return float(np.mean(scores))


def sample_scene(
    rng: np.random.Generator,
    n_objects: Optional[int] = None,
    height: int = 32,
    width: int = 32,
    radius_range: tuple[float, float] = (3.0, 5.0),
    grid: Optional[int] = 5,
    max_tries: int = 500,
) -> SceneSpec:
    """Random valid scene; deterministic given the generator state.

    By default placements snap to a ``grid x grid`` lattice and radii to
    two anchor values, so a modest training set covers every
    (token, cell) atom and a generative model can recombine them on
    held-out scenes. ``grid=None`` samples fully continuous placements.
    """
    n = int(n_objects) if n_objects is not None else int(rng.integers(1, 5))
    r_lo, r_hi = radius_range
    radii = np.linspace(r_lo, r_hi, 2)
    anchors_y = np.linspace(r_hi, height - 1 - r_hi, grid) if grid else None
    anchors_x = np.linspace(r_hi, width - 1 - r_hi, grid) if grid else None
    for _ in range(max_tries):
        objs: list[SceneObject] = []
        ok = True
        for _ in range(n):
            token = VOCAB[int(rng.integers(len(VOCAB)))]
            if grid:
                radius = float(radii[int(rng.integers(len(radii)))])
            else:
                radius = float(rng.uniform(r_lo, r_hi))
            placed = False
            for _ in range(50):
                if grid:
                    cy = float(anchors_y[int(rng.integers(grid))])
                    cx = float(anchors_x[int(rng.integers(grid))])
                else:
                    cy = float(rng.uniform(radius, height - 1 - radius))
                    cx = float(rng.uniform(radius, width - 1 - radius))
                if all(
                    np.hypot(cy - o.cy, cx - o.cx) >= max(radius, o.radius) + 1.0
                    for o in objs
                ):
                    objs.append(SceneObject(token, cy, cx, radius))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            spec = SceneSpec(tuple(objs), height, width)
            spec.validate()
            return spec
    raise RuntimeError(f"could not place {n} objects after {max_tries} attempts")


def respread_scene(spec: SceneSpec, variant: int, seed: int) -> SceneSpec:
    """Deterministic rewriter stub: same objects, relaxed placements.

    Re-places every object with extra margin and wider separation, which
    tends to make crowded prompts easier to render.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, variant)))
    margin = 1.0
    for _ in range(200):
        objs: list[SceneObject] = []
        ok = True
        for obj in spec.objects:
            placed = False
            for _ in range(100):
                cy = float(rng.uniform(obj.radius + margin, spec.height - 1 - obj.radius - margin))
                cx = float(rng.uniform(obj.radius + margin, spec.width - 1 - obj.radius - margin))
                if all(
                    np.hypot(cy - o.cy, cx - o.cx) >= 1.5 * max(obj.radius, o.radius)
                    for o in objs
                ):
                    objs.append(SceneObject(obj.token, cy, cx, obj.radius))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            out = SceneSpec(tuple(objs), spec.height, spec.width)
            out.validate()
            return out
    raise RuntimeError("respread_scene could not re-place the objects")
