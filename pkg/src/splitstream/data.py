"""Synthetic shape dataset with derived condition maps.

Samples are 32x32 RGB scenes of 1-3 shaded shapes (circle / rect /
triangle) in palette colors on a dark gradient background, with prompts
naming them from a closed vocabulary. Conditions range from detailed to
coarse: a Sobel edge map (canny_like), a blocky downsampled edge sketch
(scribble), and a flat-color segmentation map rendered from the
generator's own ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngState

IMAGE_HW = 32

COUNT_WORDS = ["one", "two", "three"]
COLOR_WORDS = ["red", "green", "blue", "yellow", "purple", "cyan", "orange", "white"]
SHAPE_WORDS = ["circle", "rect", "triangle"]
VOCAB = COUNT_WORDS + COLOR_WORDS + SHAPE_WORDS

PALETTE = np.array(
    [
        [1.0, 0.15, 0.15],  # red
        [0.15, 1.0, 0.15],  # green
        [0.2, 0.2, 1.0],    # blue
        [1.0, 1.0, 0.2],    # yellow
        [0.65, 0.2, 0.85],  # purple
        [0.2, 1.0, 1.0],    # cyan
        [1.0, 0.55, 0.15],  # orange
        [1.0, 1.0, 1.0],    # white
    ],
    dtype=np.float32,
)

BACKGROUND = np.zeros(3, dtype=np.float32)

CONDITION_KINDS = ("canny_like", "scribble", "segmentation")

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
SOBEL_Y = SOBEL_X.T

EDGE_THRESHOLD = 0.5


@dataclass
class ShapeSpec:
    kind: str
    color: int  # palette index
    params: tuple  # geometry, kind-specific


@dataclass
class ShapeSample:
    image: np.ndarray  # (3, 32, 32) in [0, 1]
    prompt: list[str]
    shapes: list[ShapeSpec]
    conditions: dict[str, np.ndarray] = field(default_factory=dict)


def _grid():
    ys, xs = np.mgrid[0:IMAGE_HW, 0:IMAGE_HW]
    return xs.astype(np.float32), ys.astype(np.float32)


def _shape_mask(spec: ShapeSpec) -> np.ndarray:
    xs, ys = _grid()
    if spec.kind == "circle":
        cx, cy, r = spec.params
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if spec.kind == "rect":
        x0, y0, x1, y1 = spec.params
        return (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    if spec.kind == "triangle":
        cx, y0, y1, half = spec.params
        frac = np.clip((ys - y0) / max(y1 - y0, 1e-6), 0.0, 1.0)
        inside_rows = (ys >= y0) & (ys <= y1)
        return inside_rows & (np.abs(xs - cx) <= frac * half)
    raise ValueError(f"unknown shape kind {spec.kind!r}")


def _shading(spec: ShapeSpec, mask: np.ndarray) -> np.ndarray:
    """Radial falloff so images are shaded while segmentation stays flat."""
    xs, ys = _grid()
    if spec.kind == "circle":
        cx, cy, r = spec.params
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) / max(r, 1.0)
    elif spec.kind == "rect":
        x0, y0, x1, y1 = spec.params
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        d = np.maximum(np.abs(xs - cx) / max((x1 - x0) / 2.0, 1.0),
                       np.abs(ys - cy) / max((y1 - y0) / 2.0, 1.0))
    else:
        cx, y0, y1, half = spec.params
        d = np.abs(ys - (y0 + y1) / 2.0) / max((y1 - y0) / 2.0, 1.0)
    shade = 1.0 - 0.35 * np.clip(d, 0.0, 1.0)
    return np.where(mask, shade, 0.0).astype(np.float32)


def _draw_sample(rng: RngState) -> ShapeSample:
    n_shapes = int(rng.integers(1, 3))
    shapes: list[ShapeSpec] = []
    for _ in range(n_shapes):
        kind = SHAPE_WORDS[int(rng.integers(0, 2))]
        color = int(rng.integers(0, len(PALETTE) - 1))
        if kind == "circle":
            params = (float(rng.integers(9, 23)), float(rng.integers(9, 23)),
                      float(rng.integers(4, 8)))
        elif kind == "rect":
            x0 = int(rng.integers(3, 18))
            y0 = int(rng.integers(3, 18))
            params = (float(x0), float(y0),
                      float(x0 + int(rng.integers(6, 11))),
                      float(y0 + int(rng.integers(6, 11))))
        else:
            y0 = int(rng.integers(3, 14))
            params = (float(rng.integers(9, 23)), float(y0),
                      float(y0 + int(rng.integers(8, 14))),
                      float(rng.integers(5, 9)))
        shapes.append(ShapeSpec(kind, color, params))

    # dark vertical gradient background, shaded shapes on top
    _, ys = _grid()
    img = np.empty((3, IMAGE_HW, IMAGE_HW), dtype=np.float32)
    img[:] = (0.05 + 0.10 * ys / (IMAGE_HW - 1))[None]
    for spec in shapes:
        mask = _shape_mask(spec)
        shade = _shading(spec, mask)
        color = PALETTE[spec.color]
        for c in range(3):
            img[c] = np.where(mask, color[c] * shade, img[c])

    prompt: list[str] = []
    groups: dict[tuple[int, str], int] = {}
    for spec in shapes:
        groups[(spec.color, spec.kind)] = groups.get((spec.color, spec.kind), 0) + 1
    for (color, kind), count in groups.items():
        prompt += [COUNT_WORDS[count - 1], COLOR_WORDS[color], kind]

    sample = ShapeSample(image=np.clip(img, 0.0, 1.0), prompt=prompt, shapes=shapes)
    for kind in CONDITION_KINDS:
        sample.conditions[kind] = derive_condition(sample.image, kind, sample.shapes)
    return sample


def generate_dataset(n: int, seed: int) -> list[ShapeSample]:
    """n deterministic samples; identical seeds give byte-identical data."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    rng = RngState(seed).split("shape-dataset")
    return [_draw_sample(rng) for _ in range(n)]


def _conv3(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    xp = np.pad(x, 1, mode="edge")
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += k[i, j] * xp[i : i + x.shape[0], j : j + x.shape[1]]
    return out


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gx = _conv3(gray, SOBEL_X)
    gy = _conv3(gray, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy)


def derive_condition(image: np.ndarray, kind: str, shapes: list[ShapeSpec] | None = None) -> np.ndarray:
    """Condition map for an image; segmentation needs the generator's shapes."""
    if kind not in CONDITION_KINDS:
        raise ValueError(f"unknown condition kind {kind!r}, have {CONDITION_KINDS}")
    if kind == "segmentation":
        if shapes is None:
            raise ValueError("segmentation condition needs the ground-truth shape list")
        seg = np.zeros((3, IMAGE_HW, IMAGE_HW), dtype=np.float32)
        seg[:] = BACKGROUND[:, None, None]
        for spec in shapes:
            mask = _shape_mask(spec)
            for c in range(3):
                seg[c] = np.where(mask, PALETTE[spec.color][c], seg[c])
        return seg
    gray = np.asarray(image, dtype=np.float32).mean(axis=0)
    mag = sobel_magnitude(gray)
    edges = (mag > EDGE_THRESHOLD).astype(np.float32)
    if kind == "canny_like":
        return edges[None]
    # scribble: average-pool 4x, re-threshold, upsample back
    coarse = edges.reshape(8, 4, 8, 4).mean(axis=(1, 3))
    blocky = (coarse > 0.25).astype(np.float32)
    return blocky.repeat(4, axis=0).repeat(4, axis=1)[None]


def condition_to_input(cond: np.ndarray) -> np.ndarray:
    """Expand a 1-channel condition to the encoder's 3-channel input."""
    if cond.shape[0] == 3:
        return cond
    return np.repeat(cond, 3, axis=0)


def dataset_arrays(samples: list[ShapeSample], cond_kind: str):
    """Stack a sample list into protocol-ready arrays."""
    images = np.stack([s.image for s in samples])
    conds = np.stack([condition_to_input(s.conditions[cond_kind]) for s in samples])
    prompts = [s.prompt for s in samples]
    return images, conds, prompts


# ---------------------------------------------------------------------------
# PPM image files (P6, maxval 255)


def write_ppm(path, image01: np.ndarray) -> None:
    img = np.asarray(image01)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects (3,H,W), got {img.shape}")
    h, w = img.shape[1:]
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pix.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError("not a P6 ppm file")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pix = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return (pix.transpose(2, 0, 1).astype(np.float32)) / 255.0
