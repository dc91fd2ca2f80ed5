"""Synthetic hyperspectral scenes, pushbroom stripes, cube files and previews.

Scenes follow a mixing model: every pixel is a convex combination of a few
smooth endmember spectra, scaled by a slowly varying illumination, plus a
small bilinear interaction term between endmembers.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
_CUBE_HEADER = struct.Struct("<4sIIIId")
DEFAULT_FALSE_COLOR = (13, 25, 61)
REFERENCE_BANDS = 172
MIN_ENDMEMBER_ANGLE_DEG = 5.0


class CubeFormatError(ValueError):
    """Raised for malformed cube files."""


@dataclass
class HsiCube:
    data: np.ndarray  # float32 (B, H, W), band-sequential
    native_scale: float = 4096.0
    name: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be (B, H, W), got {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("cube values must lie in [0, 1]")
        if not self.native_scale > 0:
            raise ValueError(f"native_scale must be positive, got {self.native_scale}")

    @property
    def B(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[1]

    @property
    def W(self) -> int:
        return self.data.shape[2]


# --- synthesis ---------------------------------------------------------------


def _smooth_curve(B: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, B)
    curve = np.full(B, rng.uniform(0.02, 0.2))
    for _ in range(int(rng.integers(2, 5))):
        centre = rng.uniform(-0.1, 1.1)
        width = rng.uniform(0.08, 0.35)
        curve += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((grid - centre) / width) ** 2)
    return curve / curve.max()


def _angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    c = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def endmembers(K: int, B: int, rng: np.random.Generator,
               min_angle_deg: float = MIN_ENDMEMBER_ANGLE_DEG, max_tries: int = 10_000) -> np.ndarray:
    """``(K, B)`` non-negative smooth spectra with unit max, pairwise >= ``min_angle_deg`` apart."""
    if K < 1 or B < 1:
        raise ValueError(f"need K >= 1 and B >= 1, got K={K}, B={B}")
    lib: list[np.ndarray] = []
    for _ in range(max_tries):
        s = _smooth_curve(B, rng)
        if all(_angle_deg(s, t) >= min_angle_deg for t in lib):
            lib.append(s)
            if len(lib) == K:
                return np.stack(lib)
    raise RuntimeError(f"could not draw {K} endmembers {min_angle_deg} degrees apart with B={B}")


def _smooth_field(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


@dataclass
class SceneParts:
    spectra: np.ndarray  # (K, B)
    abundances: np.ndarray  # (K, H, W), simplex per pixel
    illumination: np.ndarray  # (H, W)
    gamma: float


def scene_components(K: int, B: int, H: int, W: int, seed: int,
                     gamma: float = 0.1, sharpness: float = 3.0) -> SceneParts:
    rng = np.random.default_rng(seed)
    spectra = endmembers(K, B, rng)
    sigma = max(H, W) / 10.0
    logits = np.stack([_smooth_field((H, W), sigma, rng) for _ in range(K)]) * sharpness
    logits -= logits.max(axis=0, keepdims=True)
    weights = np.exp(logits)
    abundances = weights / weights.sum(axis=0, keepdims=True)
    illumination = 0.65 + 0.25 * np.tanh(_smooth_field((H, W), sigma * 2.0, rng))
    return SceneParts(spectra, abundances, illumination, gamma)


def render(parts: SceneParts) -> np.ndarray:
    a, s = parts.abundances, parts.spectra
    linear = np.einsum("khw,kb->bhw", a, s)
    K = s.shape[0]
    inter = np.zeros_like(linear)
    for k in range(K):
        for j in range(k + 1, K):
            inter += np.einsum("hw,b->bhw", a[k] * a[j], s[k] * s[j])
    return np.clip(parts.illumination[None] * (linear + parts.gamma * inter), 0.0, 1.0)


def synth_scene(K: int, B: int, H: int, W: int, seed: int, native_scale: float = 4096.0,
                gamma: float = 0.1, name: str = "") -> HsiCube:
    """Deterministic synthetic cube of ``K`` mixed materials."""
    data = render(scene_components(K, B, H, W, seed, gamma))
    return HsiCube(data.astype(np.float32), native_scale, name)


# --- pushbroom stripes --------------------------------------------------------


@dataclass
class StripeSet:
    stripes: list[np.ndarray]  # each (B, H, stripe_w)
    indices: list[int]
    stripe_w: int
    cube_id: str = ""
    native_scale: float = 4096.0

    def __len__(self) -> int:
        return len(self.stripes)


def pushbroom_stripes(cube: HsiCube, stripe_w: int = 4) -> StripeSet:
    if stripe_w < 1 or cube.W % stripe_w:
        raise ValueError(f"cube width {cube.W} is not divisible by stripe width {stripe_w}")
    n = cube.W // stripe_w
    stripes = [cube.data[:, :, j * stripe_w:(j + 1) * stripe_w].copy() for j in range(n)]
    return StripeSet(stripes, list(range(n)), stripe_w, cube.name, cube.native_scale)


def reassemble(stripes: StripeSet) -> HsiCube:
    """Width-axis concatenation in index order (not arrival order)."""
    if not stripes.stripes:
        raise ValueError("no stripes to reassemble")
    if len(stripes.indices) != len(stripes.stripes):
        raise ValueError("stripe and index counts differ")
    order = sorted(range(len(stripes.indices)), key=lambda k: stripes.indices[k])
    got = [stripes.indices[k] for k in order]
    missing = sorted(set(range(max(got) + 1)) - set(got))
    if missing or len(set(got)) != len(got):
        raise ValueError(f"stripe indices are not contiguous from 0: missing {missing}, got {got}")
    ref = stripes.stripes[0].shape[:2]
    for s in stripes.stripes:
        if s.ndim != 3 or s.shape[:2] != ref:
            raise ValueError(f"inconsistent stripe shape {s.shape}, expected {ref} x w")
    data = np.concatenate([stripes.stripes[k] for k in order], axis=2)
    return HsiCube(data, stripes.native_scale, stripes.cube_id)


# --- cube container -----------------------------------------------------------


def save_cube(cube: HsiCube, path) -> None:
    header = _CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, cube.B, cube.H, cube.W, cube.native_scale)
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_cube(path, name: Optional[str] = None) -> HsiCube:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CUBE_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {raw[:4]!r}, expected {CUBE_MAGIC!r}")
    if len(raw) < _CUBE_HEADER.size:
        raise CubeFormatError(f"{path}: header truncated ({len(raw)} of {_CUBE_HEADER.size} bytes)")
    _, version, B, H, W, scale = _CUBE_HEADER.unpack_from(raw)
    if version != CUBE_VERSION:
        raise CubeFormatError(f"{path}: unsupported version {version}, expected {CUBE_VERSION}")
    expected = _CUBE_HEADER.size + 4 * B * H * W
    if len(raw) != expected:
        raise CubeFormatError(f"{path}: expected {expected} bytes for {B}x{H}x{W}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_CUBE_HEADER.size).reshape(B, H, W)
    return HsiCube(data.astype(np.float32), scale, Path(path).stem if name is None else name)


# --- previews -----------------------------------------------------------------


def scaled_bands(B: int, bands: Sequence[int] = DEFAULT_FALSE_COLOR) -> tuple[int, ...]:
    """Map reference band indices onto a cube with ``B`` bands, keeping relative position."""
    if B == REFERENCE_BANDS:
        return tuple(bands)
    return tuple(min(B - 1, round(b * B / REFERENCE_BANDS)) for b in bands)


def false_color(cube, bands: Sequence[int] = DEFAULT_FALSE_COLOR) -> np.ndarray:
    """``(H, W, 3)`` uint8 image, each channel min-max stretched; a flat channel maps to 0."""
    data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
    B = data.shape[0]
    if len(bands) != 3 or any(not 0 <= b < B for b in bands):
        raise ValueError(f"false-color bands {tuple(bands)} out of range for B={B}")
    out = np.zeros((data.shape[1], data.shape[2], 3), dtype=np.uint8)
    for c, b in enumerate(bands):
        band = data[b].astype(np.float64)
        lo, hi = band.min(), band.max()
        if hi > lo:
            out[..., c] = np.round((band - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return out


def save_png(images: Iterable[np.ndarray], path, gap: int = 2) -> None:
    """Write one or more RGB images side by side as a PNG."""
    images = list(images)
    h = max(im.shape[0] for im in images)
    w = sum(im.shape[1] for im in images) + gap * (len(images) - 1)
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    x = 0
    for im in images:
        canvas[:im.shape[0], x:x + im.shape[1]] = im
        x += im.shape[1] + gap
    Image.fromarray(canvas, mode="RGB").save(path)


# --- dataset manifest ---------------------------------------------------------

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"


@dataclass
class DatasetManifest:
    cubes: list[str]
    splits: dict[str, list[str]]
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = [c for s in SPLITS for c in self.splits.get(s, [])]
        if sorted(seen) != sorted(self.cubes) or len(set(seen)) != len(seen):
            raise ValueError("dataset splits must be disjoint and cover every cube")

    def to_json(self) -> str:
        body = {"cubes": self.cubes, "splits": self.splits, "seed": self.seed, "params": self.params}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        body = json.loads(text)
        return cls(body["cubes"], body["splits"], body["seed"], body.get("params", {}))

    def save(self, root) -> None:
        (Path(root) / MANIFEST_NAME).write_text(self.to_json())

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = Path(root) / MANIFEST_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        return cls.from_json(path.read_text())

    def load_split(self, root, split: str) -> list[HsiCube]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [load_cube(Path(root) / f"{name}.hsic", name) for name in self.splits[split]]


def cube_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def plan_dataset(n_train: int, n_val: int, n_test: int, seed: int, params: dict) -> DatasetManifest:
    total = n_train + n_val + n_test
    if min(n_train, n_val, n_test) < 0 or total < 1:
        raise ValueError("split sizes must be non-negative with at least one cube")
    names = [f"cube_{i:04d}" for i in range(total)]
    order = np.random.default_rng([seed, 0xC0BE]).permutation(total)
    bounds = np.cumsum([0, n_train, n_val, n_test])
    splits = {s: sorted(names[k] for k in order[bounds[i]:bounds[i + 1]]) for i, s in enumerate(SPLITS)}
    return DatasetManifest(names, splits, seed, dict(params))


def make_dataset(root, K: int, B: int, H: int, W: int, n_train: int, n_val: int, n_test: int,
                 seed: int, native_scale: float = 4096.0) -> DatasetManifest:
    """Generate and write every cube plus ``manifest.json`` under ``root``."""
    params = {"K": K, "B": B, "H": H, "W": W, "native_scale": native_scale}
    manifest = plan_dataset(n_train, n_val, n_test, seed, params)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(manifest.cubes):
        sub = int(cube_seed(seed, i).generate_state(1, np.uint64)[0])
        save_cube(synth_scene(K, B, H, W, sub, native_scale, name=name), root / f"{name}.hsic")
    manifest.save(root)
    return manifest
