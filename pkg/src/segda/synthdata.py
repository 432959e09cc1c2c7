"""Deterministic two-domain synthetic segmentation benchmark.

Scenes are a textured background (class 0) with coloured shapes on top:
rectangles, discs, triangles and thin bars, one shape type per class.
The target domain applies a photometric shift (brightness, contrast, hue
rotation, sensor noise) that never touches the label mask.

Files: images are binary PPM (P6), masks binary PGM (P5), both 8-bit, and
``dataset.json`` lists every scene.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SHAPES = ("rect", "disc", "triangle", "bar")


class SceneConfigError(ValueError):
    pass


class SceneFileError(ValueError):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    num_shapes: int | None = None  # default: one shape per foreground class
    min_size: int = 10
    max_size: int = 24
    color_jitter: float = 0.08
    texture_sigma: float = 0.03

    def validate(self) -> None:
        if self.height % 4 or self.width % 4:
            raise SceneConfigError(f"scene size {self.height}x{self.width} must be divisible by 4")
        if not 4 <= self.num_classes <= 12:
            raise SceneConfigError(f"num_classes must lie in [4, 12], got {self.num_classes}")
        if not 2 <= self.min_size <= self.max_size:
            raise SceneConfigError("need 2 <= min_size <= max_size")
        if self.max_size > min(self.height, self.width):
            raise SceneConfigError(f"shapes of size {self.max_size} do not fit a {self.height}x{self.width} canvas")
        if self.num_shapes is not None and self.num_shapes < 0:
            raise SceneConfigError("num_shapes must be non-negative")


@dataclass(frozen=True)
class DomainShift:
    brightness: float = -0.15
    contrast: float = 0.7
    hue_degrees: float = 25.0
    noise_sigma: float = 0.05
    seed: int = 7

    @classmethod
    def identity(cls) -> "DomainShift":
        return cls(0.0, 1.0, 0.0, 0.0, 0)


@dataclass
class LabeledScene:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) int64 class ids
    domain: str
    seed: int
    num_classes: int
    scene_id: str = ""
    meta: dict = field(default_factory=dict)


def class_color(c: int, num_classes: int) -> np.ndarray:
    """Canonical RGB colour; background is a dull grey-green."""
    if c == 0:
        return np.array([0.42, 0.46, 0.40])
    hue = (c - 1) / (num_classes - 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85))


def class_shape(c: int) -> str:
    return SHAPES[(c - 1) % len(SHAPES)]


def _shape_mask(kind: str, rng: np.random.Generator, H: int, W: int, lo: int, hi: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    if kind == "rect":
        h, w = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        return (yy >= r) & (yy < r + h) & (xx >= c) & (xx < c + w)
    if kind == "disc":
        rad = rng.uniform(lo / 2, hi / 2)
        cy, cx = rng.uniform(rad, H - rad), rng.uniform(rad, W - rad)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
    if kind == "triangle":
        base, height = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, H - height + 1), rng.integers(0, W - base + 1)
        apex = c + base / 2.0
        t = (yy - r + 0.5) / height
        inside = (t >= 0) & (t <= 1)
        half = t * base / 2.0
        return inside & (xx + 0.5 >= apex - half) & (xx + 0.5 <= apex + half)
    if kind == "bar":
        thick = int(rng.integers(2, 4))
        length = int(rng.integers(hi, min(2 * hi, min(H, W)) + 1))
        if rng.random() < 0.5:
            r, c = rng.integers(0, H - length + 1), rng.integers(0, W - thick + 1)
            return (yy >= r) & (yy < r + length) & (xx >= c) & (xx < c + thick)
        r, c = rng.integers(0, H - thick + 1), rng.integers(0, W - length + 1)
        return (yy >= r) & (yy < r + thick) & (xx >= c) & (xx < c + length)
    raise ValueError(f"unknown shape {kind!r}")


def _jitter(color: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    h, s, v = colorsys.rgb_to_hsv(*color)
    h = (h + rng.uniform(-amount, amount) * 0.5) % 1.0
    s = float(np.clip(s + rng.uniform(-amount, amount), 0, 1))
    v = float(np.clip(v + rng.uniform(-amount, amount), 0, 1))
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> LabeledScene:
    config.validate()
    rng = np.random.default_rng([int(seed), 0x5E6DA])
    H, W, C = config.height, config.width, config.num_classes
    foreground = list(range(1, C))
    k = len(foreground) if config.num_shapes is None else config.num_shapes
    if k <= len(foreground):
        schedule = [int(c) for c in rng.permutation(foreground)[:k]]
    else:
        schedule = [int(c) for c in rng.permutation(foreground)]
        schedule += [int(c) for c in rng.choice(foreground, size=k - len(foreground))]

    bg = _jitter(class_color(0, C), rng, config.color_jitter)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wave = 0.04 * np.sin(2 * np.pi * (3 * yy + phase[0])) * np.cos(2 * np.pi * (2 * xx + phase[1]))
    image = bg[:, None, None] + wave[None] + rng.normal(0, config.texture_sigma, size=(3, H, W))
    mask = np.zeros((H, W), dtype=np.int64)
    # bars last so thin classes are rarely fully occluded
    order = sorted(schedule, key=lambda c: class_shape(c) == "bar")
    for c in order:
        region = _shape_mask(class_shape(c), rng, H, W, config.min_size, config.max_size)
        color = _jitter(class_color(c, C), rng, config.color_jitter)
        image[:, region] = color[:, None] + rng.normal(0, config.texture_sigma, size=(3, int(region.sum())))
        mask[region] = c
    image = np.clip(image, 0.0, 1.0)
    return LabeledScene(image, mask, "source", int(seed), C, meta={"schedule": schedule})


def _hue_rotation(degrees: float) -> np.ndarray:
    """Rotation about the grey axis (1, 1, 1) in RGB space."""
    t = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(t) * K + (1 - np.cos(t)) * (K @ K)


def domain_shift(scene: LabeledScene, shift: DomainShift = DomainShift()) -> LabeledScene:
    img = scene.image
    if shift.hue_degrees:
        img = np.einsum("ij,jhw->ihw", _hue_rotation(shift.hue_degrees), img)
    if shift.contrast != 1.0:
        img = (img - 0.5) * shift.contrast + 0.5
    if shift.brightness:
        img = img + shift.brightness
    if shift.noise_sigma > 0:
        rng = np.random.default_rng([int(shift.seed), int(scene.seed), 0xD0])
        img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return replace(scene, image=img, mask=scene.mask.copy(), domain="target")


def color_augment(image: np.ndarray, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    """Random brightness, contrast, saturation, hue and blur, applied to one image."""
    s = strength
    img = image
    if rng.random() < 0.5:
        p = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="edge")
        img = 0.25 * p[:, :-2] + 0.5 * p[:, 1:-1] + 0.25 * p[:, 2:]
        p = np.pad(img, ((0, 0), (0, 0), (1, 1)), mode="edge")
        img = 0.25 * p[:, :, :-2] + 0.5 * p[:, :, 1:-1] + 0.25 * p[:, :, 2:]
    img = np.einsum("ij,jhw->ihw", _hue_rotation(rng.uniform(-5, 5) * s), img)
    grey = img.mean(axis=0, keepdims=True)
    img = grey + (img - grey) * (1 + rng.uniform(-0.15, 0.15) * s)
    img = (img - 0.5) * (1 + rng.uniform(-0.15, 0.15) * s) + 0.5
    img = img + rng.uniform(-0.08, 0.08) * s
    return np.clip(img, 0.0, 1.0)


# file formats

def _write_pnm(path: Path, magic: bytes, array: np.ndarray) -> None:
    if magic == b"P6":
        H, W = array.shape[1:]
        payload = np.ascontiguousarray(array.transpose(1, 2, 0)).astype(np.uint8).tobytes()
    else:
        H, W = array.shape
        payload = array.astype(np.uint8).tobytes()
    path.write_bytes(magic + f"\n{W} {H}\n255\n".encode() + payload)


def _read_pnm(path: Path, magic: bytes) -> tuple[np.ndarray, int]:
    """Returns the raster and the byte offset where it starts."""
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SceneFileError(path, 0, f"cannot read file ({exc.strerror})") from None
    if raw[:2] != magic:
        raise SceneFileError(path, 0, f"expected magic {magic.decode()}")
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise SceneFileError(path, pos, "malformed header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace before the raster
    W, H, maxval = fields
    if maxval != 255:
        raise SceneFileError(path, pos, f"unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = W * H * channels
    if len(raw) - pos < need:
        raise SceneFileError(path, len(raw), f"truncated raster: need {need} bytes after offset {pos}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return (data.reshape(H, W, 3).transpose(2, 0, 1) if channels == 3 else data.reshape(H, W)), pos


def write_scene(scene: LabeledScene, directory, scene_id: str | None = None) -> dict:
    """Write image/mask files and return (and record) the manifest entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sid = scene_id or scene.scene_id or f"{scene.domain}_{scene.seed:06d}"
    if scene.mask.min() < 0 or scene.mask.max() >= scene.num_classes:
        raise ValueError(f"mask ids outside [0, {scene.num_classes})")
    _write_pnm(directory / f"{sid}.ppm", b"P6", np.round(255.0 * scene.image))
    _write_pnm(directory / f"{sid}.pgm", b"P5", scene.mask)
    entry = {"id": sid, "domain": scene.domain, "seed": int(scene.seed), "H": int(scene.mask.shape[0]),
             "W": int(scene.mask.shape[1]), "C": int(scene.num_classes),
             "image": f"{sid}.ppm", "mask": f"{sid}.pgm"}
    manifest_path = directory / "dataset.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"scenes": []}
    manifest["scenes"] = [e for e in manifest["scenes"] if e["id"] != sid] + [entry]
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return entry


def _load_entry(directory: Path, entry: dict) -> LabeledScene:
    img, _ = _read_pnm(directory / entry["image"], b"P6")
    mask, start = _read_pnm(directory / entry["mask"], b"P5")
    mask = mask.astype(np.int64)
    if img.shape[1:] != (entry["H"], entry["W"]) or mask.shape != (entry["H"], entry["W"]):
        raise SceneFileError(directory / entry["image"], 0, "size disagrees with manifest")
    if mask.max() >= entry["C"]:
        bad = int(np.argmax(mask.ravel() >= entry["C"]))
        raise SceneFileError(directory / entry["mask"], start + bad, f"class id {int(mask.ravel()[bad])} >= C={entry['C']}")
    return LabeledScene(img.astype(np.float64) / 255.0, mask, entry["domain"], entry["seed"], entry["C"], entry["id"])


def read_scene(directory, scene_id: str) -> LabeledScene:
    directory = Path(directory)
    manifest_path = directory / "dataset.json"
    if not manifest_path.exists():
        raise SceneFileError(manifest_path, 0, "missing manifest")
    for entry in json.loads(manifest_path.read_text())["scenes"]:
        if entry["id"] == scene_id:
            return _load_entry(directory, entry)
    raise KeyError(f"scene {scene_id!r} not in {manifest_path}")


@dataclass(frozen=True)
class BenchmarkConfig:
    scene: SceneConfig = SceneConfig()
    shift: DomainShift = DomainShift()
    source_train: int = 400
    source_val: int = 100
    target_train: int = 400
    target_val: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        scene = SceneConfig(**d.pop("scene", {}))
        shift = DomainShift(**d.pop("shift", {}))
        return cls(scene=scene, shift=shift, **d)


SPLITS = ("source_train", "source_val", "target_train", "target_val")


def build_benchmark(config: BenchmarkConfig = BenchmarkConfig()) -> dict:
    """All four splits in memory; scene seeds are disjoint across splits."""
    out = {}
    for i, split in enumerate(SPLITS):
        n = getattr(config, split)
        base = config.seed * 10_000_000 + i * 1_000_000
        scenes = []
        for j in range(n):
            s = generate_scene(base + j, config.scene)
            if split.startswith("target"):
                s = domain_shift(s, config.shift)
            s.scene_id = f"{split}_{j:05d}"
            scenes.append(s)
        out[split] = scenes
    return out


def write_benchmark(config: BenchmarkConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = build_benchmark(config)
    entries = []
    for split, scenes in data.items():
        for s in scenes:
            sid = s.scene_id
            _write_pnm(directory / f"{sid}.ppm", b"P6", np.round(255.0 * s.image))
            _write_pnm(directory / f"{sid}.pgm", b"P5", s.mask)
            entries.append({"id": sid, "split": split, "domain": s.domain, "seed": int(s.seed),
                            "H": int(s.mask.shape[0]), "W": int(s.mask.shape[1]), "C": int(s.num_classes),
                            "image": f"{sid}.ppm", "mask": f"{sid}.pgm"})
    manifest = {"config": config.to_dict(), "scenes": entries}
    path = directory / "dataset.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_benchmark(directory) -> dict:
    directory = Path(directory)
    path = directory / "dataset.json"
    if not path.exists():
        raise SceneFileError(path, 0, "missing manifest")
    manifest = json.loads(path.read_text())
    out = {split: [] for split in SPLITS}
    for entry in manifest["scenes"]:
        out.setdefault(entry.get("split", entry["domain"]), []).append(_load_entry(directory, entry))
    return out
