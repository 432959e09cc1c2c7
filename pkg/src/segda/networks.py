"""Toy-scale pixel-level and segment-level modules.

Pixel module: three 3x3 convolutions (the last two with stride 2) form the
encoder, and two nearest-neighbour upsampling stages followed by 3x3
convolutions form the pixel decoder. The decoder ends in batch
normalisation with a per-channel affine. The segment module is a single
cross-attention block whose queries are frozen class embeddings.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    batch_norm,
    conv2d,
    l2_normalize,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
    upsample2x,
)


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    stem_channels: int = 16
    mid_channels: int = 32
    enc_channels: int = 32
    dec_channels: int = 32
    feature_dim: int = 16
    ffn_hidden: int = 32
    stride: int = 4

    def __post_init__(self):
        if self.stride != 4:
            raise ValueError("reference encoder has a fixed stride of 4")
        for k, v in asdict(self).items():
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"arch.{k} must be a positive integer, got {v!r}")


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class PixelModule:
    """Encoder + pixel decoder; parameters live in ``params`` keyed by name."""

    def __init__(self, arch: ArchConfig = ArchConfig(), seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        a = arch
        specs = [
            ("enc.conv1", a.in_channels, a.stem_channels, "encoder"),
            ("enc.conv2", a.stem_channels, a.mid_channels, "encoder"),
            ("enc.conv3", a.mid_channels, a.enc_channels, "encoder"),
            ("dec.conv1", a.enc_channels, a.dec_channels, "pixel_decoder"),
            ("dec.conv2", a.dec_channels, a.feature_dim, "pixel_decoder"),
        ]
        self.params: dict[str, Parameter] = {}
        for name, cin, cout, group in specs:
            self.params[f"{name}.w"] = Parameter(_he(rng, (cout, cin, 3, 3), cin * 9), f"{name}.w", group)
            if name != "dec.conv2":  # batch norm cancels any bias here
                self.params[f"{name}.b"] = Parameter(np.zeros(cout), f"{name}.b", group)
        self.params["dec.bn.gamma"] = Parameter(np.ones(a.feature_dim), "dec.bn.gamma", "pixel_decoder")
        self.params["dec.bn.beta"] = Parameter(np.zeros(a.feature_dim), "dec.bn.beta", "pixel_decoder")
        self.buffers = {
            "dec.bn.running_mean": np.zeros(a.feature_dim),
            "dec.bn.running_var": np.ones(a.feature_dim),
        }

    def group(self, name: str) -> dict:
        return {k: p for k, p in self.params.items() if p.group == name}

    def encode(self, images) -> Tensor:
        x = as_tensor(images)
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        H, W = x.shape[-2:]
        if H % self.arch.stride or W % self.arch.stride:
            raise ValueError(f"image size {H}x{W} not divisible by stride {self.arch.stride}")
        p = self.params
        h = relu(conv2d(x, p["enc.conv1.w"], p["enc.conv1.b"], stride=1))
        h = relu(conv2d(h, p["enc.conv2.w"], p["enc.conv2.b"], stride=2))
        return relu(conv2d(h, p["enc.conv3.w"], p["enc.conv3.b"], stride=2))

    def decode(self, featmap, training: bool = True, update_stats: bool = True) -> Tensor:
        f = as_tensor(featmap)
        if f.ndim != 4 or f.shape[1] != self.arch.enc_channels:
            raise ValueError(f"feature map {f.shape} does not have {self.arch.enc_channels} channels")
        p = self.params
        h = relu(conv2d(upsample2x(f), p["dec.conv1.w"], p["dec.conv1.b"]))
        h = conv2d(upsample2x(h), p["dec.conv2.w"])
        h = batch_norm(h, self.buffers["dec.bn.running_mean"], self.buffers["dec.bn.running_var"],
                       training=training, update_stats=update_stats)
        d = self.arch.feature_dim
        h = mul(h, reshape(p["dec.bn.gamma"], (1, d, 1, 1)))
        return add(h, reshape(p["dec.bn.beta"], (1, d, 1, 1)))

    def forward(self, images, training: bool = True, update_stats: bool = True) -> tuple[Tensor, Tensor]:
        """Returns ``(encoder feature map, pixel features)``, both batched."""
        F = self.encode(images)
        return F, self.decode(F, training=training, update_stats=update_stats)

    def state(self) -> dict:
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data[...] = state[k]
        for k, b in self.buffers.items():
            b[...] = state[k]

    def clone(self) -> "PixelModule":
        other = PixelModule.__new__(PixelModule)
        other.arch = self.arch
        other.params = {k: Parameter(p.data.copy(), p.name, p.group) for k, p in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other


class LinearHead:
    """Learnable single-layer classifier used for the MLP-head ablation."""

    def __init__(self, dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "head.w": Parameter(rng.standard_normal((dim, num_classes)) / np.sqrt(dim), "head.w", "head"),
            "head.b": Parameter(np.zeros(num_classes), "head.b", "head"),
        }

    @property
    def num_classes(self) -> int:
        return self.params["head.w"].shape[1]

    def prototypes(self) -> np.ndarray:
        w = self.params["head.w"].data
        return w / np.linalg.norm(w, axis=0, keepdims=True)

    def scores(self, features) -> Tensor:
        f = as_tensor(features)
        lead, (H, W) = f.shape[:-2], f.shape[-2:]
        flat = reshape(f, lead + (H * W,))
        s = matmul(transpose(self.params["head.w"]), flat)
        C = self.num_classes
        s = add(s, reshape(self.params["head.b"], (C, 1)))
        return reshape(s, lead[:-1] + (C, H, W))

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, p in self.params.items():
            p.data[...] = state[k]


class EmptyRepresentationError(ValueError):
    pass


class SegmentModule:
    """One cross-attention block: class queries attend over encoder positions.

    Output columns are L2-normalised segment representations, one per query.
    """

    def __init__(self, query_dim: int, feature_channels: int, ffn_hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        dS, CE, h = query_dim, feature_channels, ffn_hidden
        shapes = {
            "seg.wq": (dS, dS), "seg.wk": (dS, CE), "seg.wv": (dS, CE), "seg.wo": (dS, dS),
            "seg.ffn.w1": (h, dS), "seg.ffn.w2": (dS, h),
        }
        self.params = {k: Parameter(rng.standard_normal(s) / np.sqrt(s[1]), k, "segment_decoder")
                       for k, s in shapes.items()}
        self.params["seg.ffn.b1"] = Parameter(np.zeros((h, 1)), "seg.ffn.b1", "segment_decoder")
        self.params["seg.ffn.b2"] = Parameter(np.zeros((dS, 1)), "seg.ffn.b2", "segment_decoder")
        self.query_dim = dS

    def attention_values(self, featmap, queries) -> Tensor:
        """Attention-pooled values ``(d_S, C')`` before output projection."""
        F = as_tensor(featmap)
        if F.ndim == 4:
            if F.shape[0] != 1:
                raise ValueError("segment decoding runs per image")
            F = reshape(F, F.shape[1:])
        q0 = as_tensor(queries)
        if q0.ndim != 2 or q0.shape[1] == 0:
            raise EmptyRepresentationError("segment decoding needs at least one query")
        p = self.params
        CE = F.shape[0]
        flat = reshape(F, (CE, -1))
        Q = matmul(p["seg.wq"], q0)
        K = matmul(p["seg.wk"], flat)
        V = matmul(p["seg.wv"], flat)
        logits = scale(matmul(transpose(Q), K), 1.0 / np.sqrt(self.query_dim))
        A = softmax(logits, axis=1)
        return matmul(V, transpose(A))

    def forward(self, featmap, queries) -> Tensor:
        p = self.params
        # residual from the query keeps columns distinct when attention is near uniform
        x = add(as_tensor(queries), matmul(p["seg.wo"], self.attention_values(featmap, queries)))
        h = relu(add(matmul(p["seg.ffn.w1"], x), p["seg.ffn.b1"]))
        x = add(x, add(matmul(p["seg.ffn.w2"], h), p["seg.ffn.b2"]))
        return l2_normalize(x, axis=0)

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, p in self.params.items():
            p.data[...] = state[k]


class ClassEmbedder:
    """Frozen, seeded unit vectors standing in for text embeddings of class names."""

    def __init__(self, num_classes: int, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((dim, num_classes))
        table /= np.linalg.norm(table, axis=0, keepdims=True)
        table.setflags(write=False)
        self.table = table

    @property
    def num_classes(self) -> int:
        return self.table.shape[1]


def class_embeddings(class_ids, embedder: ClassEmbedder) -> Tensor:
    ids = np.asarray(list(class_ids), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= embedder.num_classes):
        raise KeyError(f"unknown class id in {ids.tolist()}")
    return Tensor(embedder.table[:, ids])


# checkpoints: JSON manifest + one little-endian float64 blob per tensor

def save_checkpoint(directory, arrays: dict, config: dict, groups: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        fname = name.replace("/", "_") + ".bin"
        (directory / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "group": (groups or {}).get(name, "buffer")})
    manifest = {"format": "segda-checkpoint/1", "dtype": "float64-le", "config": config, "tensors": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for e in manifest["tensors"]:
        raw = (directory / e["file"]).read_bytes()
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if len(raw) != 8 * n:
            raise ValueError(f"{directory / e['file']}: expected {8 * n} bytes, found {len(raw)}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, manifest
