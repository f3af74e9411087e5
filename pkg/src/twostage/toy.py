"""Synthetic paired data and a minimal trainable encoder pair.

The dataset draws one centroid per class and produces (image, text)
feature pairs as independently-noised copies of their class centroid,
so the two modalities share structure without being identical.

The encoder is deliberately simple: each side projects its feature
vector linearly and adds a bank of fixed per-token offsets, giving
genuinely multi-token, multi-granular encodings (4 coarse / 16 fine
image tokens, 8 text tokens) with every row L2-normalized. Parameters
persist in a binary file mirroring the gallery format conventions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    ParameterError,
    ShapeError,
    UnsupportedVersionError,
)
from .gallery import FORMAT_VERSION, ImageTextEncoder, _Reader
from .numerics import EPS

PARAMS_MAGIC = b"FTFP"

COARSE_TOKENS = 4
FINE_TOKENS = 16
TEXT_TOKENS = 8

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    n_per_class: int = 16
    feature_dim: int = 32
    dim: int = 16
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_per_class < 1:
            raise ParameterError(f"need at least 1 pair per class, got {self.n_per_class}")
        if self.feature_dim < self.dim:
            raise ParameterError(
                f"feature_dim {self.feature_dim} must be at least embedding dim {self.dim}"
            )
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be non-negative, got {self.noise_std}")

    @property
    def n_pairs(self) -> int:
        return self.n_classes * self.n_per_class


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    image_features: np.ndarray
    text_features: np.ndarray
    class_ids: np.ndarray
    pair_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.pair_ids)

    def train_indices(self) -> np.ndarray:
        return self._split()[0]

    def eval_indices(self) -> np.ndarray:
        return self._split()[1]

    def _split(self) -> tuple[np.ndarray, np.ndarray]:
        # class-stratified deterministic slicing: first 80% of each
        # class's pairs train, the remainder evaluates
        train: list[int] = []
        held_out: list[int] = []
        per_class = self.spec.n_per_class
        cut = int(TRAIN_FRACTION * per_class)
        for c in range(self.spec.n_classes):
            start = c * per_class
            train.extend(range(start, start + cut))
            held_out.extend(range(start + cut, start + per_class))
        return np.array(train, dtype=np.int64), np.array(held_out, dtype=np.int64)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw class centroids and noisy paired features, fixed by the seed."""
    rng = np.random.default_rng(spec.seed)
    centroids = rng.normal(size=(spec.n_classes, spec.feature_dim))
    images = np.empty((spec.n_pairs, spec.feature_dim), dtype=np.float32)
    texts = np.empty((spec.n_pairs, spec.feature_dim), dtype=np.float32)
    classes = np.empty(spec.n_pairs, dtype=np.int64)
    row = 0
    for c in range(spec.n_classes):
        for _ in range(spec.n_per_class):
            images[row] = (
                centroids[c] + spec.noise_std * rng.normal(size=spec.feature_dim)
            ).astype(np.float32)
            texts[row] = (
                centroids[c] + spec.noise_std * rng.normal(size=spec.feature_dim)
            ).astype(np.float32)
            classes[row] = c
            row += 1
    pair_ids = tuple(f"{i:05d}" for i in range(spec.n_pairs))
    return SyntheticDataset(spec, images, texts, classes, pair_ids)


def save_dataset(dataset: SyntheticDataset, path: str | Path) -> None:
    spec = dataset.spec
    np.savez(
        path,
        image_features=dataset.image_features,
        text_features=dataset.text_features,
        class_ids=dataset.class_ids,
        spec=np.array(
            [
                spec.n_classes,
                spec.n_per_class,
                spec.feature_dim,
                spec.dim,
                spec.seed,
            ],
            dtype=np.int64,
        ),
        noise_std=np.float64(spec.noise_std),
    )


def load_dataset(path: str | Path) -> SyntheticDataset:
    with np.load(path) as data:
        raw = data["spec"]
        spec = SyntheticSpec(
            n_classes=int(raw[0]),
            n_per_class=int(raw[1]),
            feature_dim=int(raw[2]),
            dim=int(raw[3]),
            noise_std=float(data["noise_std"]),
            seed=int(raw[4]),
        )
        pair_ids = tuple(f"{i:05d}" for i in range(spec.n_pairs))
        return SyntheticDataset(
            spec,
            data["image_features"].astype(np.float32),
            data["text_features"].astype(np.float32),
            data["class_ids"].astype(np.int64),
            pair_ids,
        )


_PARAM_FIELDS = (
    "coarse_proj",
    "fine_proj",
    "coarse_offsets",
    "fine_offsets",
    "text_proj",
    "text_offsets",
    "global_proj",
)


@dataclass
class ToyEncoderParams:
    """Linear projections plus fixed token-offset banks for both sides."""

    coarse_proj: np.ndarray
    fine_proj: np.ndarray
    coarse_offsets: np.ndarray
    fine_offsets: np.ndarray
    text_proj: np.ndarray
    text_offsets: np.ndarray
    global_proj: np.ndarray

    def __post_init__(self) -> None:
        for name in _PARAM_FIELDS:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.ndim != 2 or not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} must be a finite 2-D matrix")
            setattr(self, name, arr)
        d_feat, d = self.coarse_proj.shape
        expected = {
            "fine_proj": (d_feat, d),
            "coarse_offsets": (COARSE_TOKENS, d),
            "fine_offsets": (FINE_TOKENS, d),
            "text_proj": (d_feat, d),
            "text_offsets": (TEXT_TOKENS, d),
            "global_proj": (d_feat, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )

    @property
    def feature_dim(self) -> int:
        return self.coarse_proj.shape[0]

    @property
    def dim(self) -> int:
        return self.coarse_proj.shape[1]

    @classmethod
    def initialize(cls, feature_dim: int, dim: int, seed: int) -> "ToyEncoderParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(feature_dim)
        return cls(
            coarse_proj=(scale * rng.normal(size=(feature_dim, dim))).astype(np.float32),
            fine_proj=(scale * rng.normal(size=(feature_dim, dim))).astype(np.float32),
            coarse_offsets=(0.5 * rng.normal(size=(COARSE_TOKENS, dim))).astype(np.float32),
            fine_offsets=(0.5 * rng.normal(size=(FINE_TOKENS, dim))).astype(np.float32),
            text_proj=(scale * rng.normal(size=(feature_dim, dim))).astype(np.float32),
            text_offsets=(0.5 * rng.normal(size=(TEXT_TOKENS, dim))).astype(np.float32),
            global_proj=(scale * rng.normal(size=(feature_dim, dim))).astype(np.float32),
        )


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    return rows / np.maximum(norms, EPS)[:, None]


def encode_pair(
    params: ToyEncoderParams, image_features: np.ndarray, text_features: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Encode one pair into (coarse tokens, fine tokens, text tokens, global).

    Token rows and the global embedding come out unit-norm float32;
    all arithmetic runs in float64.
    """
    img = np.asarray(image_features, dtype=np.float64)
    txt = np.asarray(text_features, dtype=np.float64)
    if img.shape != (params.feature_dim,) or txt.shape != (params.feature_dim,):
        raise ShapeError(
            f"features must be flat vectors of length {params.feature_dim}"
        )
    coarse = _normalize_rows(img @ params.coarse_proj.astype(np.float64) + params.coarse_offsets)
    fine = _normalize_rows(img @ params.fine_proj.astype(np.float64) + params.fine_offsets)
    tokens = _normalize_rows(txt @ params.text_proj.astype(np.float64) + params.text_offsets)
    raw_global = txt @ params.global_proj.astype(np.float64)
    global_emb = raw_global / max(float(np.sqrt(raw_global @ raw_global)), EPS)
    return (
        coarse.astype(np.float32),
        fine.astype(np.float32),
        tokens.astype(np.float32),
        global_emb.astype(np.float32),
    )


class ToyEncoder(ImageTextEncoder):
    """Encoder-boundary adapter around a parameter set."""

    def __init__(self, params: ToyEncoderParams):
        self.params = params

    @property
    def dim(self) -> int:
        return self.params.dim

    def encode_image(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coarse, fine, _, _ = encode_pair(self.params, features, features)
        return coarse, fine

    def encode_text(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, _, tokens, global_emb = encode_pair(self.params, features, features)
        return tokens, global_emb


def save_params(params: ToyEncoderParams, path: str | Path) -> None:
    buf = bytearray()
    buf += PARAMS_MAGIC
    buf += struct.pack(
        "<IIIIII",
        FORMAT_VERSION,
        params.feature_dim,
        params.dim,
        COARSE_TOKENS,
        FINE_TOKENS,
        TEXT_TOKENS,
    )
    for name in _PARAM_FIELDS:
        buf += getattr(params, name).astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path: str | Path) -> ToyEncoderParams:
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, "params magic")
    if magic != PARAMS_MAGIC:
        raise BadMagicError(f"expected magic {PARAMS_MAGIC!r}, found {magic!r}")
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported params format version {version}")
    feature_dim = reader.u32("feature dim")
    dim = reader.u32("embedding dim")
    counts = (reader.u32("coarse count"), reader.u32("fine count"), reader.u32("text count"))
    if counts != (COARSE_TOKENS, FINE_TOKENS, TEXT_TOKENS):
        raise CountMismatchError(
            f"token bank sizes {counts} do not match "
            f"({COARSE_TOKENS}, {FINE_TOKENS}, {TEXT_TOKENS})"
        )
    shapes = {
        "coarse_proj": (feature_dim, dim),
        "fine_proj": (feature_dim, dim),
        "coarse_offsets": (COARSE_TOKENS, dim),
        "fine_offsets": (FINE_TOKENS, dim),
        "text_proj": (feature_dim, dim),
        "text_offsets": (TEXT_TOKENS, dim),
        "global_proj": (feature_dim, dim),
    }
    arrays = {}
    for name in _PARAM_FIELDS:
        rows, cols = shapes[name]
        arrays[name] = reader.f32_array(rows * cols, name).reshape(rows, cols)
    if not reader.done():
        raise CountMismatchError(f"{reader.remaining()} unexpected trailing bytes")
    return ToyEncoderParams(**arrays)
