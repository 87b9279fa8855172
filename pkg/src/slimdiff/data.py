"""Synthetic shape/caption dataset, folder ingestion, latent codec, image io.

The synthetic task renders one colored shape per image on a dark
background, with a caption of the fixed grammar
``a <size> <color> <shape> at <row> <col>``; the grammar is bijective
with the shape description, so captions can be parsed back exactly.
Everything regenerates bit-identically from (seed, count, image_size).
"""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DomainError, SlimdiffError

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 220, 50),
    "cyan": (60, 220, 220),
    "magenta": (220, 60, 220),
    "orange": (240, 150, 40),
    "white": (245, 245, 245),
}
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
SIZES = ("small", "large")
BACKGROUND = (16, 16, 16)

NULL_TOKEN = "<null>"


@dataclass(frozen=True)
class ShapeSpec:
    """One rendered scene: shape kind, palette color, 3x3 grid cell, size."""

    shape: str
    color: str
    row: int
    col: int
    size: str

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise DomainError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise DomainError(f"unknown color {self.color!r}")
        if not (0 <= self.row < 3 and 0 <= self.col < 3):
            raise DomainError(f"grid cell ({self.row}, {self.col}) outside the 3x3 grid")
        if self.size not in SIZES:
            raise DomainError(f"unknown size {self.size!r}")

    def caption(self) -> str:
        return f"a {self.size} {self.color} {self.shape} at {ROWS[self.row]} {COLS[self.col]}"

    @classmethod
    def from_caption(cls, text: str) -> "ShapeSpec":
        words = text.strip().split()
        if len(words) != 7 or words[0] != "a" or words[4] != "at":
            raise DomainError(f"caption {text!r} does not match the grammar")
        size, color, shape, row, col = words[1], words[2], words[3], words[5], words[6]
        if row not in ROWS or col not in COLS:
            raise DomainError(f"caption {text!r} names an unknown grid cell")
        return cls(shape=shape, color=color, row=ROWS.index(row), col=COLS.index(col), size=size)


@dataclass(frozen=True)
class Vocabulary:
    """Dense word-id table; id 0 is reserved for the null token."""

    words: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.words or self.words[0] != NULL_TOKEN:
            raise DomainError("vocabulary must start with the null token at id 0")
        if len(set(self.words)) != len(self.words):
            raise DomainError("vocabulary has duplicate words")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}

    def encode(self, text: str, length: int) -> list[int]:
        idx = self.index
        ids = []
        for w in text.strip().split():
            if w not in idx:
                raise DomainError(f"word {w!r} not in the vocabulary")
            ids.append(idx[w])
        if len(ids) > length:
            raise DomainError(f"caption has {len(ids)} tokens, context length is {length}")
        return ids + [0] * (length - len(ids))

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids if int(i) != 0)


def caption_vocabulary() -> Vocabulary:
    words = [NULL_TOKEN, "a", *SIZES, *COLORS, *SHAPES, "at", *ROWS, *COLS]
    return Vocabulary(tuple(words))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_shape(spec: ShapeSpec, image_size: int, jitter: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Rasterize a spec to [S, S, 3] uint8 with exact palette colors (no AA)."""
    s = image_size
    img = np.empty((s, s, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    r = max(2, round(s * 0.18)) if spec.size == "large" else max(1, round(s * 0.11))
    cx = round((spec.col + 0.5) * s / 3) + jitter[0]
    cy = round((spec.row + 0.5) * s / 3) + jitter[1]
    cx = min(max(cx, r), s - 1 - r)
    cy = min(max(cy, r), s - 1 - r)
    yy, xx = np.mgrid[0:s, 0:s]
    dx, dy = xx - cx, yy - cy
    if spec.shape == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif spec.shape == "square":
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= r
    else:  # triangle, apex up
        half_width = (dy + r) / 2.0
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= half_width)
    img[mask] = COLORS[spec.color]
    return img


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    source: dict
    image_size: int
    val_fraction: float = 0.125
    vocabulary: tuple[str, ...] = ()
    context_len: int = 8

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "image_size": self.image_size,
            "val_fraction": self.val_fraction,
            "vocabulary": list(self.vocabulary),
            "context_len": self.context_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            source=d["source"],
            image_size=int(d["image_size"]),
            val_fraction=float(d.get("val_fraction", 0.125)),
            vocabulary=tuple(d.get("vocabulary", ())),
            context_len=int(d.get("context_len", 8)),
        )

    @classmethod
    def synthetic(
        cls, seed: int, count: int, image_size: int = 16, val_fraction: float = 0.125,
        context_len: int = 8,
    ) -> "DatasetManifest":
        return cls(
            source={"synthetic": {"seed": int(seed), "count": int(count)}},
            image_size=image_size,
            val_fraction=val_fraction,
            vocabulary=caption_vocabulary().words,
            context_len=context_len,
        )


@dataclass
class Dataset:
    """In-memory image/caption pairs with a deterministic train/val split."""

    manifest: DatasetManifest
    images: Tensor  # [N, 3, S, S] uint8
    tokens: Tensor  # [N, L] long
    captions: list[str]
    allow_flip: bool = False

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.manifest.vocabulary)

    def split_indices(self) -> tuple[Tensor, Tensor]:
        n = len(self)
        n_val = int(n * self.manifest.val_fraction)
        train = torch.arange(0, n - n_val)
        val = torch.arange(n - n_val, n)
        return train, val


def generate_synthetic(manifest: DatasetManifest) -> Dataset:
    """Seeded procedural rendering; identical manifest -> identical bytes."""
    params = manifest.source.get("synthetic")
    if params is None:
        raise DomainError("manifest does not describe a synthetic source")
    seed, count = int(params["seed"]), int(params["count"])
    vocab = Vocabulary(manifest.vocabulary) if manifest.vocabulary else caption_vocabulary()
    images = np.empty((count, manifest.image_size, manifest.image_size, 3), dtype=np.uint8)
    tokens = torch.zeros(count, manifest.context_len, dtype=torch.long)
    captions: list[str] = []
    for i in range(count):
        rng = random.Random(f"{seed}:{i}")
        spec = ShapeSpec(
            shape=rng.choice(SHAPES),
            color=rng.choice(list(COLORS)),
            row=rng.randrange(3),
            col=rng.randrange(3),
            size=rng.choice(SIZES),
        )
        jitter = (rng.randint(-1, 1), rng.randint(-1, 1))
        images[i] = render_shape(spec, manifest.image_size, jitter)
        cap = spec.caption()
        captions.append(cap)
        tokens[i] = torch.tensor(vocab.encode(cap, manifest.context_len))
    imgs = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    return Dataset(manifest=manifest, images=imgs, tokens=tokens, captions=captions)


def ingest_folder(
    folder,
    caption_file,
    image_size: int = 16,
    context_len: int = 8,
    vocabulary: Vocabulary | None = None,
    val_fraction: float = 0.125,
) -> Dataset:
    """Load an image folder with a TSV filename->caption map.

    Images are resized on the shorter edge and center-cropped to
    ``image_size``; horizontal flip is enabled as a train-time augmentation.
    Files without captions are skipped with a warning; unreadable images
    are an error naming the file.
    """
    folder = Path(folder)
    caption_map: dict[str, str] = {}
    with open(caption_file, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            name, _, caption = line.partition("\t")
            caption_map[name] = caption.strip()

    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".ppm", ".png", ".jpg", ".jpeg"))
    images, captions = [], []
    for p in files:
        if p.name not in caption_map:
            warnings.warn(f"no caption for {p.name}, skipping", stacklevel=2)
            continue
        try:
            arr = read_image(p)
        except Exception as exc:
            raise SlimdiffError(f"unreadable image {p}: {exc}") from exc
        images.append(_resize_center_crop(arr, image_size))
        captions.append(caption_map[p.name])

    if vocabulary is None:
        words = sorted({w for c in captions for w in c.split()})
        vocabulary = Vocabulary((NULL_TOKEN, *words))
    tokens = torch.zeros(len(images), context_len, dtype=torch.long)
    for i, cap in enumerate(captions):
        tokens[i] = torch.tensor(vocabulary.encode(cap, context_len))
    manifest = DatasetManifest(
        source={"folder": str(folder), "caption_file": str(caption_file)},
        image_size=image_size,
        val_fraction=val_fraction,
        vocabulary=vocabulary.words,
        context_len=context_len,
    )
    if images:
        stacked = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    else:
        stacked = torch.zeros(0, 3, image_size, image_size, dtype=torch.uint8)
    return Dataset(manifest=manifest, images=stacked, tokens=tokens, captions=captions,
                   allow_flip=True)


def _resize_center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    from PIL import Image

    img = Image.fromarray(arr)
    w, h = img.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    img = img.resize((nw, nh), Image.BILINEAR)
    left = (nw - size) // 2
    top = (nh - size) // 2
    return np.asarray(img.crop((left, top, left + size, top + size)), dtype=np.uint8)


def load_dataset(manifest_or_dir) -> Dataset:
    """Regenerate or re-ingest a dataset from its manifest."""
    path = Path(manifest_or_dir)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path, "r", encoding="utf-8") as fh:
        manifest = DatasetManifest.from_dict(json.load(fh))
    if "synthetic" in manifest.source:
        return generate_synthetic(manifest)
    return ingest_folder(
        manifest.source["folder"],
        manifest.source["caption_file"],
        image_size=manifest.image_size,
        context_len=manifest.context_len,
        vocabulary=Vocabulary(manifest.vocabulary),
        val_fraction=manifest.val_fraction,
    )


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write images/NNNNNN.ppm, captions.tsv, and manifest.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        name = f"{i:06d}.ppm"
        write_ppm(out / "images" / name, dataset.images[i].permute(1, 2, 0).numpy())
        lines.append(f"{name}\t{dataset.captions[i]}")
    (out / "captions.tsv").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    (out / "manifest.json").write_text(
        json.dumps(dataset.manifest.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    return out


# ---------------------------------------------------------------------------
# latent codec
# ---------------------------------------------------------------------------


class LatentCodec:
    """Fixed image<->latent codec: k-fold average-pool down, nearest up.

    k=1 keeps diffusion in pixel space and round-trips losslessly.
    Latents live in [-1, 1].
    """

    def __init__(self, factor: int = 1):
        if factor < 1:
            raise DomainError(f"codec factor must be >= 1, got {factor}")
        self.factor = factor

    def encode(self, images: Tensor) -> Tensor:
        if images.dim() != 4:
            raise DomainError(f"images must be [B, C, H, W], got {tuple(images.shape)}")
        x = images.float() / 127.5 - 1.0
        if self.factor > 1:
            x = F.avg_pool2d(x, self.factor)
        return x

    def decode(self, latent: Tensor) -> Tensor:
        x = latent
        if self.factor > 1:
            x = F.interpolate(x, scale_factor=self.factor, mode="nearest")
        x = ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round().clamp(0, 255)
        return x.to(torch.uint8)


# ---------------------------------------------------------------------------
# image io
# ---------------------------------------------------------------------------


def write_ppm(path, image) -> None:
    """Binary P6, 8-bit; accepts [H, W, 3] uint8 arrays or tensors."""
    if torch.is_tensor(image):
        image = image.numpy()
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DomainError(f"PPM writer expects [H, W, 3], got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise SlimdiffError(f"{path}: not a binary P6 PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise SlimdiffError(f"{path}: only 8-bit PPM supported")
    need = w * h * 3
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise SlimdiffError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_image(path, image) -> None:
    """Dispatch on suffix: .ppm native, anything else via Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
        return
    from PIL import Image

    if torch.is_tensor(image):
        image = image.numpy()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def tile_grid(images: Tensor, cols: int | None = None) -> np.ndarray:
    """Tile [N, 3, H, W] uint8 images into one [H', W', 3] grid image."""
    n = images.shape[0]
    if n == 0:
        raise DomainError("cannot tile an empty image batch")
    if cols is None:
        cols = int(math_ceil_sqrt(n))
    rows = (n + cols - 1) // cols
    h, w = images.shape[2], images.shape[3]
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = images[i].permute(1, 2, 0).numpy()
    return grid


def math_ceil_sqrt(n: int) -> int:
    r = int(n**0.5)
    return r if r * r >= n else r + 1
