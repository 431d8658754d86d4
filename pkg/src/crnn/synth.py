"""Synthetic glyph-string rendering and dataset generation.

Images are grayscale strips: dark glyphs from a built-in 5x7 pixel font,
concatenated with jittered spacing, then rotated, noised and rescaled.
Everything is a pure function of (label, seed, params), so datasets are fully
reproducible from their manifests. Images live on disk as 8-bit PGM (P5)
files beside a tab-separated manifest.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

import numpy as np

from .ctc import Alphabet
from .errors import AlphabetError, DataError, UsageError

# 5x7 pixel font: digits, then letters (rendered as small capitals; the
# default alphabet is case-insensitive).
_FONT = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "a": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "b": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "c": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "d": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "e": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "f": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "g": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "h": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "i": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "j": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "k": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "l": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "m": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "n": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "o": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "p": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "r": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "s": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "t": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "u": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "v": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "w": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "x": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "y": ("10001", "10001", "10001", "01010", "00100", "00100", "00100"),
    "z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
}

GLYPH_HEIGHT = 7
GLYPH_WIDTH = 5


class GlyphAtlas:
    """Binary 5x7 bitmaps covering every symbol of an alphabet."""

    def __init__(self, alphabet: Alphabet):
        self.alphabet = alphabet
        self.bitmaps: dict[str, np.ndarray] = {}
        for symbol in alphabet.labels:
            rows = _FONT.get(symbol)
            if rows is None:
                raise AlphabetError(f"no glyph for symbol {symbol!r}")
            bitmap = np.array([[c == "1" for c in row] for row in rows], float)
            if bitmap.sum() == 0.0:
                raise AlphabetError(f"glyph for {symbol!r} is empty")
            self.bitmaps[symbol] = bitmap

    def glyph(self, symbol: str) -> np.ndarray:
        try:
            return self.bitmaps[symbol]
        except KeyError:
            raise AlphabetError(f"no glyph for symbol {symbol!r}") from None


# -- small resampling kernel -----------------------------------------------------


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     fill: Optional[float] = None) -> np.ndarray:
    """Sample img at fractional (ys, xs); outside pixels read ``fill``."""
    h, w = img.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    wy = ys - y0
    wx = xs - x0

    def at(yy, xx):
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        value = img[yc, xc]
        if fill is not None:
            outside = (yy < 0) | (yy >= h) | (xx < 0) | (xx >= w)
            value = np.where(outside, fill, value)
        return value

    top = at(y0, x0) * (1 - wx) + at(y0, x0 + 1) * wx
    bottom = at(y0 + 1, x0) * (1 - wx) + at(y0 + 1, x0 + 1) * wx
    return top * (1 - wy) + bottom * wy


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return _sample_bilinear(img, ys[:, None], xs[None, :])


def rotate_image(img: np.ndarray, degrees: float, fill: float) -> np.ndarray:
    """Rotate about the center; exposed corners read the fill level."""
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = np.cos(theta) * yy - np.sin(theta) * xx + cy
    src_x = np.sin(theta) * yy + np.cos(theta) * xx + cx
    return _sample_bilinear(img, src_y, src_x, fill=fill)


# -- rendering --------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RenderParams:
    """Distortion knobs; all randomness flows from the sample seed."""

    max_label_len: int = 8
    glyph_height: int = 20
    spacing: int = 3
    spacing_jitter: int = 2
    margin: int = 6
    scale_jitter: float = 0.10
    max_rotation_deg: float = 3.0
    noise_sigma: float = 0.03
    background: float = 0.92
    background_jitter: float = 0.04
    ink: float = 0.08
    fixed_width: Optional[int] = 100  # None preserves the aspect ratio
    # Cap on anisotropic stretch when fitting the fixed width: short strips
    # get symmetric background margins instead of smearing further.
    max_stretch: float = 2.0

    def clean(self) -> "RenderParams":
        return dataclasses.replace(self, spacing_jitter=0, scale_jitter=0.0,
                                   max_rotation_deg=0.0, noise_sigma=0.0,
                                   background_jitter=0.0)


@dataclasses.dataclass
class SampleRecord:
    image: np.ndarray  # (1, 32, W), values in [0, 1]
    label: str
    seed: int


TARGET_HEIGHT = 32


def _compose_strip(label: str, atlas: GlyphAtlas, rng: np.random.Generator,
                   params: RenderParams) -> tuple[np.ndarray, float]:
    """Scaled glyphs side by side on a uniform background canvas."""
    background = params.background + params.background_jitter * float(
        rng.uniform(-1.0, 1.0)
    )
    pieces: list[np.ndarray] = []
    for symbol in label:
        bitmap = atlas.glyph(symbol)
        scale = 1.0 + params.scale_jitter * float(rng.uniform(-1.0, 1.0))
        width = max(2, int(round(params.glyph_height * GLYPH_WIDTH
                                 / GLYPH_HEIGHT * scale)))
        pieces.append(bilinear_resize(bitmap, params.glyph_height, width))
        gap = params.spacing + int(rng.integers(0, params.spacing_jitter + 1))
        pieces.append(np.zeros((params.glyph_height, gap)))
    pieces.pop()  # no gap after the last glyph

    body = np.concatenate(pieces, axis=1)
    height = params.glyph_height + 2 * params.margin
    width = body.shape[1] + 2 * params.margin
    canvas = np.full((height, width), background)
    top = params.margin
    left = params.margin
    alpha = body
    region = canvas[top : top + body.shape[0], left : left + body.shape[1]]
    canvas[top : top + body.shape[0], left : left + body.shape[1]] = (
        region * (1 - alpha) + params.ink * alpha
    )
    return canvas, background


def render(label: str, seed: int, params: RenderParams = RenderParams(),
           atlas: Optional[GlyphAtlas] = None,
           alphabet: Optional[Alphabet] = None) -> SampleRecord:
    """Render one labelled strip; deterministic in (label, seed, params)."""
    if not label:
        raise UsageError("cannot render an empty label")
    if len(label) > params.max_label_len:
        raise UsageError(
            f"label length {len(label)} exceeds the configured maximum "
            f"{params.max_label_len}"
        )
    if atlas is None:
        atlas = GlyphAtlas(alphabet if alphabet is not None
                           else Alphabet("".join(sorted(set(label)))))
    rng = np.random.default_rng(seed)
    canvas, background = _compose_strip(label, atlas, rng, params)

    if params.fixed_width is not None:
        # A one-glyph strip resized to the fixed width would smear several
        # times wider than tall; pad with background so the horizontal
        # stretch stays within max_stretch.
        height, width = canvas.shape
        isotropic = height * params.fixed_width / TARGET_HEIGHT
        minimum = int(round(isotropic / params.max_stretch))
        if width < minimum:
            pad = minimum - width
            left = pad // 2
            canvas = np.concatenate(
                [np.full((height, left), background), canvas,
                 np.full((height, pad - left), background)], axis=1,
            )

    angle = params.max_rotation_deg * float(rng.uniform(-1.0, 1.0))
    canvas = rotate_image(canvas, angle, fill=background)

    if params.noise_sigma > 0.0:
        canvas = canvas + rng.normal(0.0, params.noise_sigma, size=canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0)

    if params.fixed_width is not None:
        out_w = params.fixed_width
    else:
        h, w = canvas.shape
        out_w = max(100, int(round(w * TARGET_HEIGHT / h / 4.0)) * 4)
    image = bilinear_resize(canvas, TARGET_HEIGHT, out_w)
    return SampleRecord(np.clip(image, 0.0, 1.0)[None], label, seed)


# -- input normalization ------------------------------------------------------------


def normalize_input(image: np.ndarray) -> np.ndarray:
    """Geometry- and range-normalize an arbitrary grayscale image.

    Height is resampled to 32; width scales proportionally, rounded to the
    nearest multiple of 4, and stretched up to 100 when narrower. Integer
    inputs are mapped from [0, 255] to [0, 1]; the result is centered by
    subtracting 0.5, ready for the recognizer.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise UsageError(f"expected (1, H, W), got {image.shape}")
        image = image[0]
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise UsageError(f"expected a (H, W) grayscale image, got {image.shape}")
    if np.issubdtype(image.dtype, np.integer):
        image = image.astype(np.float64) / 255.0
    else:
        image = np.clip(image.astype(np.float64), 0.0, 1.0)
    h, w = image.shape
    out_w = int(round(w * TARGET_HEIGHT / h / 4.0)) * 4
    out_w = max(100, out_w)
    resized = bilinear_resize(image, TARGET_HEIGHT, out_w)
    return resized[None] - 0.5


# -- on-disk dataset -----------------------------------------------------------------


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM; image values in [0, 1]."""
    levels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{levels.shape[1]} {levels.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + levels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Returns (H, W) float values in [0, 1]."""
    blob = path.read_bytes()
    if not blob.startswith(b"P5"):
        raise DataError(f"{path} is not a binary PGM file")
    fields: list[bytes] = []
    offset = 2
    while len(fields) < 3:
        while offset < len(blob) and blob[offset : offset + 1].isspace():
            offset += 1
        if blob[offset : offset + 1] == b"#":
            while offset < len(blob) and blob[offset : offset + 1] != b"\n":
                offset += 1
            continue
        start = offset
        while offset < len(blob) and not blob[offset : offset + 1].isspace():
            offset += 1
        fields.append(blob[start:offset])
    offset += 1  # the single whitespace after maxval
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    if len(blob) - offset < width * height:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height,
                           offset=offset)
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def split_of_index(index: int) -> str:
    """Deterministic 80/10/10 assignment by index residue."""
    residue = index % 10
    if residue < 8:
        return "train"
    return "val" if residue == 8 else "test"


def _sample_seed(base_seed: int, index: int) -> int:
    mixed = (base_seed * 0x9E3779B97F4A7C15 + (index + 1) * 0xBF58476D1CE4E5B9)
    return mixed % (2**63)


@dataclasses.dataclass
class ManifestRow:
    filename: str
    label: str
    split: str
    seed: int


MANIFEST_NAME = "manifest.tsv"


def make_dataset(out_dir: str | Path, count: int, alphabet: Alphabet,
                 seed: int, params: RenderParams = RenderParams(),
                 min_len: int = 1) -> list[ManifestRow]:
    """Draw i.i.d. labels, render them, and write images plus a manifest."""
    if count < 1:
        raise UsageError("dataset size must be at least 1")
    if min_len < 1 or min_len > params.max_label_len:
        raise UsageError("label length bounds are inconsistent")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}")
    atlas = GlyphAtlas(alphabet)
    label_rng = np.random.default_rng(seed)
    symbols = list(alphabet.labels)
    rows: list[ManifestRow] = []
    for index in range(count):
        length = int(label_rng.integers(min_len, params.max_label_len + 1))
        label = "".join(label_rng.choice(symbols, size=length))
        sample_seed = _sample_seed(seed, index)
        record = render(label, sample_seed, params, atlas=atlas)
        filename = f"{index:06d}.pgm"
        write_pgm(out_dir / filename, record.image[0])
        rows.append(ManifestRow(filename, label, split_of_index(index),
                                sample_seed))
    lines = ["filename\tlabel\tsplit\tseed"]
    lines += [f"{r.filename}\t{r.label}\t{r.split}\t{r.seed}" for r in rows]
    (out_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")
    return rows


def read_manifest(dataset_dir: str | Path) -> list[ManifestRow]:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "filename\tlabel\tsplit\tseed":
        raise DataError(f"{path}: unexpected manifest header")
    rows = []
    for line in lines[1:]:
        filename, label, split, seed = line.split("\t")
        rows.append(ManifestRow(filename, label, split, int(seed)))
    return rows


def load_split(dataset_dir: str | Path, split: str) -> tuple[np.ndarray, list[str]]:
    """All images of one split as a (N, 1, 32, W) uint8 stack plus labels."""
    dataset_dir = Path(dataset_dir)
    rows = [r for r in read_manifest(dataset_dir) if r.split == split]
    if not rows:
        raise DataError(f"split {split!r} is empty in {dataset_dir}")
    images = []
    labels = []
    for row in rows:
        pixels = read_pgm(dataset_dir / row.filename)
        images.append(np.round(pixels * 255.0).astype(np.uint8))
        labels.append(row.label)
    widths = {img.shape[1] for img in images}
    if len(widths) != 1:
        raise DataError("split mixes image widths; batching needs equal widths")
    return np.stack(images)[:, None], labels


def batch_to_input(images_u8: np.ndarray) -> np.ndarray:
    """uint8 (N, 1, H, W) to centered float64 network input."""
    return images_u8.astype(np.float64) / 255.0 - 0.5
