"""Synthetic attribute images, PPM I/O, sample manifests and augmentation."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MANIFEST_MAGIC = "PARMAN v1"
GRID = 4
MAX_ATTRS = GRID * GRID
NOISE = 0.1
ATTRIBUTE_NAMES = [
    "female", "hat", "glasses", "long hair", "backpack", "short sleeve", "upper logo",
    "lower stripe", "boots", "handbag", "age over 60", "long coat", "skirt", "shoulder bag",
    "upper plaid", "trousers",
]


class PPMError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

def _read_token(raw: bytes, pos: int) -> tuple[bytes, int]:
    n = len(raw)
    while pos < n:
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError(f"truncated header at byte {start}")
    return raw[start:pos], pos


def decode_ppm(raw: bytes) -> np.ndarray:
    """Decode binary ``P6`` bytes (maxval 255) to a (3, H, W) float array in [0, 1]."""
    if raw[:2] != b"P6":
        raise PPMError(f"bad magic {raw[:2]!r} at byte 0, expected b'P6'")
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        offset = pos
        tok, pos = _read_token(raw, pos)
        if not tok.isdigit():
            raise PPMError(f"bad {what} {tok!r} at byte {offset}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} at byte {pos}, expected 255")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise PPMError(f"missing separator before pixel data at byte {pos}")
    pos += 1
    need = 3 * w * h
    if len(raw) - pos < need:
        raise PPMError(f"truncated pixel data at byte {len(raw)}: need {need} bytes from byte {pos}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    pix = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        return decode_ppm(raw)
    except PPMError as exc:
        raise PPMError(f"{path}: {exc}") from None


def write_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def load_image_ppm(path) -> Tensor:
    return Tensor(read_ppm(path))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class SampleManifest:
    attrs: list[str]
    height: int
    width: int
    rows: list[tuple[str, str]] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def num_attrs(self) -> int:
        return len(self.attrs)

    def __len__(self) -> int:
        return len(self.rows)

    def labels(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.num_attrs), dtype=np.int8)
        return np.array([[c == "1" for c in bits] for _, bits in self.rows], dtype=np.int8)

    def positive_ratios(self) -> np.ndarray:
        return self.labels().mean(axis=0)

    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.rows]

    def to_text(self) -> str:
        lines = [MANIFEST_MAGIC, "attrs: " + ",".join(self.attrs), f"image: {self.height}x{self.width}"]
        lines += [f"{p}\t{bits}" for p, bits in self.rows]
        return "\n".join(lines) + "\n"


def write_manifest(path, manifest: SampleManifest) -> None:
    Path(path).write_text(manifest.to_text(), encoding="utf-8")


def read_manifest(path, check_files: bool = True) -> SampleManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 3 or lines[0].strip() != MANIFEST_MAGIC:
        raise ManifestError(f"{path}: line 1 must be {MANIFEST_MAGIC!r}")
    if not lines[1].startswith("attrs:"):
        raise ManifestError(f"{path}: line 2 must start with 'attrs:'")
    attrs = [a.strip() for a in lines[1][len("attrs:"):].split(",") if a.strip()]
    if not attrs:
        raise ManifestError(f"{path}: no attributes declared")
    try:
        key, size = lines[2].split(":", 1)
        h, w = (int(v) for v in size.strip().lower().split("x"))
        if key.strip() != "image":
            raise ValueError
    except ValueError:
        raise ManifestError(f"{path}: line 3 must be 'image: HxW', got {lines[2]!r}") from None
    rows = []
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 'path<TAB>bits'")
        rel, bits = parts[0], parts[1].strip()
        if len(bits) != len(attrs) or set(bits) - {"0", "1"}:
            raise ManifestError(f"{path}:{lineno}: label {bits!r} must be {len(attrs)} chars of 0/1")
        rows.append((rel, bits))
    m = SampleManifest(attrs, h, w, rows, path.parent)
    if check_files:
        missing = [str(p) for p in m.paths() if not p.is_file()]
        if missing:
            raise ManifestError(f"{path}: {len(missing)} missing image files, e.g. {missing[0]}")
    return m


def load_dataset(manifest: SampleManifest, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """All images as (S, 3, H, W) plus the (S, L) label matrix."""
    if not len(manifest):
        raise ManifestError("manifest has no samples")
    images = np.empty((len(manifest), 3, manifest.height, manifest.width), dtype=dtype)
    for i, p in enumerate(manifest.paths()):
        img = read_ppm(p)
        if img.shape[1:] != (manifest.height, manifest.width):
            raise ManifestError(f"{p}: image is {img.shape[1]}x{img.shape[2]}, manifest says "
                                f"{manifest.height}x{manifest.width}")
        images[i] = img
    return images, manifest.labels()


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def target_ratios(num_attrs: int) -> np.ndarray:
    j = np.arange(num_attrs)
    return 0.2 + 0.6 * j / max(num_attrs - 1, 1)


def attribute_color(j: int, num_attrs: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(j / num_attrs, 1.0, 1.0))


def cell_box(j: int, height: int, width: int, inset: int = 1) -> tuple[int, int, int, int]:
    """Pixel box (top, bottom, left, right) of grid cell ``j`` in row-major order."""
    ch, cw = height // GRID, width // GRID
    r, c = divmod(j, GRID)
    return r * ch + inset, (r + 1) * ch - inset, c * cw + inset, (c + 1) * cw - inset


def render_sample(bits, rng: np.random.Generator, height: int = 64, width: int = 32) -> np.ndarray:
    """Gray background with one colored rectangle per present attribute, plus noise."""
    n = len(bits)
    img = np.full((3, height, width), 0.5)
    for j, on in enumerate(bits):
        if on:
            top, bot, left, right = cell_box(j, height, width)
            img[:, top:bot, left:right] = attribute_color(j, n)[:, None, None]
    img += rng.uniform(-NOISE, NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _write_split(out: Path, name: str, image_dir: str, labels: np.ndarray, rng, attrs, height, width):
    (out / image_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for i, y in enumerate(labels):
        rel = f"{image_dir}/{i:06d}.ppm"
        write_ppm(out / rel, render_sample(y, rng, height, width))
        rows.append((rel, "".join("1" if v else "0" for v in y)))
    m = SampleManifest(list(attrs), height, width, rows, out)
    write_manifest(out / name, m)
    return m


def gen_synthetic(out_dir, samples: int, attrs: int, seed: int, height: int = 64, width: int = 32,
                  eval_samples: int = 0) -> SampleManifest:
    """Write ``manifest.txt`` + images (and ``eval_manifest.txt`` when ``eval_samples``)."""
    if not 1 <= attrs <= MAX_ATTRS:
        raise ValueError(f"attrs must be in 1..{MAX_ATTRS}, got {attrs}")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if height % GRID or width % GRID or height // GRID < 3 or width // GRID < 3:
        raise ValueError(f"image {height}x{width} must split into a {GRID}x{GRID} grid of cells >= 3px")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = ATTRIBUTE_NAMES[:attrs]
    r = target_ratios(attrs)
    labels = rng.random((samples, attrs)) < r
    train = _write_split(out, "manifest.txt", "images", labels, rng, names, height, width)
    if eval_samples:
        ev = rng.random((eval_samples, attrs)) < r
        _write_split(out, "eval_manifest.txt", "images_eval", ev, rng, names, height, width)
    return train


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


def augment(image: np.ndarray, rng: np.random.Generator, enabled: bool = True, pad: int = 4,
            flip: bool | None = None) -> np.ndarray:
    """Pad-then-random-crop back to size, then a horizontal flip with probability 0.5.

    ``flip`` forces the flip decision when not ``None``.
    """
    if not enabled:
        return image
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="constant", constant_values=0.5)
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[:, dy:dy + h, dx:dx + w]
    do_flip = rng.random() < 0.5 if flip is None else flip
    return hflip(out) if do_flip else np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, enabled: bool = True) -> np.ndarray:
    if not enabled:
        return images
    return np.stack([augment(img, rng) for img in images])
