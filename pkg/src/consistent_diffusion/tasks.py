"""Synthetic restoration tasks: test images, degradations, datasets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .diffusion import RestorationPair
from .tensor import DTYPE, FormatError, Rng, as_tensor, atomic_write, derive_seed, load_ctns, normal_sample, save_ctns

IMAGE_KINDS = ("blobs", "gradient", "checker", "mix")
TASK_KINDS = ("denoise", "sisr4x", "blur")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "denoise"
    sigma: float = 50.0  # noise std on the 0-255 scale
    blur_sigma: float = 1.5
    size: int = 32
    count: int = 64
    seed: int = 0
    channels: int = 1
    image_kind: str = "blobs"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.image_kind not in IMAGE_KINDS:
            raise ValueError(f"unknown image kind {self.image_kind!r}")
        if self.kind == "denoise" and not self.sigma > 0:
            raise ValueError("denoise sigma must be positive")
        if self.kind == "blur" and not self.blur_sigma > 0:
            raise ValueError("blur sigma must be positive")
        if self.kind == "sisr4x" and self.size % 4:
            raise ValueError(f"sisr4x needs a size divisible by 4, got {self.size}")
        if self.size < 8 or self.count < 1 or self.channels < 1:
            raise ValueError(f"invalid task spec {self}")

    @property
    def name(self) -> str:
        return {"denoise": f"denoise{self.sigma:g}", "sisr4x": "sisr4x", "blur": f"blur{self.blur_sigma:g}"}[self.kind]


# -- synthetic images -------------------------------------------------------


def _blobs(rng: Rng, c, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((c, size, size))
    n = rng.integers(3, 7)
    for _ in range(n):
        cy, cx = rng.uniform(2) * size
        sig = size * (0.05 + 0.2 * rng.uniform(1)[0])
        amp = rng.uniform(c) * 2.0 - 0.6
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        img += amp[:, None, None] * g
    return img + 0.2 + 0.3 * rng.uniform(c)[:, None, None]


def _gradient(rng: Rng, c, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    theta = 2 * np.pi * rng.uniform(1)[0]
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-12)
    lo, hi = rng.uniform(c), rng.uniform(c)
    return lo[:, None, None] + (hi - lo)[:, None, None] * ramp


def _checker(rng: Rng, c, size, period=None):
    if period is None:
        period = int(rng.integers(2, 4)) * 2
    phase_y, phase_x = rng.integers(0, period - 1, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    half = period // 2
    mask = (((yy + phase_y) % period) // half + ((xx + phase_x) % period) // half) % 2
    a, b = rng.uniform(c), rng.uniform(c)
    return np.where(mask[None] == 1, a[:, None, None], b[:, None, None])


def synth_image(rng: Rng, kind: str = "blobs", size: int = 32, channels: int = 1,
                period: int | None = None) -> np.ndarray:
    """Random test image in [0, 1]. ``period`` fixes the checkerboard cycle."""
    if size < 8:
        raise ValueError(f"image size must be >= 8, got {size}")
    if kind == "blobs":
        img = _blobs(rng, channels, size)
    elif kind == "gradient":
        img = _gradient(rng, channels, size)
    elif kind == "checker":
        img = _checker(rng, channels, size, period)
    elif kind == "mix":
        parts = [_blobs(rng, channels, size), _gradient(rng, channels, size), _checker(rng, channels, size)]
        w = rng.uniform(3)
        img = sum(wi * p for wi, p in zip(w / w.sum(), parts))
    else:
        raise ValueError(f"unknown image kind {kind!r}")
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


# -- resampling / degradation -----------------------------------------------


def _cubic(x, a=-0.5):
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


def _reflect(j, n):
    # half-sample symmetric: -1 -> 0, n -> n-1
    period = 2 * n
    j = np.mod(j, period)
    return np.where(j >= n, period - 1 - j, j)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom resampling matrix, antialiased when shrinking."""
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    mat = np.zeros((n_out, n_in))
    for i, x in enumerate(centers):
        js = np.arange(int(np.floor(x - support)), int(np.ceil(x + support)) + 1)
        w = _cubic((js - x) * kscale)
        np.add.at(mat[i], _reflect(js, n_in), w)
        mat[i] /= mat[i].sum()
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img)
    _, h, w = img.shape
    mh, mw = resize_matrix(h, out_h), resize_matrix(w, out_w)
    out = np.einsum("ij,cjk,lk->cil", mh, img.astype(np.float64), mw)
    return out.astype(DTYPE)


def degrade(task: TaskSpec, x0: np.ndarray, rng: Rng) -> np.ndarray:
    x0 = as_tensor(x0)
    if task.kind == "denoise":
        # unclamped so the Gaussian model stays exact
        return (x0 + normal_sample(rng, x0.shape, 0.0, task.sigma / 255.0)).astype(DTYPE)
    if task.kind == "sisr4x":
        _, h, w = x0.shape
        if h % 4 or w % 4:
            raise ValueError(f"sisr4x needs sides divisible by 4, got {h}x{w}")
        return bicubic_resize(bicubic_resize(x0, h // 4, w // 4), h, w)
    if task.kind == "blur":
        return np.stack([gaussian_filter(ch.astype(np.float64), task.blur_sigma, mode="reflect")
                         for ch in x0]).astype(DTYPE)
    raise ValueError(f"unknown task {task.kind!r}")


def make_dataset(spec: TaskSpec) -> list[RestorationPair]:
    pairs = []
    for i in range(spec.count):
        item = Rng(derive_seed(spec.seed, f"item{i}"))
        x0 = synth_image(item.child("image"), spec.image_kind, spec.size, spec.channels)
        pairs.append(RestorationPair(x0, degrade(spec, x0, item.child("degrade")), spec.name))
    return pairs


# -- image files ------------------------------------------------------------


ImageFormatError = FormatError


def _read_netpbm(buf: bytes, source: str):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{source}: truncated header at byte offset {pos}")
        tokens.append((buf[start:pos], start))
    magic, off = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{source}: unsupported magic {magic!r} at byte offset {off}")
    vals = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise ImageFormatError(f"{source}: malformed header field {tok!r} at byte offset {off}")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise ImageFormatError(f"{source}: maxval {maxval} unsupported (need 255) at byte offset {tokens[3][1]}")
    pos += 1  # single whitespace after maxval
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if len(buf) - pos < need:
        raise ImageFormatError(f"{source}: truncated payload at byte offset {len(buf)} (need {pos + need})")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return (data.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(DTYPE)


def load_image(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] == b"CTNS":
        return load_ctns(path)
    return _read_netpbm(buf, str(path))


def save_image(path, img: np.ndarray) -> None:
    """Write by extension: .ctns (exact), .pgm (1 channel) or .ppm (3 channels)."""
    path = Path(path)
    img = as_tensor(img)
    ext = path.suffix.lower()
    if ext == ".ctns":
        save_ctns(path, img)
        return
    c, h, w = img.shape
    if ext == ".pgm" and c == 1:
        magic = b"P5"
    elif ext == ".ppm" and c == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"{path}: cannot store {c} channels as {ext or 'no extension'}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    atomic_write(path, magic + f"\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes())


def write_dataset(pairs, spec: TaskSpec, out_dir) -> Path:
    """Store pairs as CTNS files plus a ``manifest.json``; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for i, p in enumerate(pairs):
        gt, lq = f"{i:05d}_gt.ctns", f"{i:05d}_lq.ctns"
        save_ctns(out_dir / gt, p.x0)
        save_ctns(out_dir / lq, p.y0)
        items.append({"gt": gt, "lq": lq})
    manifest = out_dir / "manifest.json"
    atomic_write(manifest, json.dumps({"task": asdict(spec), "items": items}, indent=1))
    return manifest


def read_manifest(path) -> tuple[TaskSpec, list[RestorationPair]]:
    path = Path(path)
    meta = json.loads(path.read_text())
    spec = TaskSpec(**meta["task"])
    pairs = [RestorationPair(load_image(path.parent / it["gt"]), load_image(path.parent / it["lq"]), spec.name)
             for it in meta["items"]]
    return spec, pairs
