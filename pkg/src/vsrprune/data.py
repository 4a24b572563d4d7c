"""Synthetic sequences, BI/BD degradations, PNG sequence I/O, and metrics.

Sequences are procedurally generated with known integer global motion so
the oracle shift alignment in the model is exact: a band-limited noise
canvas with geometric shapes is cropped at per-frame offsets that move by
whole LR pixels (4 HR pixels). Degradations are the two standard x4
pipelines: bicubic resampling with antialiasing, and Gaussian blur
(sigma 1.6) followed by subsampling every four pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensorcore import ShapeError, ValueTensor
from .vsrmodel import Sequence

SCALE = 4
PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class DegradationSpec:
    """x4 degradation settings.

    BD: separable Gaussian blur then take every ``stride``-th pixel from
    index 0. BI: cubic-kernel resample (a = -0.5) with the kernel widened by
    the scale factor (antialiasing), weights normalized per output pixel,
    symmetric boundary handling.
    """

    kind: str = "BD"  # "BI" | "BD"
    sigma: float = 1.6
    support: int = 13
    stride: int = SCALE
    cubic_a: float = -0.5
    antialias: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("BI", "BD"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.stride != SCALE:
            raise ValueError("only the x4 task is supported (stride 4)")


def gaussian_taps(sigma: float, support: int) -> np.ndarray:
    """Normalized odd-length Gaussian kernel."""
    half = support // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    taps = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def _cubic(x: np.ndarray, a: float) -> np.ndarray:
    ax = np.abs(x)
    out = np.zeros_like(ax)
    m1 = ax <= 1
    m2 = (ax > 1) & (ax < 2)
    out[m1] = (a + 2) * ax[m1] ** 3 - (a + 3) * ax[m1] ** 2 + 1
    out[m2] = a * ax[m2] ** 3 - 5 * a * ax[m2] ** 2 + 8 * a * ax[m2] - 4 * a
    return out


def _bicubic_matrix(n_in: int, scale: int, a: float, antialias: bool) -> np.ndarray:
    """Row-stochastic downsampling matrix in the imresize convention."""
    n_out = n_in // scale
    inv = 1.0 / scale
    width = 4.0 / inv if antialias else 4.0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) / inv - 0.5
        left = int(np.floor(center - width / 2 + 0.5))
        js = np.arange(left, left + int(width), dtype=np.int64)
        if antialias:
            w = _cubic((center - js) * inv, a) * inv
        else:
            w = _cubic(center - js, a)
        # symmetric boundary: reflect out-of-range taps back inside
        refl = js.copy()
        refl = np.where(refl < 0, -refl - 1, refl)
        refl = np.where(refl >= n_in, 2 * n_in - 1 - refl, refl)
        np.add.at(m[i], refl, w)
        m[i] /= m[i].sum()
    return m


def degrade(hr: ValueTensor, spec: DegradationSpec = DegradationSpec()) -> ValueTensor:
    """Produce the x4 LR observation of an HR tensor."""
    b, c, h, w = hr.shape
    if h % SCALE or w % SCALE:
        raise ShapeError(f"HR extents {h}x{w} not divisible by {SCALE}")
    x = hr.data.astype(np.float64)
    if spec.kind == "BD":
        taps = gaussian_taps(spec.sigma, spec.support)
        blurred = ndimage.correlate1d(x, taps, axis=2, mode="reflect")
        blurred = ndimage.correlate1d(blurred, taps, axis=3, mode="reflect")
        lr = blurred[:, :, :: spec.stride, :: spec.stride]
    else:
        ah = _bicubic_matrix(h, SCALE, spec.cubic_a, spec.antialias)
        aw = _bicubic_matrix(w, SCALE, spec.cubic_a, spec.antialias)
        lr = np.einsum("Yh,bchw,Xw->bcYX", ah, x, aw, optimize=True)
    return ValueTensor(lr.astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic sequences


def _world_canvas(
    rng: np.random.Generator, height: int, width: int, detail_sigma: float, shapes: int
) -> np.ndarray:
    """Band-limited noise plus random rectangles and disks, values in [0, 1].

    ``detail_sigma`` sets the texture scale (smaller = finer detail, a
    harder reconstruction task); ``shapes`` the number of geometric objects.
    """
    base = rng.random((3, height, width))
    smooth = ndimage.gaussian_filter(base, sigma=(0, detail_sigma, detail_sigma), mode="wrap")
    lo, hi = smooth.min(), smooth.max()
    canvas = (smooth - lo) / max(hi - lo, 1e-9)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(shapes):
        color = rng.random(3)
        if rng.random() < 0.5:
            y0 = int(rng.integers(0, height))
            x0 = int(rng.integers(0, width))
            hh = int(rng.integers(height // 16, height // 4))
            ww = int(rng.integers(width // 16, width // 4))
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy = int(rng.integers(0, height))
            cx = int(rng.integers(0, width))
            r = int(rng.integers(height // 16, height // 5))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        canvas[:, mask] = 0.7 * color[:, None] + 0.3 * canvas[:, mask]
    return np.clip(canvas, 0.0, 1.0)


def synth_sequence(
    seed: int,
    frames: int,
    hr_size: tuple[int, int],
    motion_range: int,
    degradation: DegradationSpec = DegradationSpec(),
    detail_sigma: float = 2.0,
    shapes: int = 8,
) -> Sequence:
    """Deterministic HR+LR sequence with known integer LR motion per step."""
    hh, ww = hr_size
    if hh % SCALE or ww % SCALE:
        raise ShapeError(f"HR size {hr_size} not divisible by {SCALE}")
    rng = np.random.default_rng(seed)
    motion = [
        (int(rng.integers(-motion_range, motion_range + 1)), int(rng.integers(-motion_range, motion_range + 1)))
        for _ in range(frames - 1)
    ]
    margin = SCALE * motion_range * max(frames - 1, 1)
    canvas = _world_canvas(rng, hh + 2 * margin, ww + 2 * margin, detail_sigma, shapes)
    oy = ox = margin
    hr_frames = []
    offsets = [(oy, ox)]
    for dy, dx in motion:
        # content moving down-right means the crop window moves up-left
        oy -= SCALE * dy
        ox -= SCALE * dx
        offsets.append((oy, ox))
    for oy_i, ox_i in offsets:
        crop = canvas[:, oy_i : oy_i + hh, ox_i : ox_i + ww]
        hr_frames.append(ValueTensor(crop[None].astype(np.float32)))
    lr_frames = [degrade(f, degradation) for f in hr_frames]
    return Sequence(frames=lr_frames, hr_frames=hr_frames, motion=motion)


# ---------------------------------------------------------------------------
# metrics


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    xa = a.data if isinstance(a, ValueTensor) else np.asarray(a)
    xb = b.data if isinstance(b, ValueTensor) else np.asarray(b)
    if xa.shape != xb.shape:
        raise ShapeError(f"metric shapes differ: {xa.shape} vs {xb.shape}")
    return xa.astype(np.float64), xb.astype(np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at 100."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    xa, xb = _pair(a, b)
    mse = float(np.mean((xa - xb) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean local SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    xa, xb = _pair(a, b)
    if xa.ndim == 4:
        xa = xa.reshape(-1, *xa.shape[2:])
        xb = xb.reshape(-1, *xb.shape[2:])
    elif xa.ndim == 2:
        xa, xb = xa[None], xb[None]
    taps = gaussian_taps(1.5, 11)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def win_mean(img: np.ndarray) -> np.ndarray:
        out = ndimage.correlate1d(img, taps, axis=1, mode="constant")
        out = ndimage.correlate1d(out, taps, axis=2, mode="constant")
        return out[:, 5:-5, 5:-5]  # valid windows only

    mu_a = win_mean(xa)
    mu_b = win_mean(xb)
    var_a = win_mean(xa * xa) - mu_a * mu_a
    var_b = win_mean(xb * xb) - mu_b * mu_b
    cov = win_mean(xa * xb) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())


# ---------------------------------------------------------------------------
# sequence directories


def save_sequence(seq: Sequence, path) -> None:
    """Write zero-padded-index PNG frames plus a motion sidecar (8-bit RGB)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        _write_png(frame, root / f"frame_{i:04d}.png")
    if seq.hr_frames is not None:
        hr_dir = root / "hr"
        hr_dir.mkdir(exist_ok=True)
        for i, frame in enumerate(seq.hr_frames):
            _write_png(frame, hr_dir / f"frame_{i:04d}.png")
    if seq.motion is not None:
        lines = [f"{dy} {dx}" for dy, dx in seq.motion]
        (root / "motion.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_sequence(path) -> Sequence:
    """Read a sequence directory; missing motion falls back to zero shift."""
    root = Path(path)
    frame_paths = sorted(root.glob("frame_*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"no frame_*.png in {root}")
    frames = [_read_png(p) for p in frame_paths]
    hr_dir = root / "hr"
    hr_frames = None
    if hr_dir.is_dir():
        hr_frames = [_read_png(p) for p in sorted(hr_dir.glob("frame_*.png"))]
    motion = None
    motion_path = root / "motion.txt"
    if motion_path.exists():
        motion = []
        for line in motion_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                dy, dx = line.split()
                motion.append((int(dy), int(dx)))
    return Sequence(frames=frames, hr_frames=hr_frames, motion=motion)


def _write_png(frame: ValueTensor, path: Path) -> None:
    arr = np.clip(frame.data[0], 0.0, 1.0)
    img = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img, mode="RGB").save(path)


def _read_png(path: Path) -> ValueTensor:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return ValueTensor(img.transpose(2, 0, 1)[None])
