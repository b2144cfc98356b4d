"""Procedural clean images and the four corruption operators (blur, rain, noise, haze).

Images are float32 arrays of shape ``[3, H, W]`` in ``[0, 1]``. All randomness
flows from explicit integer seeds; nothing touches a global RNG.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.signal import convolve2d


class Label(str, enum.Enum):
    BLUR = "B"
    RAIN = "R"
    NOISE = "N"
    HAZE = "H"


LABELS = (Label.BLUR, Label.RAIN, Label.NOISE, Label.HAZE)
DEFAULT_NOISE_SIGMA = 25.0 / 255.0


@dataclass(frozen=True)
class Noise:
    sigma: float = DEFAULT_NOISE_SIGMA
    label = Label.NOISE


@dataclass(frozen=True)
class Rain:
    num_streaks: int = 14
    length_px: int = 9
    angle_deg: float = 0.0
    intensity: float = 0.6
    label = Label.RAIN


@dataclass(frozen=True)
class Haze:
    A: float = 0.9
    beta_sc: float = 1.2
    label = Label.HAZE


@dataclass(frozen=True, eq=False)
class Blur:
    kernel: np.ndarray
    label = Label.BLUR

    def __eq__(self, other):
        return isinstance(other, Blur) and np.array_equal(self.kernel, other.kernel)


DegradationSpec = Union[Noise, Rain, Haze, Blur]


@dataclass
class PairedSample:
    degraded: np.ndarray
    clean: np.ndarray
    label: Label
    seed: int


def _rng(*seed_parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed_parts]))


# ----------------------------------------------------------------------------
# clean images
# ----------------------------------------------------------------------------

def generate_clean(seed: int, size: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Smooth colour gradient + random rectangles + a sinusoidal texture."""
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"clean images need H, W >= 16, got {h}x{w}")
    rng = _rng(seed, 0xC1EA)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    base = rng.uniform(0.2, 0.7, size=(3, 1, 1))
    slope = rng.uniform(-0.3, 0.3, size=(3, 2, 1, 1))
    img = base + slope[:, 0] * yy + slope[:, 1] * xx

    for _ in range(int(rng.integers(3, 7))):
        y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
        rh, rw = rng.integers(4, h // 2 + 1), rng.integers(4, w // 2 + 1)
        colour = rng.uniform(0, 1, size=(3, 1, 1))
        alpha = rng.uniform(0.5, 1.0)
        region = img[:, y0:y0 + rh, x0:x0 + rw]
        img[:, y0:y0 + rh, x0:x0 + rw] = (1 - alpha) * region + alpha * colour

    freq = rng.uniform(2.0, 6.0)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img = img + rng.uniform(0.05, 0.15) * wave * rng.uniform(0.5, 1.0, size=(3, 1, 1))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------------
# operators
# ----------------------------------------------------------------------------

def motion_kernel(size: int = 5, angle_deg: float = 0.0) -> np.ndarray:
    """Normalized linear motion-blur kernel through the centre at ``angle_deg``."""
    k = np.zeros((size, size))
    c = (size - 1) / 2
    t = np.linspace(-c, c, 8 * size)
    a = np.deg2rad(angle_deg)
    ys, xs = c - t * np.sin(a), c + t * np.cos(a)
    # bilinear splat of sample points along the line
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < size) & (xi >= 0) & (xi < size)
            np.add.at(k, (yi[ok], xi[ok]), (wy * wx)[ok])
    return k / k.sum()


def depth_field(seed: int, size: tuple[int, int]) -> np.ndarray:
    """Smooth low-frequency field rescaled to exactly span ``[0, 1]``."""
    h, w = size
    rng = _rng(seed, 0xDE97)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    field = rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        field = field + rng.uniform(0.2, 0.6) * np.cos(
            2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi)
        )
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)


def scatter(clean: np.ndarray, transmission: np.ndarray, airlight: float) -> np.ndarray:
    """Atmospheric scattering ``J * t + A * (1 - t)``."""
    return clean * transmission + airlight * (1.0 - transmission)


def rain_field(spec: Rain, size: tuple[int, int], seed: int) -> np.ndarray:
    """Additive streak layer ``[H, W]``: bright line segments with a Gaussian cross-profile."""
    h, w = size
    rng = _rng(seed, 0x4A1)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a = np.deg2rad(spec.angle_deg)
    # streak direction is near-vertical, tilted by angle_deg
    dy, dx = np.cos(a), np.sin(a)
    out = np.zeros((h, w))
    for _ in range(spec.num_streaks):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        along = (yy - cy) * dy + (xx - cx) * dx
        across = -(yy - cy) * dx + (xx - cx) * dy
        width = rng.uniform(0.4, 0.8)
        profile = np.exp(-0.5 * (across / width) ** 2) * (np.abs(along) <= spec.length_px / 2)
        out = np.maximum(out, rng.uniform(0.6, 1.0) * profile)
    return spec.intensity * out


def additive_field(spec: DegradationSpec, size: tuple[int, int], seed: int) -> np.ndarray:
    """The ``N`` term for additive operators, as ``[3, H, W]``."""
    h, w = size
    if isinstance(spec, Noise):
        return spec.sigma * _rng(seed, 0x401).standard_normal((3, h, w))
    if isinstance(spec, Rain):
        return np.broadcast_to(rain_field(spec, size, seed), (3, h, w)).copy()
    raise TypeError(f"{type(spec).__name__} is not an additive operator")


def validate_spec(spec: DegradationSpec) -> None:
    if isinstance(spec, Noise):
        if not 0.0 <= spec.sigma <= 1.0:
            raise ValueError(f"noise sigma must lie in [0, 1], got {spec.sigma}")
    elif isinstance(spec, Rain):
        if spec.num_streaks < 0 or spec.length_px < 1 or spec.intensity < 0:
            raise ValueError(f"invalid rain parameters {spec}")
    elif isinstance(spec, Haze):
        if not 0.7 <= spec.A <= 1.0 or spec.beta_sc <= 0:
            raise ValueError(f"haze needs A in [0.7, 1] and beta_sc > 0, got {spec}")
    elif isinstance(spec, Blur):
        k = np.asarray(spec.kernel)
        if k.ndim != 2 or (k < 0).any() or abs(k.sum() - 1.0) > 1e-6:
            raise ValueError("blur kernel must be a non-negative 2-D array summing to 1")
    else:
        raise TypeError(f"unknown degradation spec {spec!r}")


def apply_degradation(clean: np.ndarray, spec: DegradationSpec, seed: int) -> np.ndarray:
    validate_spec(spec)
    h, w = clean.shape[1:]
    x = clean.astype(np.float64)
    if isinstance(spec, (Noise, Rain)):
        out = x + additive_field(spec, (h, w), seed)
    elif isinstance(spec, Haze):
        t = np.exp(-spec.beta_sc * depth_field(seed, (h, w)))
        out = scatter(x, t, spec.A)
    else:
        k = np.asarray(spec.kernel, dtype=np.float64)
        out = np.stack([convolve2d(ch, k, mode="same", boundary="fill") for ch in x])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------

def spec_for(label: Label, seed: int, noise_sigma: float = DEFAULT_NOISE_SIGMA) -> DegradationSpec:
    """Draw operator parameters for ``label``; reproducible from ``seed``."""
    rng = _rng(seed, 0x59EC)
    label = Label(label)
    if label is Label.NOISE:
        return Noise(sigma=noise_sigma)
    if label is Label.RAIN:
        return Rain(
            num_streaks=int(rng.integers(10, 19)),
            length_px=int(rng.integers(6, 12)),
            angle_deg=float(rng.uniform(-25, 25)),
            intensity=float(rng.uniform(0.5, 0.8)),
        )
    if label is Label.HAZE:
        return Haze(A=float(rng.uniform(0.7, 1.0)), beta_sc=float(rng.uniform(0.8, 1.6)))
    return Blur(kernel=motion_kernel(5, float(rng.uniform(0, 180))))


def sample_seed(seed: int, label: Label, k: int) -> int:
    return int(np.random.SeedSequence([seed, LABELS.index(Label(label)), k]).generate_state(1)[0])


def make_sample(label: Label, seed: int, size: tuple[int, int], noise_sigma: float = DEFAULT_NOISE_SIGMA) -> PairedSample:
    clean = generate_clean(seed, size)
    degraded = apply_degradation(clean, spec_for(label, seed, noise_sigma), seed)
    return PairedSample(degraded, clean, Label(label), seed)


def make_balanced_dataset(
    n_per_task: int,
    size: tuple[int, int] = (32, 32),
    seed: int = 0,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> list[PairedSample]:
    """``n_per_task`` samples for each of the four labels, in a seeded shuffled order."""
    if n_per_task < 1:
        raise ValueError("n_per_task must be >= 1")
    samples = [
        make_sample(label, sample_seed(seed, label, k), size, noise_sigma)
        for label in LABELS
        for k in range(n_per_task)
    ]
    order = _rng(seed, 0x5F).permutation(len(samples))
    return [samples[i] for i in order]
