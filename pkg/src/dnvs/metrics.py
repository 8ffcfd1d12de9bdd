"""Image quality metrics: PSNR and windowed SSIM on [0, 1] images.

Images are channel-first (C, H, W) or plain (H, W); both metrics average
over channels. SSIM uses an 11x11 Gaussian window (sigma 1.5) over valid
positions only (no padding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, kernel: np.ndarray) -> float:
    w = kernel.shape[0]
    wx = np.lib.stride_tricks.sliding_window_view(x, (w, w))
    wy = np.lib.stride_tricks.sliding_window_view(y, (w, w))
    mu_x = np.einsum("ijkl,kl->ij", wx, kernel)
    mu_y = np.einsum("ijkl,kl->ij", wy, kernel)
    ex2 = np.einsum("ijkl,kl->ij", wx * wx, kernel)
    ey2 = np.einsum("ijkl,kl->ij", wy * wy, kernel)
    exy = np.einsum("ijkl,kl->ij", wx * wy, kernel)
    sx = ex2 - mu_x ** 2
    sy = ey2 - mu_y ** 2
    sxy = exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sx + sy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W), got shape {a.shape}")
    H, W = a.shape[1:]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"image {H}x{W} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = gaussian_window()
    return float(np.mean([_ssim_channel(a[c], b[c], kernel) for c in range(a.shape[0])]))


@dataclass
class EvalReport:
    """Per-target-view quality plus aggregates. ``rows`` holds
    (scene, view, psnr, ssim) per held-out view."""

    rows: list = field(default_factory=list)
    mean_psnr: float = 0.0
    std_psnr: float = 0.0
    mean_ssim: float = 0.0
    std_ssim: float = 0.0
    step: int = 0
    seed: int = 0
    config_digest: str = ""

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be >= 0")
        for scene, view, p, s in self.rows:
            if p > PSNR_CAP or not -1.0 <= s <= 1.0 + 1e-12:
                raise ValueError(f"metric out of range for view {scene}:{view}: "
                                 f"psnr {p}, ssim {s}")

    @classmethod
    def from_rows(cls, rows, step: int = 0, seed: int = 0,
                  config_digest: str = "") -> "EvalReport":
        ps = np.array([r[2] for r in rows], dtype=np.float64)
        ss = np.array([r[3] for r in rows], dtype=np.float64)
        return cls(rows=list(rows),
                   mean_psnr=float(ps.mean()) if len(rows) else 0.0,
                   std_psnr=float(ps.std()) if len(rows) else 0.0,
                   mean_ssim=float(ss.mean()) if len(rows) else 0.0,
                   std_ssim=float(ss.std()) if len(rows) else 0.0,
                   step=step, seed=seed, config_digest=config_digest)
