"""Training objectives: RGB reconstruction with an optional frozen
perceptual term, semantic alignment of appearance tokens against a frozen
patch teacher, and cosine consistency of geometry tokens over cross-view
correspondences.

The heavyweight pretrained networks the method leans on are replaced by
seed-fixed random encoders with the same mathematical shape (patchwise
linear, GELU, 3x3 neighborhood mixing over the patch grid), so every loss
pathway stays exact and reproducible without external checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import tensor as T
from .geometry import CorrespondenceSet, patchify
from .nvst_io import read_nvst
from .tensor import Tensor

__all__ = [
    "LossWeights", "SN_GAMMA", "SN_EPS",
    "spatial_normalize", "neighbor_indices",
    "FrozenPatchTeacher", "FileTeacher", "FrozenPerceptualProxy",
    "init_projector", "apply_projector",
    "irepa_loss", "geo_loss", "rgb_loss", "total_loss",
    "supervision_call_count",
]

SN_GAMMA = 0.60
SN_EPS = 1e-6
TEACHER_DIM = 32
_VAR_GUARD = 1e-24  # keeps sqrt differentiable at zero variance; below one
                    # ulp for any variance that actually occurs

_supervision_calls = 0  # every teacher/proxy evaluation, across instances


def supervision_call_count() -> int:
    """Global count of teacher/proxy evaluations; the latency benchmark
    asserts this stays flat while timing."""
    return _supervision_calls


def _count_supervision() -> None:
    global _supervision_calls
    _supervision_calls += 1


@dataclass
class LossWeights:
    lam_vgg: float = 0.5
    lam_I: float = 0.5
    lam_P: float = 0.5

    def __post_init__(self):
        if min(self.lam_vgg, self.lam_I, self.lam_P) < 0:
            raise ValueError("loss weights must be nonnegative")


def spatial_normalize(z: Tensor, gamma: float = SN_GAMMA, eps: float = SN_EPS) -> Tensor:
    """Per-token affine over the feature (last) axis:
    (z - gamma*mean) / (population_std + eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = T.mean(z, axis=-1, keepdims=True)
    sigma = T.sqrt(T.var(z, axis=-1, keepdims=True) + _VAR_GUARD)
    return (z - gamma * mu) / (sigma + eps)


def neighbor_indices(gh: int, gw: int) -> np.ndarray:
    """(N_p, 9) patch-grid neighbor rows in raster offset order; -1 where the
    3x3 window leaves the grid."""
    gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    out = np.empty((gh * gw, 9), dtype=np.int64)
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ny = gy + dy
            nx = gx + dx
            ok = (ny >= 0) & (ny < gh) & (nx >= 0) & (nx < gw)
            out[:, k] = np.where(ok, ny * gw + nx, -1).reshape(-1)
            k += 1
    return out


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _mix_np(h: np.ndarray, grid: tuple[int, int], W9: np.ndarray, b9: np.ndarray) -> np.ndarray:
    idx = neighbor_indices(*grid)
    padded = np.concatenate([h, np.zeros((1, h.shape[1]))], axis=0)
    stacked = padded[idx.reshape(-1)].reshape(h.shape[0], -1)  # -1 hits the pad row
    return stacked @ W9 + b9


def _mix_tape(h: Tensor, grid: tuple[int, int], W9: Tensor, b9: Tensor) -> Tensor:
    idx = neighbor_indices(*grid)
    pad = Tensor(np.zeros((1, h.shape[1])))
    padded = T.concat([h, pad], axis=0)
    n = h.shape[0]
    cols = [T.gather_rows(padded, np.where(idx[:, k] < 0, n, idx[:, k]))
            for k in range(9)]
    return T.concat(cols, axis=1) @ W9 + b9


class FrozenPatchTeacher:
    """Deterministic per-patch feature extractor standing in for a
    pretrained vision backbone: patchwise linear, GELU, then a 3x3
    neighborhood mix over the patch grid. Weights are drawn once from a
    fixed seed and never receive gradients. ``calls`` counts every feature
    extraction."""

    def __init__(self, patch_size: int, d_t: int = TEACHER_DIM, seed: int = 0):
        self.patch_size = patch_size
        self.d_t = d_t
        rng = np.random.default_rng(seed)
        d_in = 3 * patch_size * patch_size
        self.W1 = rng.normal(0.0, d_in ** -0.5, (d_in, d_t))
        self.b1 = rng.normal(0.0, 0.1, d_t)
        self.W9 = rng.normal(0.0, (9 * d_t) ** -0.5, (9 * d_t, d_t))
        self.b9 = rng.normal(0.0, 0.1, d_t)
        self.calls = 0

    def features(self, image: np.ndarray, key=None) -> np.ndarray:
        """(H, W, 3) image -> (N_p, d_t) patch features."""
        self.calls += 1
        _count_supervision()
        H, W = image.shape[:2]
        p = self.patch_size
        rows = patchify(np.moveaxis(image, 2, 0), p)
        h = _np_gelu(rows @ self.W1 + self.b1)
        return _mix_np(h, (H // p, W // p), self.W9, self.b9)


class FileTeacher:
    """Teacher backed by precomputed tensors teacher_###.nvst; ``key``
    selects the view."""

    def __init__(self, root):
        self.root = Path(root)
        self.calls = 0

    def features(self, image=None, key: int = 0) -> np.ndarray:
        self.calls += 1
        _count_supervision()
        return read_nvst(self.root / f"teacher_{key:03d}.nvst")


class FrozenPerceptualProxy:
    """Frozen random feature space for the perceptual part of the RGB loss.
    Same architecture as the patch teacher, but applied on the tape so the
    gradient flows through the rendered input (never into the weights)."""

    def __init__(self, patch_size: int, d_t: int = TEACHER_DIM, seed: int = 1):
        enc = FrozenPatchTeacher(patch_size, d_t, seed)
        self.patch_size = patch_size
        self.W1 = Tensor(enc.W1)  # requires_grad False: frozen
        self.b1 = Tensor(enc.b1)
        self.W9 = Tensor(enc.W9)
        self.b9 = Tensor(enc.b9)
        self.calls = 0

    def features_rows(self, rows: Tensor, grid: tuple[int, int]) -> Tensor:
        """(N_p, 3p^2) patch rows -> (N_p, d_t), differentiable in rows."""
        self.calls += 1
        _count_supervision()
        h = T.gelu(rows @ self.W1 + self.b1)
        return _mix_tape(h, grid, self.W9, self.b9)

    def features_rows_np(self, rows: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        self.calls += 1
        _count_supervision()
        h = _np_gelu(rows @ self.W1.data + self.b1.data)
        return _mix_np(h, grid, self.W9.data, self.b9.data)


def init_projector(half: int, d_t: int = TEACHER_DIM, seed: int = 0) -> dict[str, Tensor]:
    """Learnable 3x3 projector mapping normalized student features to the
    teacher space."""
    rng = np.random.default_rng(seed)
    return {
        "proj.W": Tensor(rng.normal(0.0, (9 * half) ** -0.5, (9 * half, d_t)),
                         requires_grad=True),
        "proj.b": Tensor(np.zeros(d_t), requires_grad=True),
    }


def apply_projector(feats: Tensor, grid: tuple[int, int], proj: dict) -> Tensor:
    return _mix_tape(feats, grid, proj["proj.W"], proj["proj.b"])


def irepa_loss(student: Tensor, image: np.ndarray, teacher, proj: dict,
               grid: tuple[int, int], gamma: float = SN_GAMMA,
               eps: float = SN_EPS, key=None) -> Tensor:
    """Alignment of one view's appearance tokens with the teacher: smooth-L1
    (beta 1) between the projected, spatially normalized student features
    and the frozen teacher features, averaged over patches and channels."""
    target = np.asarray(teacher.features(image, key=key))
    pred = apply_projector(spatial_normalize(student, gamma, eps), grid, proj)
    if target.shape != pred.shape:
        raise ValueError(
            f"teacher grid {target.shape} does not match student grid {pred.shape}")
    return T.mean(T.smooth_l1(pred, Tensor(target), beta=1.0))


def geo_loss(features: Tensor, corr: CorrespondenceSet) -> tuple[Tensor, dict]:
    """Cosine consistency over z-buffered matches.

    ``features`` is (V, N_p, d) covering every view index the matches may
    reference. Returns (loss, info); loss is the mean over valid targets of
    the mean of 1 - cos over that target's matches, zero (with
    info["valid_targets"] == 0) when no target is valid.
    """
    V, n_p, d = features.shape
    flat = T.reshape(features, (V * n_p, d))
    terms = []
    n_matches = 0
    for j in corr.targets:
        if not corr.valid.get(j, False):
            continue
        m = corr.matches[j]
        if np.any(m[:, 0] >= V) or np.any(m[:, 1] >= n_p) or np.any(m[:, 2] >= n_p) or j >= V:
            raise IndexError("correspondence indices exceed the feature array")
        src = T.gather_rows(flat, m[:, 0] * n_p + m[:, 1])
        tgt = T.gather_rows(flat, j * n_p + m[:, 2])
        cos = T.cosine_similarity(src, tgt)
        terms.append(T.mean(1.0 - cos))
        n_matches += len(m)
    if not terms:
        return Tensor(0.0), {"valid_targets": 0, "matches": 0}
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)), {"valid_targets": len(terms), "matches": n_matches}


def rgb_loss(rendered: Tensor, target: np.ndarray, proxy=None,
             lam_vgg: float = 0.0, patch_size: int | None = None) -> Tensor:
    """MSE plus an optional frozen-feature-space MSE. ``rendered`` is
    (B, n_tgt, 3, H, W) on the tape; ``target`` matches. The perceptual
    term is skipped entirely (proxy never called) when lam_vgg == 0."""
    target = np.asarray(target, dtype=np.float64)
    if tuple(rendered.shape) != target.shape:
        raise ValueError(f"shape mismatch: rendered {rendered.shape} vs target {target.shape}")
    diff = rendered - Tensor(target)
    loss = T.mean(diff * diff)
    if lam_vgg > 0:
        if proxy is None or patch_size is None:
            raise ValueError("perceptual term needs a proxy and patch size")
        B, n_tgt, _, H, W = rendered.shape
        p = patch_size
        gh, gw = H // p, W // p
        rows = T.reshape(
            T.transpose(T.reshape(rendered, (B, n_tgt, 3, gh, p, gw, p)),
                        (0, 1, 3, 5, 2, 4, 6)),
            (B * n_tgt * gh * gw, 3 * p * p))
        rows_t = np.stack([patchify(img, p) for img in
                           target.reshape(-1, 3, H, W)]).reshape(-1, 3 * p * p)
        per_view = T.split(rows, [gh * gw] * (B * n_tgt), axis=0)
        feats = T.concat([proxy.features_rows(v, (gh, gw)) for v in per_view], axis=0)
        feats_t = np.concatenate([
            proxy.features_rows_np(rows_t[i * gh * gw:(i + 1) * gh * gw], (gh, gw))
            for i in range(B * n_tgt)], axis=0)
        pdiff = feats - Tensor(feats_t)
        loss = loss + lam_vgg * T.mean(pdiff * pdiff)
    return loss


def total_loss(rgb: Tensor, irepa: Tensor | None, geo: Tensor | None,
               weights: LossWeights) -> tuple[Tensor, dict]:
    """Weighted sum; the report carries each term unweighted."""
    total = rgb
    report = {"rgb": float(rgb.data), "irepa": 0.0, "geo": 0.0}
    if irepa is not None and weights.lam_I > 0:
        total = total + weights.lam_I * irepa
        report["irepa"] = float(irepa.data)
    if geo is not None and weights.lam_P > 0:
        total = total + weights.lam_P * geo
        report["geo"] = float(geo.data)
    report["total"] = float(total.data)
    return total, report
