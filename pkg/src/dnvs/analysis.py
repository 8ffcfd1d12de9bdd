"""Representation analyses and the inference latency benchmark.

Covers three artifacts: cosine-similarity distributions between the token
halves (within-semantic, within-spatial, and cross), PCA colorings of
intermediate feature maps written as binary PPM images at patch-grid
resolution, and a wall-clock forward benchmark that runs with supervision
taps disabled and proves no teacher was evaluated while timing.
"""

from __future__ import annotations

import csv
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import losses
from .linalg import pca_top_k
from .model import (
    ConfigError,
    ModelConfig,
    flop_count,
    model_forward,
    param_count,
)

__all__ = [
    "sample_pairs", "cosine_groups", "input_token_pool", "cosine_analysis",
    "write_cosine_csv", "pca_rgb", "write_ppm", "read_ppm",
    "export_features_pca", "bench_latency", "write_bench_csv", "variant_name",
]

_COS_EPS = 1e-12
COSINE_GROUPS = ("I-I", "P-P", "I-P")


# ---------------------------------------------------------------------------
# cosine similarity distributions


def sample_pairs(n_tokens: int, n_pairs: int, seed: int = 0) -> np.ndarray:
    """Ordered pairs (i, j), i != j. Exhaustive when the pool is small
    enough, otherwise uniform with a fixed seed."""
    if n_tokens < 2:
        raise ValueError("need at least two tokens to form pairs")
    total = n_tokens * (n_tokens - 1)
    if n_pairs >= total:
        i, j = np.meshgrid(np.arange(n_tokens), np.arange(n_tokens),
                           indexing="ij")
        keep = (i != j).reshape(-1)
        return np.stack([i.reshape(-1)[keep], j.reshape(-1)[keep]], axis=1)
    rng = np.random.default_rng(seed)
    i = rng.integers(n_tokens, size=n_pairs)
    j = rng.integers(n_tokens, size=n_pairs)
    bad = i == j
    while bad.any():
        j[bad] = rng.integers(n_tokens, size=int(bad.sum()))
        bad = i == j
    return np.stack([i, j], axis=1)


def cosine_groups(tokens: np.ndarray, pairs: np.ndarray) -> dict[str, np.ndarray]:
    """Cosines per pair within the semantic halves (I-I), within the
    spatial halves (P-P), and across (I half of token i vs P half of
    token j)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    half = tokens.shape[1] // 2
    I = tokens[:, :half]
    P = tokens[:, half:]

    def cos(a, b):
        return np.sum(a * b, axis=1) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + _COS_EPS)

    i, j = pairs[:, 0], pairs[:, 1]
    return {"I-I": cos(I[i], I[j]), "P-P": cos(P[i], P[j]),
            "I-P": cos(I[i], P[j])}


def input_token_pool(cfg: ModelConfig, params: dict, samples, layer: int) -> np.ndarray:
    """Input-view patch tokens after the given layer, pooled over the whole
    batch; registers and target tokens are excluded."""
    out = model_forward(samples, cfg, params, collect_layers=[layer])
    tap = out.taps[layer].data
    keep = (~out.batch.is_target) & (~out.batch.is_register)
    return tap[:, keep, :].reshape(-1, cfg.D)


def cosine_analysis(cfg: ModelConfig, params: dict, samples,
                    layer: int | None = None, n_pairs: int = 10000,
                    bins: int = 50, seed: int = 0) -> dict:
    """Histograms and means of the three cosine groups over random ordered
    token pairs at one layer (default: the middle layer)."""
    if not cfg.decouple:
        raise ConfigError("cosine analysis needs the decoupled token halves")
    layer = max(1, cfg.L // 2) if layer is None else layer
    if not 1 <= layer <= cfg.L:
        raise ConfigError(f"layer {layer} outside [1, {cfg.L}]")
    pool = input_token_pool(cfg, params, samples, layer)
    pairs = sample_pairs(len(pool), n_pairs, seed)
    result = {"layer": layer, "n_pairs": int(len(pairs)), "bins": bins,
              "groups": {}}
    for name, vals in cosine_groups(pool, pairs).items():
        vals = np.clip(vals, -1.0, 1.0)
        counts, edges = np.histogram(vals, bins=bins, range=(-1.0, 1.0))
        result["groups"][name] = {"counts": counts, "edges": edges,
                                  "mean": float(vals.mean())}
    return result


def write_cosine_csv(result: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "bin_lo", "bin_hi", "count"])
        for name, g in result["groups"].items():
            for b, count in enumerate(g["counts"]):
                w.writerow([name, repr(float(g["edges"][b])),
                            repr(float(g["edges"][b + 1])), int(count)])
        for name, g in result["groups"].items():
            w.writerow([name, "mean", "", repr(g["mean"])])
    return path


# ---------------------------------------------------------------------------
# PCA feature images


def pca_rgb(X: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Project (N, d) features onto the top 3 principal components and
    min-max scale each channel to [0, 255]; zero-variation channels map to
    mid-gray."""
    gh, gw = grid
    if X.shape[0] != gh * gw:
        raise ValueError(f"{X.shape[0]} rows do not fill a {gh}x{gw} grid")
    _, _, proj = pca_top_k(X, 3)
    img = np.empty((gh * gw, 3))
    for c in range(3):
        col = proj[:, c]
        span = col.max() - col.min()
        img[:, c] = 128.0 if span < 1e-9 else (col - col.min()) / span * 255.0
    return np.clip(np.round(img), 0, 255).astype(np.uint8).reshape(gh, gw, 3)


def write_ppm(path, img: np.ndarray) -> Path:
    path = Path(path)
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8, got {img.dtype} {img.shape}")
    H, W = img.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{W} {H}\n255\n".encode())
            fh.write(img.tobytes())
    except OSError as e:
        raise OSError(f"failed writing image {path}: {e}") from e
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path}: not a binary P6 image")
    W, H = (int(x) for x in parts[1].split())
    img = np.frombuffer(parts[3], dtype=np.uint8, count=H * W * 3)
    return img.reshape(H, W, 3)


def export_features_pca(cfg: ModelConfig, params: dict, samples,
                        layers, out_dir) -> list[Path]:
    """One PPM per (layer, view, branch) at patch-grid resolution; branches
    are the semantic half (I), the spatial half (P), and the full token
    (cat) for decoupled models, cat only otherwise."""
    if len(samples) != 1:
        raise ValueError("feature export expects exactly one sample")
    layers = list(layers)
    out = model_forward(samples, cfg, params, collect_layers=layers)
    batch = out.batch
    half = cfg.D // 2
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    branches = ("I", "P", "cat") if cfg.decouple else ("cat",)
    written = []
    for layer in layers:
        tap = out.taps[layer].data[0]
        for v in range(batch.n_inputs + batch.n_targets):
            toks = tap[batch.view_id == v]
            for branch in branches:
                X = {"I": toks[:, :half], "P": toks[:, half:],
                     "cat": toks}[branch]
                path = out_dir / f"layer{layer}_view{v}_{branch}.ppm"
                write_ppm(path, pca_rgb(X, batch.grid))
                written.append(path)
    return written


# ---------------------------------------------------------------------------
# latency benchmark


def bench_latency(cfg: ModelConfig, params: dict, samples, warmup: int = 3,
                  measured: int = 10, timer=time.perf_counter,
                  forward=model_forward) -> dict:
    """Average per-sample forward wall time with supervision disabled.

    Taps are turned off for the timed config (training-only components are
    removed before timing) and the global teacher/proxy call counter must
    stay flat across the run, else the measurement is rejected.
    """
    if measured < 1:
        raise ValueError("need at least one measured iteration")
    cfg_inf = replace(cfg, k_I=None, k_P=None)
    before = losses.supervision_call_count()
    result = forward(samples, cfg_inf, params)  # untimed; fixes token count
    for _ in range(warmup):
        forward(samples, cfg_inf, params)
    times = []
    for _ in range(measured):
        t0 = timer()
        forward(samples, cfg_inf, params)
        times.append(timer() - t0)
    if losses.supervision_call_count() != before:
        raise RuntimeError("supervision module was evaluated during timing")
    times = np.asarray(times, dtype=np.float64)
    mean_t = float(times.mean())
    cv = float(times.std() / mean_t) if mean_t > 0 else 0.0
    n_tok = result.batch.T
    per_block = flop_count(cfg_inf, n_tok)
    return {
        "ms_per_sample": mean_t / len(samples) * 1e3,
        "times_ms": (times * 1e3).tolist(),
        "cv": cv,
        "noisy": cv >= 0.5,
        "tokens": n_tok,
        "flops_per_block": per_block,
        "flops_total": per_block["total"] * cfg.L,
        "params_total": param_count(cfg_inf)["total"],
        "warmup": warmup,
        "measured": measured,
        "batch": len(samples),
    }


def write_bench_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "params", "flops", "ms_per_sample"])
        for r in rows:
            w.writerow([r["variant"], r["params_total"], r["flops_total"],
                        repr(r["ms_per_sample"])])
    return path


def variant_name(cfg: ModelConfig) -> str:
    if not cfg.decouple:
        name = "entangled"
    else:
        name = "decoupled"
        if cfg.qk_mode == "independent":
            name += "+indep-qk"
        if cfg.ln_mode == "joint":
            name += "+joint-ln"
        if cfg.modulation:
            name += "+mod"
            if cfg.modulation_placement != "post-attn-ln-pre-ffn":
                name += f"[{cfg.modulation_placement}]"
            if cfg.modulation_direction != "both":
                name += f"[{cfg.modulation_direction}]"
    if cfg.n_registers:
        name += f"+reg{cfg.n_registers}"
    return name
