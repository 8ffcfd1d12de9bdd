"""Decoupled semantic/spatial transformer for feedforward view synthesis.

Tokens are D-wide; when decoupled, columns [0, D/2) carry the appearance
(I) branch and [D/2, D) the ray-geometry (P) branch, a partition that is
fixed across layers. Attention shares one softmax map per head across both
branches (query/key from the full token) while values and output
projections stay branch-local; an optional pair of per-layer generators
modulates each branch from the other (FiLM-style scale/shift). The
entangled baseline collapses all of this into a standard transformer block.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import CameraView, patchify, plucker_map
from .nvst_io import read_nvst, write_nvst
from .tensor import Tensor

__all__ = [
    "ConfigError", "ModelConfig", "TokenBatch", "ForwardResult",
    "param_shapes", "init_params", "layer_norm",
    "tokenize_decoupled", "tokenize_entangled", "tokenize_batch",
    "attention", "bidirectional_modulation", "block_forward", "model_forward",
    "param_count", "flop_count", "save_checkpoint", "load_checkpoint",
]

LN_EPS = 1e-6
INIT_STD = 0.02
PLACEMENTS = ("pre-attn-ln", "post-attn-ln-pre-ffn", "post-ffn")
DIRECTIONS = ("both", "p2i-only", "i2p-only")
QK_MODES = ("shared", "independent")
LN_MODES = ("branch", "joint")


class ConfigError(ValueError):
    """Configuration violates a structural constraint."""


@dataclass
class ModelConfig:
    D: int = 64
    n_heads: int = 4
    L: int = 4
    p: int = 4
    r: int = 4
    decouple: bool = True
    modulation: bool = True
    modulation_placement: str = "post-attn-ln-pre-ffn"
    modulation_direction: str = "both"
    qk_mode: str = "shared"
    ln_mode: str = "branch"
    n_registers: int = 0
    k_I: int | None = 2
    k_P: int | None = 3
    tokenizer_depth: int = 1
    no_target_to_target: bool = False

    def __post_init__(self):
        if self.D <= 0 or self.D % 2:
            raise ConfigError(f"D must be positive and even, got {self.D}")
        if self.D % self.n_heads or (self.D // 2) % self.n_heads:
            raise ConfigError(
                f"n_heads={self.n_heads} must divide both D={self.D} and D/2")
        if self.L < 1:
            raise ConfigError("need at least one layer")
        if self.p < 1:
            raise ConfigError("patch size must be positive")
        if self.r < 1:
            raise ConfigError("FFN ratio must be >= 1")
        for name, val in (("k_I", self.k_I), ("k_P", self.k_P)):
            if val is not None and not 1 <= val <= self.L:
                raise ConfigError(f"{name}={val} outside [1, {self.L}]")
        if self.modulation_placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.modulation_placement!r}")
        if self.modulation_direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {self.modulation_direction!r}")
        if self.qk_mode not in QK_MODES:
            raise ConfigError(f"unknown qk_mode {self.qk_mode!r}")
        if self.ln_mode not in LN_MODES:
            raise ConfigError(f"unknown ln_mode {self.ln_mode!r}")
        if self.modulation and not self.decouple:
            raise ConfigError("modulation requires the decoupled block")
        if self.qk_mode == "independent" and not self.decouple:
            raise ConfigError("independent q/k requires the decoupled block")
        if self.tokenizer_depth not in (1, 2):
            raise ConfigError("tokenizer_depth must be 1 or 2")
        if self.n_registers < 0:
            raise ConfigError("n_registers must be >= 0")

    @property
    def d_h(self) -> int:
        return self.D // self.n_heads


@dataclass
class TokenBatch:
    """Batched token stream plus the per-position segment map (shared across
    the batch: every sample has the same view/patch layout)."""

    tokens: Tensor  # (B, T, D)
    view_id: np.ndarray  # (T,), -1 for registers
    patch_id: np.ndarray  # (T,), -1 for registers
    is_target: np.ndarray  # (T,) bool
    is_register: np.ndarray  # (T,) bool
    n_inputs: int
    n_targets: int
    n_patches: int
    grid: tuple[int, int]
    patch_size: int

    @property
    def T(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ForwardResult:
    images: Tensor  # (B, n_targets, 3, H, W), sigmoid range
    patch_rows: Tensor  # (B, n_targets, N_p, 3p^2), same values re-laid-out
    taps: dict[int, Tensor]  # layer -> full stream (B, T, D) after that layer
    batch: TokenBatch


# ---------------------------------------------------------------------------
# parameters


def _tok_shapes(name: str, d_in: int, d_out: int, depth: int) -> dict:
    if depth == 1:
        return {f"{name}.W": (d_in, d_out), f"{name}.b": (d_out,)}
    return {f"{name}.W1": (d_in, d_out), f"{name}.b1": (d_out,),
            f"{name}.W2": (d_out, d_out), f"{name}.b2": (d_out,)}


def _ln_shapes(name: str, dim: int) -> dict:
    return {f"{name}.scale": (dim,), f"{name}.shift": (dim,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor's name and shape, in init order."""
    D, half, p = cfg.D, cfg.D // 2, cfg.p
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.decouple:
        shapes.update(_tok_shapes("tok_I", 3 * p * p, half, cfg.tokenizer_depth))
        shapes.update(_tok_shapes("tok_P", 6 * p * p, half, cfg.tokenizer_depth))
        shapes.update(_tok_shapes("tok_P_tgt", 6 * p * p, half, cfg.tokenizer_depth))
    else:
        shapes.update(_tok_shapes("tok_in", 9 * p * p, D, cfg.tokenizer_depth))
        shapes.update(_tok_shapes("tok_tgt", 6 * p * p, D, cfg.tokenizer_depth))
    if cfg.n_registers:
        shapes["registers"] = (cfg.n_registers, D)
    for i in range(cfg.L):
        pre = f"layers.{i}."
        branch_ln = cfg.decouple and cfg.ln_mode == "branch"
        for which in ("ln1", "ln2"):
            if branch_ln:
                shapes.update(_ln_shapes(f"{pre}{which}_I", half))
                shapes.update(_ln_shapes(f"{pre}{which}_P", half))
            else:
                shapes.update(_ln_shapes(f"{pre}{which}", D))
        if not cfg.decouple:
            for nm in ("q", "k", "v", "o"):
                shapes[f"{pre}attn_{nm}.W"] = (D, D)
                shapes[f"{pre}attn_{nm}.b"] = (D,)
        else:
            if cfg.qk_mode == "shared":
                for nm in ("q", "k"):
                    shapes[f"{pre}attn_{nm}.W"] = (D, D)
                    shapes[f"{pre}attn_{nm}.b"] = (D,)
            else:
                for nm in ("q_I", "q_P", "k_I", "k_P"):
                    shapes[f"{pre}attn_{nm}.W"] = (half, half)
                    shapes[f"{pre}attn_{nm}.b"] = (half,)
            for nm in ("v_I", "v_P", "o_I", "o_P"):
                shapes[f"{pre}attn_{nm}.W"] = (half, half)
                shapes[f"{pre}attn_{nm}.b"] = (half,)
        if cfg.modulation:
            shapes[f"{pre}mod_P.W"] = (half, D)
            shapes[f"{pre}mod_P.b"] = (D,)
            shapes[f"{pre}mod_I.W"] = (half, D)
            shapes[f"{pre}mod_I.b"] = (D,)
        if cfg.decouple:
            hidden = cfg.r * half
            for br in ("I", "P"):
                shapes[f"{pre}ffn_{br}.W1"] = (half, hidden)
                shapes[f"{pre}ffn_{br}.b1"] = (hidden,)
                shapes[f"{pre}ffn_{br}.W2"] = (hidden, half)
                shapes[f"{pre}ffn_{br}.b2"] = (half,)
        else:
            shapes[f"{pre}ffn.W1"] = (D, cfg.r * D)
            shapes[f"{pre}ffn.b1"] = (cfg.r * D,)
            shapes[f"{pre}ffn.W2"] = (cfg.r * D, D)
            shapes[f"{pre}ffn.b2"] = (D,)
    shapes.update(_ln_shapes("final_ln", D))
    shapes["head.W"] = (D, 3 * p * p)
    shapes["head.b"] = (3 * p * p,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters. Weight matrices draw normal(0, 0.02) from one seeded
    stream; LN scales are 1; modulation generators are zero weights with a
    ones/zeros bias so they start as an exact identity; registers start at
    zero. Constant-initialized tensors draw nothing, so configs differing
    only in modulation/registers share the other weights bit-for-bit.
    """
    rng = np.random.default_rng(seed)
    half = cfg.D // 2
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "registers":
            data = np.zeros(shape)
        elif ".mod_" in name:
            if leaf == "W":
                data = np.zeros(shape)
            else:  # bias: scale half 1 (identity gain), shift half 0
                data = np.concatenate([np.ones(half), np.zeros(half)])
        elif leaf == "scale":
            data = np.ones(shape)
        elif leaf in ("shift", "b", "b1", "b2"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _linear(x: Tensor, params, name: str) -> Tensor:
    return x @ params[f"{name}.W"] + params[f"{name}.b"]


def _tok_apply(x: Tensor, params, name: str, depth: int) -> Tensor:
    if depth == 1:
        return _linear(x, params, name)
    h = T.gelu(x @ params[f"{name}.W1"] + params[f"{name}.b1"])
    return h @ params[f"{name}.W2"] + params[f"{name}.b2"]


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Normalize over the last axis with population statistics."""
    mu = T.mean(x, axis=-1, keepdims=True)
    v = T.var(x, axis=-1, keepdims=True)
    return (x - mu) / T.sqrt(v + LN_EPS) * scale + shift


# ---------------------------------------------------------------------------
# tokenization


def _rgb_patch_rows(view: CameraView, p: int) -> np.ndarray:
    return patchify(np.moveaxis(view.image, 2, 0), p)


def _ray_patch_rows(E: np.ndarray, K: np.ndarray, H: int, W: int, p: int) -> np.ndarray:
    return patchify(plucker_map(E, K, H, W), p)


def _check_sample_shapes(samples):
    H, W = samples[0][0][0].resolution
    n_in = len(samples[0][0])
    n_tgt = len(samples[0][1])
    for views, targets in samples:
        if len(views) != n_in or len(targets) != n_tgt:
            raise ValueError("all samples must share the same view counts")
        for v in views:
            if v.resolution != (H, W):
                raise ValueError(
                    f"mismatched resolutions across views: {v.resolution} vs {(H, W)}")
    if n_tgt == 0:
        raise ValueError("need at least one target view")
    return H, W, n_in, n_tgt


def tokenize_batch(samples: Sequence[tuple], cfg: ModelConfig, params) -> TokenBatch:
    """Tokenize a batch of samples; each sample is (views, target_poses)
    with target poses given as (E, K) pairs. Token order per sample: input
    views (patch raster order), then target views, then registers.
    """
    H, W, n_in, n_tgt = _check_sample_shapes(samples)
    p = cfg.p
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide {H}x{W}")
    gh, gw = H // p, W // p
    n_p = gh * gw
    B = len(samples)

    rgb = np.stack([np.concatenate([_rgb_patch_rows(v, p) for v in views])
                    for views, _ in samples])  # (B, n_in*n_p, 3p^2)
    ray_in = np.stack([np.concatenate([_ray_patch_rows(v.extrinsic, v.intrinsic, H, W, p)
                                       for v in views])
                       for views, _ in samples])
    ray_tgt = np.stack([np.concatenate([_ray_patch_rows(E, K, H, W, p)
                                        for E, K in targets])
                        for _, targets in samples])

    depth = cfg.tokenizer_depth
    if cfg.decouple:
        tok_in_I = _tok_apply(Tensor(rgb), params, "tok_I", depth)
        tok_in_P = _tok_apply(Tensor(ray_in), params, "tok_P", depth)
        inputs = T.concat([tok_in_I, tok_in_P], axis=2)
        tok_tgt_P = _tok_apply(Tensor(ray_tgt), params, "tok_P_tgt", depth)
        zeros_I = Tensor(np.zeros((B, n_tgt * n_p, cfg.D // 2)))
        targets_tok = T.concat([zeros_I, tok_tgt_P], axis=2)
    else:
        joint = np.concatenate([rgb, ray_in], axis=2)  # (B, n, 9p^2)
        inputs = _tok_apply(Tensor(joint), params, "tok_in", depth)
        targets_tok = _tok_apply(Tensor(ray_tgt), params, "tok_tgt", depth)

    pieces = [inputs, targets_tok]
    if cfg.n_registers:
        pieces.append(T.expand0(params["registers"], B))
    tokens = T.concat(pieces, axis=1)

    n_reg = cfg.n_registers
    view_id = np.concatenate([
        np.repeat(np.arange(n_in), n_p),
        np.repeat(np.arange(n_in, n_in + n_tgt), n_p),
        -np.ones(n_reg, dtype=np.int64)])
    patch_id = np.concatenate([
        np.tile(np.arange(n_p), n_in + n_tgt),
        -np.ones(n_reg, dtype=np.int64)])
    is_target = np.concatenate([
        np.zeros(n_in * n_p, bool), np.ones(n_tgt * n_p, bool), np.zeros(n_reg, bool)])
    is_register = np.concatenate([np.zeros((n_in + n_tgt) * n_p, bool), np.ones(n_reg, bool)])
    return TokenBatch(tokens=tokens, view_id=view_id, patch_id=patch_id,
                      is_target=is_target, is_register=is_register,
                      n_inputs=n_in, n_targets=n_tgt, n_patches=n_p,
                      grid=(gh, gw), patch_size=p)


def tokenize_decoupled(views, targets, cfg: ModelConfig, params) -> TokenBatch:
    if not cfg.decouple:
        raise ConfigError("config is not decoupled")
    return tokenize_batch([(views, targets)], cfg, params)


def tokenize_entangled(views, targets, cfg: ModelConfig, params) -> TokenBatch:
    if cfg.decouple:
        raise ConfigError("config is decoupled")
    return tokenize_batch([(views, targets)], cfg, params)


# ---------------------------------------------------------------------------
# attention


def _split_heads(x: Tensor, B: int, n_tok: int, h: int) -> Tensor:
    """(B, T, h*w) -> (B*h, T, w)"""
    w = x.shape[2] // h
    return T.reshape(T.transpose(T.reshape(x, (B, n_tok, h, w)), (0, 2, 1, 3)),
                     (B * h, n_tok, w))


def _merge_heads(x: Tensor, B: int, n_tok: int, h: int) -> Tensor:
    """(B*h, T, w) -> (B, T, h*w)"""
    w = x.shape[2]
    return T.reshape(T.transpose(T.reshape(x, (B, h, n_tok, w)), (0, 2, 1, 3)),
                     (B, n_tok, h * w))


def _attn_scores(q: Tensor, k: Tensor, scale: float, mask: np.ndarray | None) -> Tensor:
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / scale)
    if mask is not None:
        scores = scores + Tensor(mask)
    return T.softmax(scores)


def _target_mask(batch: TokenBatch) -> np.ndarray | None:
    tgt = batch.is_target
    mask = np.where(np.outer(tgt, tgt), -1e30, 0.0)
    return mask


def attention(x_ln: Tensor, params, prefix: str, cfg: ModelConfig,
              batch: TokenBatch) -> Tensor:
    """Attention delta for pre-normalized tokens (B, T, D); caller adds the
    residual. One softmax map per head is shared by both value branches in
    the default mode."""
    B, n_tok, _ = x_ln.shape
    h, half = cfg.n_heads, cfg.D // 2
    mask = _target_mask(batch) if cfg.no_target_to_target else None

    if not cfg.decouple:
        q = _split_heads(_linear(x_ln, params, prefix + "attn_q"), B, n_tok, h)
        k = _split_heads(_linear(x_ln, params, prefix + "attn_k"), B, n_tok, h)
        v = _split_heads(_linear(x_ln, params, prefix + "attn_v"), B, n_tok, h)
        A = _attn_scores(q, k, np.sqrt(cfg.d_h), mask)
        out = _merge_heads(T.matmul(A, v), B, n_tok, h)
        return _linear(out, params, prefix + "attn_o")

    x_I, x_P = T.split(x_ln, [half, half], axis=2)
    v_I = _split_heads(_linear(x_I, params, prefix + "attn_v_I"), B, n_tok, h)
    v_P = _split_heads(_linear(x_P, params, prefix + "attn_v_P"), B, n_tok, h)

    if cfg.qk_mode == "shared":
        q = _split_heads(_linear(x_ln, params, prefix + "attn_q"), B, n_tok, h)
        k = _split_heads(_linear(x_ln, params, prefix + "attn_k"), B, n_tok, h)
        A = _attn_scores(q, k, np.sqrt(cfg.d_h), mask)
        agg_I = T.matmul(A, v_I)
        agg_P = T.matmul(A, v_P)
    else:  # branch-local routing, per-head dim d_h/2 per branch
        scale = np.sqrt(cfg.d_h / 2)
        q_I = _split_heads(_linear(x_I, params, prefix + "attn_q_I"), B, n_tok, h)
        k_I = _split_heads(_linear(x_I, params, prefix + "attn_k_I"), B, n_tok, h)
        q_P = _split_heads(_linear(x_P, params, prefix + "attn_q_P"), B, n_tok, h)
        k_P = _split_heads(_linear(x_P, params, prefix + "attn_k_P"), B, n_tok, h)
        agg_I = T.matmul(_attn_scores(q_I, k_I, scale, mask), v_I)
        agg_P = T.matmul(_attn_scores(q_P, k_P, scale, mask), v_P)

    out_I = _linear(_merge_heads(agg_I, B, n_tok, h), params, prefix + "attn_o_I")
    out_P = _linear(_merge_heads(agg_P, B, n_tok, h), params, prefix + "attn_o_P")
    return T.concat([out_I, out_P], axis=2)


def bidirectional_modulation(m_I: Tensor, m_P: Tensor, params, prefix: str,
                             direction: str = "both") -> tuple[Tensor, Tensor]:
    """P modulates I first, then the (possibly modulated) I modulates P.
    Each generator emits (gain, shift) halves; a disabled leg passes its
    branch through untouched."""
    half = m_I.shape[-1]
    if direction in ("both", "p2i-only"):
        gb = _linear(m_P, params, prefix + "mod_P")
        gain, shift = T.split(gb, [half, half], axis=-1)
        m_I_out = gain * m_I + shift
    else:
        m_I_out = m_I
    if direction in ("both", "i2p-only"):
        gb = _linear(m_I_out, params, prefix + "mod_I")
        gain, shift = T.split(gb, [half, half], axis=-1)
        m_P_out = gain * m_P + shift
    else:
        m_P_out = m_P
    return m_I_out, m_P_out


def _apply_ln(x: Tensor, params, prefix: str, which: str, cfg: ModelConfig) -> Tensor:
    if cfg.decouple and cfg.ln_mode == "branch":
        half = cfg.D // 2
        x_I, x_P = T.split(x, [half, half], axis=2)
        return T.concat([
            layer_norm(x_I, params[f"{prefix}{which}_I.scale"], params[f"{prefix}{which}_I.shift"]),
            layer_norm(x_P, params[f"{prefix}{which}_P.scale"], params[f"{prefix}{which}_P.shift"]),
        ], axis=2)
    return layer_norm(x, params[f"{prefix}{which}.scale"], params[f"{prefix}{which}.shift"])


def _modulate_stream(x: Tensor, params, prefix: str, cfg: ModelConfig) -> Tensor:
    half = cfg.D // 2
    m_I, m_P = T.split(x, [half, half], axis=2)
    m_I, m_P = bidirectional_modulation(m_I, m_P, params, prefix,
                                        cfg.modulation_direction)
    return T.concat([m_I, m_P], axis=2)


def _ffn(x: Tensor, params, name: str) -> Tensor:
    return T.gelu(x @ params[f"{name}.W1"] + params[f"{name}.b1"]) \
        @ params[f"{name}.W2"] + params[f"{name}.b2"]


def block_forward(x: Tensor, params, prefix: str, cfg: ModelConfig,
                  batch: TokenBatch) -> Tensor:
    """One transformer block on the full stream (B, T, D)."""
    if cfg.modulation and cfg.modulation_placement == "pre-attn-ln":
        x = _modulate_stream(x, params, prefix, cfg)
    h = x + attention(_apply_ln(x, params, prefix, "ln1", cfg),
                      params, prefix, cfg, batch)
    h2 = _apply_ln(h, params, prefix, "ln2", cfg)
    if cfg.modulation and cfg.modulation_placement == "post-attn-ln-pre-ffn":
        h2 = _modulate_stream(h2, params, prefix, cfg)
    if cfg.decouple:
        half = cfg.D // 2
        h2_I, h2_P = T.split(h2, [half, half], axis=2)
        f = T.concat([_ffn(h2_I, params, prefix + "ffn_I"),
                      _ffn(h2_P, params, prefix + "ffn_P")], axis=2)
    else:
        f = _ffn(h2, params, prefix + "ffn")
    out = h + f
    if cfg.modulation and cfg.modulation_placement == "post-ffn":
        out = _modulate_stream(out, params, prefix, cfg)
    return out


def model_forward(samples: Sequence[tuple], cfg: ModelConfig, params,
                  collect_layers: Sequence[int] = ()) -> ForwardResult:
    """Full forward pass for a batch of (views, target_poses) samples.

    Returns sigmoid-range renders for every target view plus the full token
    stream after each tap layer (k_I, k_P, and any in collect_layers).
    """
    batch = tokenize_batch(samples, cfg, params)
    wanted = {k for k in (cfg.k_I, cfg.k_P) if k is not None}
    wanted.update(collect_layers)
    bad = [k for k in wanted if not 1 <= k <= cfg.L]
    if bad:
        raise ConfigError(f"tap layers {bad} outside [1, {cfg.L}]")
    taps: dict[int, Tensor] = {}
    x = batch.tokens
    for i in range(cfg.L):
        x = block_forward(x, params, f"layers.{i}.", cfg, batch)
        if i + 1 in wanted:
            taps[i + 1] = x

    B = x.shape[0]
    n_tgt, n_p = batch.n_targets, batch.n_patches
    tgt_rows = np.nonzero(batch.is_target)[0]
    # target rows are contiguous: slice them off ahead of the head
    x_flat = T.reshape(x, (B * batch.T, cfg.D))
    row_idx = (np.arange(B)[:, None] * batch.T + tgt_rows[None, :]).reshape(-1)
    y = T.gather_rows(x_flat, row_idx)  # (B*n_tgt*n_p, D)
    y = layer_norm(y, params["final_ln.scale"], params["final_ln.shift"])
    rows = T.sigmoid(y @ params["head.W"] + params["head.b"])
    p, (gh, gw) = batch.patch_size, batch.grid
    patch_rows = T.reshape(rows, (B, n_tgt, n_p, 3 * p * p))
    images = T.reshape(
        T.transpose(T.reshape(rows, (B, n_tgt, gh, gw, 3, p, p)),
                    (0, 1, 4, 2, 5, 3, 6)),
        (B, n_tgt, 3, gh * p, gw * p))
    return ForwardResult(images=images, patch_rows=patch_rows, taps=taps,
                         batch=batch)


# ---------------------------------------------------------------------------
# accounting


def param_count(cfg: ModelConfig) -> dict:
    """Exact parameter counts by enumeration, split into per-block matrix
    (2-D) and vector (1-D) terms, with the closed-form matrix expectation
    for the active variant."""
    shapes = param_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    block0 = {n: s for n, s in shapes.items() if n.startswith("layers.0.")}
    block_matrix = sum(int(np.prod(s)) for n, s in block0.items() if len(s) == 2)
    block_vector = sum(int(np.prod(s)) for n, s in block0.items() if len(s) == 1)
    D, r = cfg.D, cfg.r
    if not cfg.decouple:
        matrix_form = (2 * r + 4) * D * D
    elif cfg.qk_mode == "shared":
        matrix_form = (r + 3) * D * D
    else:
        matrix_form = (r + 2) * D * D
    mod_form = D * D + 2 * D if cfg.modulation else 0
    if cfg.modulation:
        matrix_form += D * D  # two D/2 -> D generators
    ln_params_per_block = 4 * (D // 2) * 2 if (cfg.decouple and cfg.ln_mode == "branch") else 2 * D * 2
    return {
        "total": total,
        "per_block_matrix": block_matrix,
        "per_block_vector": block_vector,
        "per_block_total": block_matrix + block_vector,
        "matrix_form": matrix_form,
        "modulation_form": mod_form,
        "ln_per_block": ln_params_per_block,
        "blocks": cfg.L,
        "itemized": {n: int(np.prod(s)) for n, s in shapes.items()},
    }


def flop_count(cfg: ModelConfig, token_count: int) -> dict:
    """Per-block matmul multiply-adds at the given stream length."""
    D, r, t = cfg.D, cfg.r, token_count
    half = D // 2
    if not cfg.decouple:
        proj_qkv = 3 * t * D * D
        proj_out = t * D * D
        ffn = 2 * r * t * D * D
    else:
        if cfg.qk_mode == "shared":
            proj_qk = 2 * t * D * D
        else:
            proj_qk = 4 * t * half * half
        proj_v = 2 * t * half * half
        proj_qkv = proj_qk + proj_v
        proj_out = 2 * t * half * half
        ffn = 2 * (2 * t * half * (r * half))
    attn_scores = t * t * D  # n_heads * t^2 * d_h, both modes
    attn_apply = t * t * D
    modulation = 2 * t * half * D if cfg.modulation else 0
    total = proj_qkv + proj_out + ffn + attn_scores + attn_apply + modulation
    return {"proj_qkv": proj_qkv, "proj_out": proj_out, "ffn": ffn,
            "attn_scores": attn_scores, "attn_apply": attn_apply,
            "modulation": modulation, "total": total}


# ---------------------------------------------------------------------------
# checkpoints


def config_to_pairs(cfg: ModelConfig) -> dict[str, str]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = "none" if v is None else str(v)
    return out


def config_from_pairs(pairs: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in pairs:
            continue
        raw = pairs[f.name]
        if raw == "none":
            kwargs[f.name] = None
        elif f.type in ("int", "int | None"):
            kwargs[f.name] = int(raw)
        elif f.type == "bool":
            kwargs[f.name] = raw in ("True", "true", "1")
        else:
            kwargs[f.name] = raw
    unknown = set(pairs) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**kwargs)


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in config_to_pairs(cfg).items()]
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    for name, tensor in params.items():
        write_nvst(path / f"{name}.nvst", tensor.data)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    path = Path(path)
    pairs = {}
    for raw in (path / "manifest.txt").read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            pairs[k.strip()] = v.strip()
    cfg = config_from_pairs(pairs)
    params = {}
    for name, shape in param_shapes(cfg).items():
        f = path / f"{name}.nvst"
        if not f.exists():
            raise ValueError(f"checkpoint missing parameter {name}")
        data = read_nvst(f)
        if data.shape != shape:
            raise ValueError(
                f"checkpoint parameter {name} has shape {data.shape}, config requires {shape}")
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    return cfg, params
