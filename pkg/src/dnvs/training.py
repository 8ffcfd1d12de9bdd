"""AdamW optimizer, the deterministic training loop, and held-out
evaluation.

Determinism contract: every batch is drawn from `default_rng([seed, step])`
and all reductions are single-threaded numpy, so a (config, seed) pair
fixes the loss trajectory bit-for-bit. The last `holdout_frac` of each
scene's views are never sampled for training and form the eval split.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, config_digest, echo_config, loss_weights, model_config
from .geometry import build_correspondences
from .losses import (
    FrozenPatchTeacher,
    FrozenPerceptualProxy,
    geo_loss,
    init_projector,
    irepa_loss,
    rgb_loss,
    total_loss,
)
from .metrics import EvalReport, psnr, ssim
from .model import ConfigError, ModelConfig, init_params, model_forward, save_checkpoint
from .nvst_io import write_nvst
from .scenes import Dataset, load_dataset
from .tensor import NonFiniteError, Tensor

__all__ = [
    "OptimState", "init_optim", "adamw_step", "effective_lr",
    "view_split", "sample_batch", "compute_losses",
    "train", "evaluate", "TrainResult",
]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 5e-2
    warmup: int = 100
    clip_norm: float = 1.0
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def init_optim(params: dict[str, Tensor], **hyper) -> OptimState:
    state = OptimState(**hyper)
    for name, t in params.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def effective_lr(state: OptimState, step: int | None = None) -> float:
    """Linear warm-up to the constant base rate."""
    t = state.step if step is None else step
    if state.warmup <= 0:
        return state.lr
    return state.lr * min(1.0, t / state.warmup)


def adamw_step(params: dict[str, Tensor], state: OptimState) -> dict:
    """One decoupled-weight-decay Adam update over every parameter that
    carries a gradient. Global-norm clipping is applied to the raw
    gradients before they enter the moment buffers. Aborts (mutating
    nothing) on any non-finite gradient, naming the parameter.
    """
    grads = {}
    sq = 0.0
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name!r} {tensor.data.shape}")
        if state.m[name].shape != tensor.data.shape:
            raise ValueError(f"moment shape mismatch for {name!r}")
        grads[name] = g
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    scale = state.clip_norm / norm if norm > state.clip_norm else 1.0
    state.step += 1
    t = state.step
    lr_t = effective_lr(state)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        g = g * scale
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        params[name].data -= lr_t * (upd + state.weight_decay * params[name].data)
    return {"lr": lr_t, "grad_norm": norm, "clipped": scale != 1.0,
            "n_params": len(grads)}


# ---------------------------------------------------------------------------
# batching


def view_split(n_views: int, holdout_frac: float = 0.2) -> tuple[list[int], list[int]]:
    """Train/eval view indices; the last ceil-rounded fraction is held out."""
    n_eval = max(1, int(round(n_views * holdout_frac)))
    if n_eval >= n_views:
        raise ValueError(f"holdout {n_eval} swallows all {n_views} views")
    return list(range(n_views - n_eval)), list(range(n_views - n_eval, n_views))


def sample_batch(dataset: Dataset, rcfg: RunConfig, step: int) -> list[tuple[int, list[int]]]:
    """Batch picks for one step: (scene, view ids) with inputs first.
    Keyed by (seed, step) so the trajectory is reproducible."""
    rng = np.random.default_rng([rcfg.seed, step])
    train_ids, _ = view_split(dataset.n_views, rcfg.holdout_frac)
    need = rcfg.n_inputs + rcfg.n_targets
    if need > len(train_ids):
        raise ValueError(f"need {need} distinct views per sample but only "
                         f"{len(train_ids)} train views exist")
    picks = []
    for _ in range(rcfg.batch_size):
        s = int(rng.integers(len(dataset.scenes)))
        vids = rng.choice(len(train_ids), size=need, replace=False)
        picks.append((s, [train_ids[int(v)] for v in vids]))
    return picks


def _corr_for(dataset: Dataset, pick, rcfg: RunConfig, p: int, cache: dict):
    key = (pick[0], tuple(pick[1]))
    if key not in cache:
        s, vids = pick
        views = [dataset.scenes[s][v] for v in vids]
        tgt_idx = list(range(rcfg.n_inputs, len(vids)))
        cache[key] = build_correspondences(views, tgt_idx, p,
                                           depth_tol=rcfg.depth_tol,
                                           threshold=rcfg.corr_threshold)
    return cache[key]


def _mean_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def compute_losses(rcfg: RunConfig, mcfg: ModelConfig, dataset: Dataset,
                   params: dict, proj, teacher, proxy,
                   picks, corr_cache: dict | None = None) -> tuple[Tensor, dict]:
    """Forward the batch and assemble the weighted objective.

    Returns (loss, report); the report carries the unweighted terms as
    plain floats plus correspondence bookkeeping.
    """
    if corr_cache is None:
        corr_cache = {}
    lw = loss_weights(rcfg)
    n_in, n_tgt = rcfg.n_inputs, rcfg.n_targets
    samples = []
    gt = []
    for s, vids in picks:
        views = [dataset.scenes[s][v] for v in vids]
        ins, tgts = views[:n_in], views[n_in:]
        samples.append((ins, [(v.extrinsic, v.intrinsic) for v in tgts]))
        gt.append([np.moveaxis(v.image, 2, 0) for v in tgts])
    out = model_forward(samples, mcfg, params)
    l_rgb = rgb_loss(out.images, np.asarray(gt), proxy, lw.lam_vgg, mcfg.p)

    B, n_tok = len(picks), out.batch.T
    n_p = out.batch.n_patches
    half = mcfg.D // 2
    l_irepa = None
    if lw.lam_I > 0:
        tap = T.reshape(out.taps[mcfg.k_I], (B * n_tok, mcfg.D))
        terms = []
        for b, (s, vids) in enumerate(picks):
            for vi in range(n_in):
                idx = b * n_tok + vi * n_p + np.arange(n_p)
                stud = T.gather_rows(tap, idx)
                if mcfg.decouple:
                    stud = T.split(stud, [half, half], axis=1)[0]
                view = dataset.scenes[s][vids[vi]]
                terms.append(irepa_loss(stud, view.image, teacher, proj,
                                        out.batch.grid, key=(s, vids[vi])))
        l_irepa = _mean_terms(terms)

    l_geo = None
    valid_targets = matches = 0
    if lw.lam_P > 0:
        tap = T.reshape(out.taps[mcfg.k_P], (B * n_tok, mcfg.D))
        V = n_in + n_tgt
        terms = []
        for b, pick in enumerate(picks):
            idx = b * n_tok + np.arange(V * n_p)
            feats = T.reshape(T.gather_rows(tap, idx), (V, n_p, mcfg.D))
            feats_p = T.split(feats, [half, half], axis=2)[1]
            corr = _corr_for(dataset, pick, rcfg, mcfg.p, corr_cache)
            term, info = geo_loss(feats_p, corr)
            if info["valid_targets"]:
                terms.append(term)
                valid_targets += info["valid_targets"]
                matches += info["matches"]
        if terms:
            l_geo = _mean_terms(terms)

    loss, report = total_loss(l_rgb, l_irepa, l_geo, lw)
    report["valid_targets"] = valid_targets
    report["matches"] = matches
    return loss, report


# ---------------------------------------------------------------------------
# evaluation


def _eval_input_ids(train_ids: list[int], n_inputs: int) -> list[int]:
    # spread the conditioning views across the train portion of the orbit
    pos = np.linspace(0, len(train_ids) - 1, n_inputs).round().astype(int)
    return [train_ids[i] for i in dict.fromkeys(pos.tolist())]


def evaluate(mcfg: ModelConfig, params: dict, dataset: Dataset,
             n_inputs: int, holdout_frac: float = 0.2, step: int = 0,
             seed: int = 0, digest: str = "") -> EvalReport:
    """Render every held-out view of every scene from a fixed spread of
    train views and score PSNR/SSIM against ground truth."""
    train_ids, eval_ids = view_split(dataset.n_views, holdout_frac)
    in_ids = _eval_input_ids(train_ids, n_inputs)
    rows = []
    for s, views in enumerate(dataset.scenes):
        ins = [views[i] for i in in_ids]
        tgts = [views[j] for j in eval_ids]
        out = model_forward([(ins, [(v.extrinsic, v.intrinsic) for v in tgts])],
                            mcfg, params)
        imgs = out.images.data[0]
        for t_i, j in enumerate(eval_ids):
            ref = np.moveaxis(views[j].image, 2, 0)
            rows.append((s, j, psnr(imgs[t_i], ref), ssim(imgs[t_i], ref)))
    return EvalReport.from_rows(rows, step=step, seed=seed, config_digest=digest)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    params: dict
    proj: dict | None
    state: OptimState
    loss_rows: list
    reports: list
    out_dir: Path
    wall_s: float

    @property
    def final_report(self) -> EvalReport:
        return self.reports[-1]


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "l_rgb", "l_irepa", "l_geo", "total", "lr"])
        w.writerows([(s, repr(a), repr(b), repr(c), repr(d), repr(e))
                     for s, a, b, c, d, e in rows])


def write_eval_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "view", "psnr", "ssim"])
        for rep in reports:
            for scene, view, p, s in rep.rows:
                w.writerow([rep.step, f"{scene}:{view}", repr(p), repr(s)])


def _save_ckpt(path, mcfg, params, proj) -> None:
    save_checkpoint(path, mcfg, params)
    if proj is not None:
        for name, t in proj.items():
            write_nvst(Path(path) / f"{name}.nvst", t.data)


def train(rcfg: RunConfig, out_dir=None, log=None) -> TrainResult:
    """Full deterministic run: optimize, log losses, eval on held-out
    views, checkpoint. Writes config.txt, loss.csv, eval.csv and
    ckpt_final/ under the output directory."""
    mcfg = model_config(rcfg)  # validates before any compute
    data_root = Path(rcfg.data_dir)
    if not data_root.exists():
        raise FileNotFoundError(f"dataset directory not found: {data_root}")
    dataset = load_dataset(data_root)
    if dataset.patch_size != mcfg.p:
        raise ConfigError(f"dataset patch size {dataset.patch_size} != model "
                          f"patch size {mcfg.p}")
    out = Path(out_dir if out_dir is not None else rcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(rcfg, out)
    digest = config_digest(rcfg)

    lw = loss_weights(rcfg)
    params = init_params(mcfg, seed=rcfg.seed)
    trainable = dict(params)
    teacher = proxy = proj = None
    if lw.lam_I > 0:
        teacher = FrozenPatchTeacher(mcfg.p, rcfg.teacher_dim, seed=0)
        proj = init_projector(mcfg.D // 2 if mcfg.decouple else mcfg.D,
                              rcfg.teacher_dim, seed=rcfg.seed)
        trainable.update(proj)
    if lw.lam_vgg > 0:
        proxy = FrozenPerceptualProxy(mcfg.p, rcfg.teacher_dim, seed=1)
    state = init_optim(trainable, lr=rcfg.lr, beta1=rcfg.beta1, beta2=rcfg.beta2,
                       weight_decay=rcfg.weight_decay, warmup=rcfg.warmup,
                       clip_norm=rcfg.clip_norm, eps=rcfg.adam_eps)

    corr_cache: dict = {}
    loss_rows = []
    reports = []
    t0 = time.perf_counter()
    for step in range(rcfg.steps):
        picks = sample_batch(dataset, rcfg, step)
        with T.Tape(check_finite=True) as tape:
            loss, rep = compute_losses(rcfg, mcfg, dataset, params, proj,
                                       teacher, proxy, picks, corr_cache)
            tape.backward(loss)
        step_rep = adamw_step(trainable, state)
        T.zero_grad(trainable)
        loss_rows.append((step, rep["rgb"], rep["irepa"], rep["geo"],
                          rep["total"], step_rep["lr"]))
        done = step + 1
        if log is not None and (done % 100 == 0 or step == 0):
            log(f"step {done}/{rcfg.steps} total {rep['total']:.5f} "
                f"rgb {rep['rgb']:.5f}")
        if rcfg.eval_every and done % rcfg.eval_every == 0 and done < rcfg.steps:
            reports.append(evaluate(mcfg, params, dataset, rcfg.n_inputs,
                                    rcfg.holdout_frac, step=done,
                                    seed=rcfg.seed, digest=digest))
        if rcfg.ckpt_every and done % rcfg.ckpt_every == 0 and done < rcfg.steps:
            _save_ckpt(out / f"ckpt_{done:06d}", mcfg, params, proj)

    reports.append(evaluate(mcfg, params, dataset, rcfg.n_inputs,
                            rcfg.holdout_frac, step=rcfg.steps,
                            seed=rcfg.seed, digest=digest))
    _save_ckpt(out / "ckpt_final", mcfg, params, proj)
    write_loss_csv(out / "loss.csv", loss_rows)
    write_eval_csv(out / "eval.csv", reports)
    wall = time.perf_counter() - t0
    if log is not None:
        rep = reports[-1]
        log(f"done in {wall:.1f}s; held-out psnr {rep.mean_psnr:.2f} "
            f"ssim {rep.mean_ssim:.3f}")
    return TrainResult(params=params, proj=proj, state=state,
                       loss_rows=loss_rows, reports=reports, out_dir=out,
                       wall_s=wall)
