"""Command-line entry point: dataset generation, training, evaluation,
parameter auditing, benchmarking, analyses, and the ablation matrix.

All flags are long-form `--key=value` over the flat run-config namespace;
`--config=FILE` loads a `key = value` file first and explicit flags win.
Exit codes: 0 success, 2 usage or config error, 3 numerical failure.
"""

from __future__ import annotations

import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (
    bench_latency,
    cosine_analysis,
    export_features_pca,
    variant_name,
    write_bench_csv,
    write_cosine_csv,
)
from .config import (
    RunConfig,
    config_digest,
    echo_config,
    model_config,
    parse_config,
    parse_overrides,
)
from .geometry import CameraView
from .model import (
    ConfigError,
    ModelConfig,
    flop_count,
    init_params,
    load_checkpoint,
    param_count,
)
from .nvst_io import NvstFormatError
from .scenes import easy_scene, load_dataset, random_scene, render_scene, write_dataset
from .tensor import NonFiniteError
from .training import evaluate, train, write_eval_csv

USAGE = """\
usage: dnvs <subcommand> [--key=value ...]

subcommands:
  gen-data         render synthetic scenes into --data_dir
  train            optimize a model on --data_dir, artifacts in --out_dir
  eval             score a checkpoint (--ckpt, default OUT/ckpt_final)
  params           parameter-count table for the block variants
  bench            forward latency + FLOP report (supervision disabled)
  analyze-cosine   cosine-similarity histograms between token halves
  export-features  PCA feature images (PPM) per layer/view/branch
  ablate           run the variant matrix and emit one comparison table

common flags: --config=FILE, --seed=N, --data_dir=DIR, --out_dir=DIR,
model keys (--D, --L, --n_heads, --p, --r, --decouple, --modulation,
--placement, --direction, --qk_mode, --ln_mode, --n_registers, --k_I,
--k_P), loss weights (--lam_vgg, --lam_I, --lam_P), optimizer keys
(--lr, --warmup, --steps, --batch_size), data keys (--scene_count,
--view_count, --height, --width, --easy), analysis keys (--layer,
--layers, --n_pairs, --bins, --zero_rgb), ablation keys (--seeds,
--parallel). Every key has a default; unknown keys are rejected.

examples:
  dnvs gen-data --data_dir=data --scene_count=2 --view_count=10
  dnvs train --data_dir=data --out_dir=run0 --seed=0
  dnvs params --D=768 --L=12 --r=4
  dnvs ablate --data_dir=data --out_dir=ablation --steps=200 --seeds=0,1,2
"""

# Table-2-style matrix: tokenization, supervision, modulation, and the
# attention/normalization/placement/direction alternatives.
ABLATION_VARIANTS: list[tuple[str, dict[str, str]]] = [
    ("baseline", {"decouple": "false", "modulation": "false",
                  "lam_I": "0", "lam_P": "0"}),
    ("baseline_reg", {"decouple": "false", "modulation": "false",
                      "lam_I": "0", "lam_P": "0", "n_registers": "4"}),
    ("baseline_sup", {"decouple": "false", "modulation": "false",
                      "lam_P": "0"}),
    ("decouple", {"decouple": "true", "modulation": "false",
                  "lam_I": "0", "lam_P": "0"}),
    ("decouple_sup", {"decouple": "true", "modulation": "false"}),
    ("decouple_mod", {"decouple": "true", "modulation": "true",
                      "lam_I": "0", "lam_P": "0"}),
    ("decouple_sup_mod", {"decouple": "true", "modulation": "true"}),
    ("indep_qk", {"decouple": "true", "modulation": "true",
                  "qk_mode": "independent"}),
    ("joint_ln", {"decouple": "true", "modulation": "true",
                  "ln_mode": "joint"}),
    ("mod_pre_attn_ln", {"decouple": "true", "modulation": "true",
                         "placement": "pre-attn-ln"}),
    ("mod_post_ffn", {"decouple": "true", "modulation": "true",
                      "placement": "post-ffn"}),
    ("mod_p2i", {"decouple": "true", "modulation": "true",
                 "direction": "p2i-only"}),
    ("mod_i2p", {"decouple": "true", "modulation": "true",
                 "direction": "i2p-only"}),
]


# ---------------------------------------------------------------------------
# shared helpers


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _model_and_params(rcfg: RunConfig) -> tuple[ModelConfig, dict]:
    if rcfg.ckpt:
        return load_checkpoint(_require_dir(rcfg.ckpt, "checkpoint"))
    mcfg = model_config(rcfg)
    return mcfg, init_params(mcfg, seed=rcfg.seed)


def _rotate(seq, start, count):
    return [seq[(start + i) % len(seq)] for i in range(count)]


def _analysis_samples(rcfg: RunConfig, n_samples: int):
    """Batch for analysis/bench: dataset views when available, otherwise a
    freshly rendered synthetic scene."""
    need = rcfg.n_inputs + rcfg.n_targets
    root = Path(rcfg.data_dir)
    if root.exists():
        ds = load_dataset(root)
        pools = ds.scenes
    else:
        pools = [render_scene(easy_scene([rcfg.scene_seed, 0], H=rcfg.height,
                                         W=rcfg.width,
                                         n_views=max(need, 4)))]
    if len(pools[0]) < need:
        raise ConfigError(f"need {need} views per sample, have {len(pools[0])}")
    samples = []
    for b in range(n_samples):
        views = _rotate(pools[b % len(pools)], b, need)
        if rcfg.zero_rgb:
            views = [CameraView(np.zeros_like(v.image), v.depth, v.extrinsic,
                                v.intrinsic) for v in views]
        ins, tgts = views[:rcfg.n_inputs], views[rcfg.n_inputs:]
        samples.append((ins, [(v.extrinsic, v.intrinsic) for v in tgts]))
    return samples


def _token_count(rcfg: RunConfig, mcfg: ModelConfig, resolution) -> int:
    H, W = resolution
    n_p = (H // mcfg.p) * (W // mcfg.p)
    return (rcfg.n_inputs + rcfg.n_targets) * n_p + mcfg.n_registers


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(rcfg: RunConfig) -> None:
    make = easy_scene if rcfg.easy else random_scene
    specs = [make([rcfg.scene_seed, i], H=rcfg.height, W=rcfg.width,
                  n_views=rcfg.view_count) for i in range(rcfg.scene_count)]
    write_dataset(rcfg.data_dir, specs, patch_size=rcfg.p,
                  seed=rcfg.scene_seed, depth_tol=rcfg.depth_tol)
    echo_config(rcfg, rcfg.data_dir)
    kind = "easy" if rcfg.easy else "random"
    print(f"wrote {rcfg.scene_count} {kind} scene(s) x {rcfg.view_count} views "
          f"at {rcfg.height}x{rcfg.width} to {rcfg.data_dir}")


def cmd_train(rcfg: RunConfig) -> None:
    result = train(rcfg, log=print)
    rep = result.final_report
    print(f"checkpoint: {result.out_dir / 'ckpt_final'}")
    print(f"final held-out psnr {rep.mean_psnr:.2f} ssim {rep.mean_ssim:.4f}")


def cmd_eval(rcfg: RunConfig) -> None:
    ckpt = Path(rcfg.ckpt) if rcfg.ckpt else Path(rcfg.out_dir) / "ckpt_final"
    mcfg, params = load_checkpoint(_require_dir(ckpt, "checkpoint"))
    dataset = load_dataset(_require_dir(rcfg.data_dir, "dataset directory"))
    rep = evaluate(mcfg, params, dataset, rcfg.n_inputs, rcfg.holdout_frac,
                   seed=rcfg.seed, digest=config_digest(rcfg))
    out = Path(rcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(rcfg, out)
    write_eval_csv(out / "eval.csv", [rep])
    for scene, view, p, s in rep.rows:
        print(f"scene {scene} view {view}: psnr {p:.2f} ssim {s:.4f}")
    print(f"mean psnr {rep.mean_psnr:.2f} (+/- {rep.std_psnr:.2f}) "
          f"mean ssim {rep.mean_ssim:.4f}")


def _params_variants(rcfg: RunConfig) -> list[tuple[str, ModelConfig]]:
    common = dict(D=rcfg.D, n_heads=rcfg.n_heads, L=rcfg.L, p=rcfg.p, r=rcfg.r,
                  k_I=None, k_P=None, tokenizer_depth=rcfg.tokenizer_depth)
    return [
        ("entangled", ModelConfig(decouple=False, modulation=False, **common)),
        ("decoupled", ModelConfig(decouple=True, modulation=False, **common)),
        ("decoupled+indep-qk", ModelConfig(decouple=True, modulation=False,
                                           qk_mode="independent", **common)),
        ("decoupled+mod", ModelConfig(decouple=True, modulation=True, **common)),
    ]


def cmd_params(rcfg: RunConfig) -> None:
    print(f"parameter audit at D={rcfg.D}, r={rcfg.r}, L={rcfg.L}")
    header = (f"{'variant':<20} {'block matrix':>14} {'closed form':>14} "
              f"{'mod/block':>12} {'mod total':>12} {'total':>14}")
    print(header)
    rows = []
    for name, cfg in _params_variants(rcfg):
        pc = param_count(cfg)
        mod_total = pc["modulation_form"] * cfg.L
        rows.append((name, pc["per_block_matrix"], pc["matrix_form"],
                     pc["modulation_form"], mod_total, pc["total"]))
        print(f"{name:<20} {pc['per_block_matrix']:>14,} {pc['matrix_form']:>14,} "
              f"{pc['modulation_form']:>12,} {mod_total:>12,} {pc['total']:>14,}")
    out = Path(rcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(rcfg, out)
    with open(out / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "block_matrix", "closed_form", "mod_per_block",
                    "mod_total", "total"])
        w.writerows(rows)


def cmd_bench(rcfg: RunConfig) -> None:
    mcfg, params = _model_and_params(rcfg)
    samples = _analysis_samples(rcfg, rcfg.batch_size)
    rep = bench_latency(mcfg, params, samples, warmup=rcfg.bench_warmup,
                        measured=rcfg.bench_measured)
    rep["variant"] = variant_name(mcfg)
    out = Path(rcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(rcfg, out)
    write_bench_csv([rep], out / "bench.csv")
    print(f"{rep['variant']}: {rep['ms_per_sample']:.2f} ms/sample over "
          f"{rep['measured']} forwards ({rep['tokens']} tokens, "
          f"{rep['flops_total']:,} matmul FLOPs, "
          f"{rep['params_total']:,} params)")
    if rep["noisy"]:
        print(f"warning: noisy timing (cv {rep['cv']:.2f} >= 0.5)")


def cmd_analyze_cosine(rcfg: RunConfig) -> None:
    mcfg, params = _model_and_params(rcfg)
    samples = _analysis_samples(rcfg, rcfg.batch_size)
    res = cosine_analysis(mcfg, params, samples, layer=rcfg.layer,
                          n_pairs=rcfg.n_pairs, bins=rcfg.bins, seed=rcfg.seed)
    out = Path(rcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(rcfg, out)
    write_cosine_csv(res, out / "cosine.csv")
    means = {name: g["mean"] for name, g in res["groups"].items()}
    print(f"layer {res['layer']}, {res['n_pairs']} pairs: " +
          " ".join(f"{k} {v:+.4f}" for k, v in means.items()))


def _parse_layer_list(rcfg: RunConfig, mcfg: ModelConfig) -> list[int]:
    if not rcfg.layers.strip():
        return list(range(1, mcfg.L + 1))
    try:
        return [int(x) for x in rcfg.layers.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --layers list {rcfg.layers!r}; "
                          "expected comma-separated integers") from None


def cmd_export_features(rcfg: RunConfig) -> None:
    mcfg, params = _model_and_params(rcfg)
    samples = _analysis_samples(rcfg, 1)
    layers = _parse_layer_list(rcfg, mcfg)
    out = Path(rcfg.out_dir)
    sub = out / ("features_zero_rgb" if rcfg.zero_rgb else "features")
    echo_config(rcfg, out)
    written = export_features_pca(mcfg, params, samples, layers, sub)
    print(f"wrote {len(written)} feature images to {sub}")


def _ablate_one(job):
    name, seed, sub, cfg, n_tok = job
    result = train(cfg, out_dir=sub)
    rep = result.final_report
    mcfg = model_config(cfg)
    return {"variant": name, "seed": seed, "psnr": rep.mean_psnr,
            "ssim": rep.mean_ssim,
            "params": param_count(mcfg)["total"],
            "flops": flop_count(mcfg, n_tok)["total"] * mcfg.L}


def cmd_ablate(rcfg: RunConfig) -> None:
    dataset = load_dataset(_require_dir(rcfg.data_dir, "dataset directory"))
    try:
        seeds = [int(s) for s in rcfg.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --seeds list {rcfg.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    out = Path(rcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(rcfg, out)
    jobs = []
    for name, overrides in ABLATION_VARIANTS:
        for seed in seeds:
            cfg = parse_overrides({**overrides, "seed": str(seed)},
                                  base=replace(rcfg))
            sub = out / f"{name}_s{seed}"
            n_tok = _token_count(cfg, model_config(cfg), dataset.resolution)
            jobs.append((name, seed, sub, cfg, n_tok))
    dirs = [j[2] for j in jobs]
    if len(set(dirs)) != len(dirs):
        raise ConfigError("ablation output directories collide")
    if rcfg.parallel:
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_ablate_one, jobs))
    else:
        rows = []
        for job in jobs:
            print(f"running {job[0]} seed {job[1]} ...")
            rows.append(_ablate_one(job))
    with open(out / "ablate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "psnr", "ssim", "params", "flops"])
        for r in rows:
            w.writerow([r["variant"], r["seed"], repr(r["psnr"]),
                        repr(r["ssim"]), r["params"], r["flops"]])
    print(f"{'variant':<18} {'seed':>4} {'psnr':>7} {'ssim':>7}")
    for r in rows:
        print(f"{r['variant']:<18} {r['seed']:>4} {r['psnr']:>7.2f} "
              f"{r['ssim']:>7.4f}")
    print(f"table: {out / 'ablate.csv'}")


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "params": cmd_params,
    "bench": cmd_bench,
    "analyze-cosine": cmd_analyze_cosine,
    "export-features": cmd_export_features,
    "ablate": cmd_ablate,
}


def _parse_argv(args) -> tuple[str | None, dict[str, str]]:
    cfg_path = None
    overrides: dict[str, str] = {}
    for a in args:
        if not a.startswith("--") or "=" not in a:
            raise ConfigError(f"flags must look like --key=value, got {a!r}")
        key, _, value = a[2:].partition("=")
        if key == "config":
            cfg_path = value
        else:
            overrides[key] = value
    return cfg_path, overrides


def main(argv=None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        print(USAGE, file=sys.stderr)
        return 2
    if args[0] in ("help", "-h", "--help"):
        print(USAGE)
        return 0
    handler = _HANDLERS.get(args[0])
    if handler is None:
        print(f"unknown subcommand {args[0]!r}\n\n{USAGE}", file=sys.stderr)
        return 2
    try:
        cfg_path, overrides = _parse_argv(args[1:])
        rcfg = parse_config(cfg_path, overrides)
        handler(rcfg)
        return 0
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, NvstFormatError, FileNotFoundError,
            NotADirectoryError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
