"""Command-line entry point: ``occ4d <command> [flags]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime failure.
Heavy modules are imported after argument parsing so ``--threads`` can cap
the BLAS pools before numpy loads them.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["desk", "paper"]},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "integer", "minimum": 1} for k in (
                "d_model", "depth", "num_heads", "head_dim", "n_ref", "latent_channels",
                "latent_h", "latent_w", "patch", "mlp_ratio", "d_text", "ref_heads", "freq_dim")},
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "cfg_scale": {"type": "number", "minimum": 0},
                "p_anchor": {"type": "number", "minimum": 0, "maximum": 1},
                "p_cfg": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "size_x": {"type": "integer", "minimum": 1},
                "size_y": {"type": "integer", "minimum": 1},
                "size_z": {"type": "integer", "minimum": 1},
                "voxel_size": {"type": "number", "exclusiveMinimum": 0},
                "x_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "y_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "z_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "frame_rate": {"type": "number", "exclusiveMinimum": 0},
                "num_classes": {"type": "integer", "minimum": 2, "maximum": 256},
            },
        },
        "codec": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"downsample": {"type": "integer", "minimum": 1}},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "checkpoint_every": {"type": "integer", "minimum": 1},
            },
        },
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "frames": {"type": "integer", "minimum": 1},
                "kind": {"enum": ["mixed", "direction"]},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "clips_n": {"type": "integer", "minimum": 1},
                "clip_len": {"type": "integer", "minimum": 1},
                "frames_per_clip": {"type": "integer", "minimum": 1},
                "k": {"type": "integer", "minimum": 1},
                "kid_block": {"type": "integer", "minimum": 2},
            },
        },
        "judge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "endpoint": {"type": ["string", "null"]},
                "attempts": {"type": "integer", "minimum": 1},
                "timeout": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

# every field has a default; the desk model reads 88 latent channels from the
# reference codec (8 depth bins x 11 classes) at downsample 4 on a 32x32x8 grid
PRESETS = {
    "desk": {
        "preset": "desk",
        "model": {"d_model": 64, "depth": 2, "num_heads": 4, "head_dim": 16, "n_ref": 1,
                  "latent_channels": 88, "latent_h": 8, "latent_w": 8, "patch": 2,
                  "mlp_ratio": 4, "d_text": 32, "ref_heads": 4, "freq_dim": 256},
        "sampler": {"steps": 20, "cfg_scale": 7.5, "p_anchor": 0.5, "p_cfg": 0.15},
        "grid": {"size_x": 32, "size_y": 32, "size_z": 8, "voxel_size": 0.4,
                 "x_range": [-6.4, 6.4], "y_range": [-6.4, 6.4], "z_range": [-1.6, 1.6],
                 "frame_rate": 2.0, "num_classes": 11},
        "codec": {"downsample": 4},
        "train": {"iterations": 5000, "batch_size": 16, "lr": 2e-3, "weight_decay": 0.0,
                  "betas": [0.9, 0.95], "checkpoint_every": 500},
        "corpus": {"n": 512, "frames": 8, "kind": "direction"},
        "metrics": {"clips_n": 200, "clip_len": 8, "frames_per_clip": 5, "k": 3, "kid_block": 50},
        "judge": {"endpoint": None, "attempts": 3, "timeout": 30.0},
    },
    "paper": {
        "preset": "paper",
        "model": {"d_model": 896, "depth": 14, "num_heads": 14, "head_dim": 64, "n_ref": 2,
                  "latent_channels": 16, "latent_h": 28, "latent_w": 28, "patch": 2,
                  "mlp_ratio": 4, "d_text": 2048, "ref_heads": 14, "freq_dim": 256},
        "sampler": {"steps": 20, "cfg_scale": 7.5, "p_anchor": 0.5, "p_cfg": 0.15},
        "grid": {"size_x": 200, "size_y": 200, "size_z": 16, "voxel_size": 0.4,
                 "x_range": [-40.0, 40.0], "y_range": [-40.0, 40.0], "z_range": [-3.2, 3.2],
                 "frame_rate": 2.0, "num_classes": 11},
        "codec": {"downsample": 8},
        "train": {"iterations": 100000, "batch_size": 32, "lr": 1e-4, "weight_decay": 0.0,
                  "betas": [0.9, 0.95], "checkpoint_every": 5000},
        "corpus": {"n": 512, "frames": 16, "kind": "mixed"},
        "metrics": {"clips_n": 10000, "clip_len": 16, "frames_per_clip": 5, "k": 3, "kid_block": 50},
        "judge": {"endpoint": None, "attempts": 3, "timeout": 30.0},
    },
}


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_run_config(path=None, preset=None):
    """Validate a JSON run config and fill every missing field from its preset."""
    import jsonschema

    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"config rejected: {exc.message} at {list(exc.absolute_path)}") from None
    name = preset or doc.get("preset", "desk")
    cfg = _merge(PRESETS[name], doc)
    jsonschema.validate(cfg, RUN_SCHEMA)
    return cfg


def build_objects(run):
    """ModelConfig, SamplerConfig, GridSpec and TrainConfig from a validated run config."""
    from .backbone import ModelConfig
    from .corpus import TrainConfig
    from .flow import SamplerConfig
    from .grid import GridSpec

    try:
        g = run["grid"]
        grid = GridSpec(g["size_x"], g["size_y"], g["size_z"], g["voxel_size"], tuple(g["x_range"]),
                        tuple(g["y_range"]), tuple(g["z_range"]), g["frame_rate"], g["num_classes"])
        model = ModelConfig(**run["model"])
        sampler = SamplerConfig(**run["sampler"])
        t = run["train"]
        train = TrainConfig(t["iterations"], t["batch_size"], t["lr"], t["weight_decay"],
                            tuple(t["betas"]), t["checkpoint_every"], run["codec"]["downsample"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"inconsistent configuration: {exc}") from None
    return model, sampler, grid, train


def _need_file(path, what):
    if path and not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")


def _emit(args, obj, text=None):
    if args.json:
        print(json.dumps(obj, sort_keys=True, default=float))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in obj.items()))


# ---------------------------------------------------------------- commands

def cmd_make_corpus(args, run):
    from . import corpus as Co

    _, _, grid, _ = build_objects(run)
    c = run["corpus"]
    n = args.n or c["n"]
    frames = args.frames or c["frames"]
    kind = args.kind or c["kind"]
    if kind == "direction":
        recs = Co.make_direction_corpus(n, grid, args.seed, frames)
    else:
        recs = Co.make_dataset(n, grid, args.seed, frames=frames)
    path = Co.write_corpus(recs, args.out)
    _emit(args, {"manifest": path, "records": len(recs),
                 "train": sum(r.split == "train" for r in recs),
                 "val": sum(r.split == "val" for r in recs)})


def cmd_standardize(args, run):
    import numpy as np

    from .grid import BUILTIN_MAPS, LabelMap, map_labels, resample_ids, save_grid

    _need_file(args.input, "input")
    _need_file(args.label_map, "label map")
    _, _, grid, _ = build_objects(run)
    if args.label_map:
        with open(args.label_map) as fh:
            lmap = LabelMap.from_json(fh.read())
    elif args.source:
        lmap = BUILTIN_MAPS[args.source]
    else:
        raise UsageError("one of --source or --label-map is required")
    vocab = None
    if args.vocabulary:
        _need_file(args.vocabulary, "vocabulary")
        with open(args.vocabulary) as fh:
            vocab = json.load(fh)
    raw = np.load(args.input, allow_pickle=False)
    spec = grid if raw.shape[-3:] == grid.sizes else _spec_for(raw.shape[-3:], grid)
    out = map_labels(raw, lmap, spec, vocab)
    if args.resample:
        out = resample_ids(out, args.resample)
    save_grid(args.out, out)
    _emit(args, {"output": args.out, "frames": out.frames, "sizes": list(out.spec.sizes),
                 "source": lmap.source_name})


def _spec_for(sizes, like):
    """Same metric extent as ``like`` at a different voxel count."""
    from .grid import GridSpec

    x, y, z = sizes
    vx = (like.x_range[1] - like.x_range[0]) / x
    vy = (like.y_range[1] - like.y_range[0]) / y
    vz = (like.z_range[1] - like.z_range[0]) / z
    return GridSpec(x, y, z, (vx, vy, vz), like.x_range, like.y_range, like.z_range,
                    like.frame_rate, like.num_classes)


def cmd_train(args, run):
    from dataclasses import replace

    from . import corpus as Co

    _need_file(args.corpus, "corpus manifest")
    _need_file(args.resume, "checkpoint")
    model, sampler, _, train = build_objects(run)
    if args.iterations:
        train = replace(train, iterations=args.iterations)
    train = replace(train, seed=args.seed)
    recs = Co.read_corpus(args.corpus)
    report = (lambda it, loss: print(f"iter {it} loss {loss:.4f}", file=sys.stderr)) if args.verbose else None
    res = Co.train_loop(recs, model, sampler, train, out_dir=args.out, resume=args.resume,
                        log_every=100 if args.verbose else 0, progress=report)
    _emit(args, {"checkpoints": res.checkpoints, "final_loss": res.losses[-1] if res.losses else None,
                 "iterations": train.iterations, "baseline": res.baseline})


def _model_for_sampling(args, run):
    from . import backbone as B
    from . import corpus as Co

    if args.checkpoint:
        _need_file(args.checkpoint, "checkpoint")
        return Co.load_model(args.checkpoint)
    model, _, _, _ = build_objects(run)
    return model, B.init_params(model, args.seed), Co.LatentStats.identity(model.latent_channels)


def cmd_sample(args, run):
    from dataclasses import replace

    import numpy as np

    from .codec import load_latent, save_latent
    from .flow import sample, write_sample_record
    from .text import stub_encode

    _need_file(args.history, "history")
    model_cfg, sampler, _, _ = build_objects(run)
    if args.steps:
        sampler = replace(sampler, steps=args.steps)
    if args.cfg_scale is not None:
        sampler = replace(sampler, cfg_scale=args.cfg_scale)
    frames = args.frames or run["corpus"]["frames"]
    h = args.h or 0
    if h and not args.history:
        raise UsageError("--h needs --history")
    cfg, params, stats = _model_for_sampling(args, run)
    try:
        feats = stub_encode(args.prompt, cfg.d_text, seed=args.text_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    history = None
    if args.history:
        history = stats.normalize(load_latent(args.history))
        h = h or history.shape[1]
    rng = np.random.default_rng(args.seed)
    z = sample(params, cfg, [feats], frames, sampler, rng, history=history, h=h)[0]
    latent = stats.denormalize(z)
    save_latent(args.out, latent)
    write_sample_record(args.out + ".json", seed=args.seed, steps=sampler.steps,
                        cfg_scale=sampler.cfg_scale, h=h, prompt=args.prompt,
                        checkpoint_path=args.checkpoint, output_path=args.out)
    _emit(args, {"output": args.out, "shape": list(latent.shape), "record": args.out + ".json"})


def _load_clip(path, run):
    from .codec import ReferenceCodec, load_latent
    from .grid import load_grid

    if path.endswith(".occl"):
        _, _, grid, _ = build_objects(run)
        return ReferenceCodec(grid, run["codec"]["downsample"]).decode(load_latent(path))
    return load_grid(path)


def cmd_render_bev(args, run):
    from .grid import render_grid_bev, write_ppm, write_png

    _need_file(args.input, "input")
    grid = _load_clip(args.input, run)
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for f, img in enumerate(render_grid_bev(grid)):
        if args.format == "png":
            path = os.path.join(args.out, f"frame_{f:03d}.png")
            write_png(path, img)
        else:
            path = os.path.join(args.out, f"frame_{f:03d}.ppm")
            write_ppm(path, img)
        paths.append(path)
    _emit(args, {"frames": paths})


def _clips_from(paths, run):
    from . import corpus as Co

    clips = []
    for p in paths:
        _need_file(p, "input")
        if p.endswith(".jsonl"):
            clips.extend(r.grid for r in Co.read_corpus(p))
        else:
            clips.append(_load_clip(p, run))
    return clips


def cmd_evaluate(args, run):
    from .metrics import evaluate

    m = run["metrics"]
    real = _clips_from(args.real, run)
    gen = _clips_from(args.gen, run)
    report = evaluate(real, gen, preset="desk", seed=args.seed, k=m["k"], kid_block=m["kid_block"],
                      clips_n=m["clips_n"], clip_len=m["clip_len"],
                      frames_per_clip=m["frames_per_clip"])
    report.config["preset"] = run["preset"]
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
    print(report.to_json())


def cmd_judge(args, run):
    from .metrics import judge_request, stub_judge

    for p in args.renders:
        _need_file(p, "render")
    if args.stub:
        score = stub_judge(args.prompt)
    else:
        j = run["judge"]
        score = judge_request(args.renders, args.prompt, args.endpoint or j["endpoint"],
                              timeout=j["timeout"], attempts=j["attempts"])
    _emit(args, score.to_dict())


def cmd_gradcheck(args, run):
    from .backbone import ModelConfig
    from .diagnostics import block_gradcheck

    m = dict(run["model"], depth=1, latent_channels=min(run["model"]["latent_channels"], 4))
    err = block_gradcheck(seed=args.seed, frames=args.frames or 2, cfg=ModelConfig(**m))
    ok = err <= args.tolerance
    _emit(args, {"max_relative_error": err, "tolerance": args.tolerance, "ok": ok},
          f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_flops(args, run):
    from .flow import flops_model

    m = run["model"]
    out = flops_model(args.F, args.S, args.L, args.d or m["d_model"], args.heads or m["num_heads"],
                      args.mode)
    _emit(args, out)


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="occ4d", description="Text-conditioned 4D occupancy generation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run config (validated; missing fields come from the preset)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named preset to fill defaults from")
        p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
        p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
        p.add_argument("--json", action="store_true", help="print the result as one JSON object")
        p.set_defaults(func=fn)
        return p

    p = command("make-corpus", cmd_make_corpus, "generate a synthetic scenario corpus")
    p.add_argument("--out", required=True, help="output directory for OCCG files and manifest.jsonl")
    p.add_argument("--n", type=int, help="number of records (default from config)")
    p.add_argument("--frames", type=int, help="frames per clip (default from config)")
    p.add_argument("--kind", choices=["mixed", "direction"], help="template mix (default from config)")

    p = command("standardize", cmd_standardize, "map source-labelled voxels to the unified classes")
    p.add_argument("--input", required=True, help=".npy array of source labels, (F,X,Y,Z) or (X,Y,Z)")
    p.add_argument("--source", choices=["uniocc", "nuscenes", "waymo", "carla"],
                   help="built-in label map")
    p.add_argument("--label-map", help="label map JSON (overrides --source)")
    p.add_argument("--vocabulary", help="JSON list mapping integer source ids to label names")
    p.add_argument("--resample", type=int, help="resample x/y to this many voxels")
    p.add_argument("--out", required=True, help="output OCCG file")

    p = command("train", cmd_train, "train the backbone on a corpus manifest")
    p.add_argument("--corpus", required=True, help="manifest.jsonl written by make-corpus")
    p.add_argument("--out", required=True, help="directory for OCCW checkpoints and loss_log.csv")
    p.add_argument("--iterations", type=int, help="total iterations (default from config)")
    p.add_argument("--resume", help="OCCW checkpoint to continue from")
    p.add_argument("--verbose", action="store_true", help="report running loss on stderr")

    p = command("sample", cmd_sample, "generate a latent clip for a prompt")
    p.add_argument("--prompt", required=True, help="text prompt")
    p.add_argument("--out", required=True, help="output OCCL file (a provenance .json is written next to it)")
    p.add_argument("--checkpoint", help="OCCW checkpoint (default: untrained weights from --seed)")
    p.add_argument("--history", help="OCCL file with clean prefix frames")
    p.add_argument("--h", type=int, help="number of history frames to anchor (default: all in --history)")
    p.add_argument("--frames", type=int, help="frames to generate (default from config)")
    p.add_argument("--steps", type=int, help="Euler steps (default from config)")
    p.add_argument("--cfg-scale", type=float, help="guidance scale (default from config)")
    p.add_argument("--text-seed", type=int, default=0, help="seed of the stub text encoder (default 0)")

    p = command("render-bev", cmd_render_bev, "render bird's-eye-view images of a grid or latent")
    p.add_argument("--input", required=True, help="OCCG grid or OCCL latent")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=["ppm", "png"], default="ppm", help="image format (default ppm)")

    p = command("evaluate", cmd_evaluate, "distribution metrics between real and generated clips")
    p.add_argument("--real", nargs="+", required=True, help="manifest.jsonl or OCCG/OCCL files")
    p.add_argument("--gen", nargs="+", required=True, help="manifest.jsonl or OCCG/OCCL files")
    p.add_argument("--out", help="also write the MetricReport JSON here")

    p = command("judge", cmd_judge, "score renders with the rubric judge")
    p.add_argument("--renders", nargs="+", required=True, help="rendered frames (PPM or PNG)")
    p.add_argument("--prompt", required=True, help="prompt the renders should follow")
    p.add_argument("--endpoint", help="judge URL (OCCDIR_JUDGE_URL overrides)")
    p.add_argument("--stub", action="store_true", help="use the offline deterministic judge")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check through one backbone block")
    p.add_argument("--frames", type=int, help="frames in the probe clip (default 2)")
    p.add_argument("--tolerance", type=float, default=1e-3, help="maximum relative error (default 1e-3)")

    p = command("flops", cmd_flops, "analytic attention cost model")
    p.add_argument("--F", type=int, required=True, help="frames")
    p.add_argument("--S", type=int, required=True, help="spatial tokens per frame")
    p.add_argument("--L", type=int, required=True, help="text tokens")
    p.add_argument("--d", type=int, help="model width (default from config)")
    p.add_argument("--heads", type=int, help="attention heads (default from config)")
    p.add_argument("--mode", choices=["stsa", "full"], default="stsa", help="attention layout (default stsa)")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .errors import OccError

    try:
        run = load_run_config(args.config, args.preset)
        code = args.func(args, run)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OccError, OSError, ArithmeticError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
