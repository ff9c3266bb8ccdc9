"""Command line entry point: ``diffmap <command> [options]``.

Every option can also come from a JSON file passed with ``--config``; flags
given on the command line win. ``--seed`` falls back to ``$DIFFMAP_SEED``.
Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from diffmap.errors import ConfigError, ContractError, DivergenceError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("diffmap")


def _csv_floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text):
    return [int(v) for v in _csv_floats(text)]


# name -> (type, default, help) for every command
COMMANDS = {
    "gen-data": {
        "out": (str, None, "output dataset directory"),
        "n": (int, 16, "number of samples"),
        "seed": (int, None, "first scene seed (scene i uses seed + i)"),
        "preset": (str, "short", "raster preset: short or long"),
        "p_ped": (float, None, "probability of a pedestrian crossing"),
    },
    "train-vqvae": {
        "data": (str, None, "training dataset directory"),
        "factor": (int, 8, "spatial downsampling factor (4, 8 or 16)"),
        "out": (str, None, "checkpoint path"),
        "steps": (int, None, "optimizer steps"),
        "batch_size": (int, None, "batch size"),
        "lr": (float, None, "learning rate"),
        "seed": (int, None, "training seed"),
        "resume": (str, None, "checkpoint to resume from"),
    },
    "train-diff": {
        "data": (str, None, "training dataset directory"),
        "vqvae": (str, None, "trained VQ-VAE checkpoint"),
        "out": (str, None, "checkpoint path"),
        "steps": (int, None, "optimizer steps"),
        "batch_size": (int, None, "batch size"),
        "lr": (float, None, "learning rate"),
        "seed": (int, None, "training seed"),
        "resume": (str, None, "checkpoint to resume from"),
    },
    "infer": {
        "data": (str, None, "dataset of observations"),
        "ckpt": (str, None, "trained diffusion checkpoint"),
        "out": (str, None, "prediction directory"),
        "steps": (int, 20, "reverse steps"),
        "samples": (int, 3, "chains averaged per observation"),
        "eta": (float, 0.0, "sampler stochasticity"),
        "seed": (int, None, "sampling seed"),
    },
    "eval": {
        "pred": (str, None, "prediction directory"),
        "gt": (str, None, "ground-truth dataset directory"),
        "intervals": (_csv_floats, None, "x cut points in meters, e.g. 0,30,60,90"),
        "out": (str, None, "JSON report path"),
        "csv": (str, None, "optional CSV report path"),
    },
    "viz": {
        "sample": (str, None, "ground-truth sample directory"),
        "pred": (str, None, "predicted sample directory (or a prediction dataset)"),
        "out": (str, None, "PNG path"),
        "ckpt": (str, None, "diffusion checkpoint, enables the baseline panel"),
        "scale": (int, 2, "pixel upsampling"),
    },
    "ablate-factor": {
        "data": (str, None, "dataset directory"),
        "out": (str, None, "JSON report path"),
        "factors": (_csv_ints, [4, 8, 16], "comma-separated factors"),
        "vq_steps": (int, 300, "VQ-VAE steps per factor"),
        "diff_steps": (int, 300, "diffusion steps per factor"),
        "sample_steps": (int, 20, "reverse steps"),
        "samples": (int, 1, "chains per observation"),
        "seed": (int, None, "seed"),
    },
}

REQUIRED = {
    "gen-data": ("out",),
    "train-vqvae": ("data", "out"),
    "train-diff": ("data", "vqvae", "out"),
    "infer": ("data", "ckpt", "out"),
    "eval": ("pred", "gt"),
    "viz": ("sample", "pred", "out"),
    "ablate-factor": ("data", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffmap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with option values")
        for key, (typ, _, help_) in opts.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_)
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the JSON config and explicit flags (in rising priority)."""
    from diffmap.pipeline.config import load_json_config, resolve_seed

    spec = COMMANDS[command]
    opts = {k: default for k, (_, default, _) in spec.items()}
    extra = {}
    if args.config:
        cfg = load_json_config(args.config)
        for key, value in cfg.items():
            k = key.replace("-", "_")
            if k in spec:
                opts[k] = spec[k][0](value) if isinstance(value, str) and spec[k][0] in (_csv_floats, _csv_ints) else value
            elif k in ("train", "scene"):
                extra[k] = value
            else:
                raise ConfigError(f"unknown option {key!r} for {command}")
    for k in spec:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    for k in REQUIRED[command]:
        if opts.get(k) in (None, ""):
            raise ConfigError(f"{command} needs --{k.replace('_', '-')}")
    if "seed" in spec:
        opts["seed"] = resolve_seed(opts["seed"])
    opts.update(extra)
    return opts


def _manifest(kind, opts, data_dir=None, checkpoints=None, metrics=None):
    from diffmap.pipeline.config import RunManifest, code_hash, data_hash

    return RunManifest(kind, {k: v for k, v in opts.items()}, code_hash(),
                       data_hash(data_dir) if data_dir else "", checkpoints or {}, metrics or {})


def _load_data(path):
    from diffmap.mapforge.io import load_dataset

    if not Path(path).is_dir():
        raise FormatError(f"dataset directory {path} does not exist", field="data")
    return load_dataset(path)


def _train_config(stage, opts):
    from diffmap.pipeline.config import TrainConfig, recipe

    base = recipe(stage).to_dict()
    base.update(opts.get("train", {}))
    for k in ("steps", "batch_size", "lr", "seed"):
        if opts.get(k) is not None:
            base[k] = opts[k]
    return TrainConfig.from_dict(base)


def cmd_gen_data(opts):
    from diffmap.mapforge import generate_scene, preset, save_dataset

    overrides = dict(opts.get("scene", {}))
    if opts["p_ped"] is not None:
        overrides["p_ped"] = opts["p_ped"]
    cfg = preset(opts["preset"], **overrides)
    if opts["n"] < 1:
        raise ConfigError("--n must be >= 1")
    samples = [generate_scene(opts["seed"] + i, cfg) for i in range(opts["n"])]
    out = save_dataset(samples, opts["out"], {"scene_config": cfg.to_dict()})
    _manifest("gen-data", opts).write(out / "run.json")
    log.info("wrote %d samples to %s", len(samples), out)


def cmd_train_vqvae(opts):
    from diffmap.pipeline.train import train_vqvae
    from diffmap.vq import VqConfig

    cfg = _train_config("vqvae", opts)
    vq_cfg = VqConfig(factor=opts["factor"])
    samples = _load_data(opts["data"])
    res = train_vqvae(samples, cfg, vq_cfg, out=opts["out"],
                      resume=opts["resume"])
    _manifest("train-vqvae", {**opts, "train": cfg.to_dict()}, opts["data"],
              {"vqvae": str(opts["out"])}, {"final_loss": res.losses[-1] if res.losses else None}
              ).write(str(opts["out"]) + ".manifest.json")


def cmd_train_diff(opts):
    from diffmap.pipeline.models import load_vqvae
    from diffmap.pipeline.train import train_diffusion

    cfg = _train_config("diffusion", opts)
    samples = _load_data(opts["data"])
    vq, _ = load_vqvae(opts["vqvae"])
    res = train_diffusion(samples, vq, cfg, out=opts["out"], resume=opts["resume"])
    _manifest("train-diff", {**opts, "train": cfg.to_dict()}, opts["data"],
              {"vqvae": str(opts["vqvae"]), "diffmap": str(opts["out"])},
              {"final_loss": res.losses[-1] if res.losses else None}
              ).write(str(opts["out"]) + ".manifest.json")


def cmd_infer(opts):
    from diffmap.mapforge.io import save_dataset
    from diffmap.mapforge.types import MapSample
    from diffmap.pipeline.config import derive_seed
    from diffmap.pipeline.infer import sample_map
    from diffmap.pipeline.models import load_diffmap

    samples = _load_data(opts["data"])
    model, _ = load_diffmap(opts["ckpt"])
    preds = []
    for s in samples:
        seed = derive_seed(opts["seed"], s.scene_seed)
        p = sample_map(s.observation, model, opts["steps"], opts["samples"], opts["eta"], seed,
                       grid=s.gt.grid)
        preds.append(MapSample(p.map, s.observation, s.scene_seed,
                               {"polylines": p.polylines.to_json(), "source": "diffmap"}))
    out = save_dataset(preds, opts["out"])
    _manifest("infer", opts, opts["data"], {"diffmap": str(opts["ckpt"])}).write(out / "run.json")


def cmd_eval(opts):
    from diffmap.pipeline.evaluate import evaluate, format_table

    report = evaluate(opts["pred"], opts["gt"], opts["intervals"], opts["out"], opts["csv"])
    print(format_table(report))
    if opts["out"]:
        _manifest("eval", opts, opts["gt"], metrics={"means": report["means"]}).write(
            str(opts["out"]) + ".manifest.json")


def cmd_viz(opts):
    from diffmap.mapforge.io import is_sample_dir, load_sample
    from diffmap.pipeline.viz import render_comparison

    sample_dir, pred_dir = Path(opts["sample"]), Path(opts["pred"])
    if not is_sample_dir(pred_dir) and is_sample_dir(pred_dir / sample_dir.name):
        pred_dir = pred_dir / sample_dir.name
    sample, pred = load_sample(sample_dir), load_sample(pred_dir)
    baseline = None
    if opts["ckpt"]:
        from diffmap.pipeline.infer import baseline_map
        from diffmap.pipeline.models import load_diffmap

        baseline = baseline_map(sample.observation, load_diffmap(opts["ckpt"])[0])
    render_comparison(sample, pred.gt, opts["out"], baseline=baseline, scale=opts["scale"])


def cmd_ablate_factor(opts):
    from diffmap.pipeline.ablation import AblationConfig, ablate_factor, format_ablation

    samples = _load_data(opts["data"])
    cfg = AblationConfig(tuple(opts["factors"]), opts["vq_steps"], opts["diff_steps"],
                         opts["sample_steps"], opts["samples"], opts["seed"])
    report = ablate_factor(samples, cfg, opts["out"])
    print(format_ablation(report))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-vqvae": cmd_train_vqvae,
    "train-diff": cmd_train_diff,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "viz": cmd_viz,
    "ablate-factor": cmd_ablate_factor,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args.command, args)
        HANDLERS[args.command](opts)
    except (ConfigError, DivergenceError) as exc:
        print(f"diffmap {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ContractError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"diffmap {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
