"""Command-line entry point: ``refineseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .base_model import PromptSet
from .checkpoint import load_model, save_model
from .config import ModelConfig, format_modules, parse_modules, read_flat_config, split_config
from .data import (generate_dataset, generate_video_sequence, load_image, read_dataset, read_sequences,
                   save_mask, stack_samples, write_dataset)
from .training import (ABLATION_ROWS, TrainLog, ablate, encode_dataset, evaluate, evaluate_video,
                       format_table, prompt_sweep, train_baseline, train_refiner)

log = logging.getLogger("refineseg")


def _configs(args, model: ModelConfig | None = None):
    raw = read_flat_config(args.config) if args.config else {}
    model_cfg, train_cfg = split_config(raw, model)
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr") if getattr(args, k, None) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return model_cfg, split_config(overrides, model_cfg, train_cfg)[1]


def _arrays(path):
    return stack_samples(read_dataset(path))


def _emit(args, payload, rows=None, columns=None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if rows:
        print(format_table(rows, columns))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")


def cmd_generate_data(args):
    seed = args.seed or 0
    if args.video:
        seqs = [generate_video_sequence(seed * 1_000_003 + i, args.resolution, args.frames)
                for i in range(args.n)]
        flat = [f for s in seqs for f in s]
        ids = [i for i, s in enumerate(seqs) for _ in s]
        manifest = write_dataset(flat, args.out, sequence_ids=ids)
    else:
        manifest = write_dataset(generate_dataset(args.n, args.resolution, seed), args.out)
    print(json.dumps({"manifest": str(manifest), "count": args.n}))


def cmd_train_baseline(args):
    images, masks = _arrays(args.data)
    model_cfg, train_cfg = _configs(args)
    model_cfg = dataclasses.replace(model_cfg, resolution=images.shape[-1])
    tl = TrainLog()
    model = train_baseline(images, masks, model_cfg, train_cfg, tl)
    save_model(model, args.checkpoint, train_cfg)
    print(json.dumps({"checkpoint": args.checkpoint, "seconds": round(tl.seconds, 1),
                      "epoch_losses": [round(v, 4) for v in tl.epoch_means]}))


def cmd_train_refiner(args):
    baseline = load_model(args.baseline)
    images, masks = _arrays(args.data)
    _, train_cfg = _configs(args)
    tl = TrainLog()
    model = train_refiner(baseline, images, masks, args.modules, train_cfg, trainlog=tl)
    save_model(model, args.checkpoint, train_cfg)
    print(json.dumps({"checkpoint": args.checkpoint, "modules": format_modules(model.modules_enabled),
                      "seconds": round(tl.seconds, 1), "epoch_losses": [round(v, 4) for v in tl.epoch_means]}))


def cmd_eval(args):
    model = load_model(args.checkpoint)
    images, masks = _arrays(args.data)
    res = evaluate(model, images, masks, args.prompt, args.points, seed=args.seed or 0)
    res["modules"] = format_modules(model.modules_enabled)
    _emit(args, res, [res], ["modules", "prompt_kind", "n", "mIoU", "mBIoU"])


def cmd_prompt_sweep(args):
    images, masks = _arrays(args.data)
    counts = [int(c) for c in args.counts.split(",")]
    rows = []
    for path in [args.checkpoint] + ([args.baseline] if args.baseline else []):
        model = load_model(path)
        for r in prompt_sweep(model, images, masks, counts, seed=args.seed or 0):
            rows.append({"model": format_modules(model.modules_enabled), **r})
    _emit(args, {"rows": rows}, rows, ["model", "count", "mIoU", "mBIoU"])


def cmd_ablate(args):
    baseline = load_model(args.checkpoint)
    train = _arrays(args.data)
    test = _arrays(args.test)
    rows = [format_modules(parse_modules(m)) for m in args.modules] if args.modules else list(ABLATION_ROWS)
    _, train_cfg = _configs(args)
    encoded = encode_dataset(baseline, train[0], with_crops=any("la" in r for r in rows))
    results = ablate(baseline, train, test, rows, train_cfg, args.prompt, args.seed or 0, encoded)
    _emit(args, {"rows": results}, results, ["modules", "mIoU", "mBIoU"])


def cmd_eval_video(args):
    model = load_model(args.checkpoint)
    if args.data:
        sequences = read_sequences(args.data)
    else:
        seed = args.seed or 0
        sequences = [generate_video_sequence(seed * 1_000_003 + i, model.config.resolution, args.frames)
                     for i in range(args.sequences)]
    res = evaluate_video(model, sequences, args.prompt, seed=args.seed or 0)
    res["modules"] = format_modules(model.modules_enabled)
    _emit(args, res, [res], ["modules", "n", "J", "F", "J&F"])


def cmd_infer(args):
    model = load_model(args.checkpoint)
    image = load_image(args.image)
    prompt = PromptSet.from_json(json.loads(Path(args.prompt).read_text())).validate(model.config.resolution)
    with torch.no_grad():
        logits = model.forward_image(torch.from_numpy(image)[None], [prompt]).final_logits[0, 0].numpy()
    save_mask(logits > 0, args.out)
    print(json.dumps({"mask": args.out, "foreground_pixels": int((logits > 0).sum())}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refineseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.set_defaults(fn=fn)
        return p

    p = add("generate-data", cmd_generate_data, "write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200, help="images, or sequences with --video")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--video", action="store_true")
    p.add_argument("--frames", type=int, default=8)

    for name, fn, text in (("train-baseline", cmd_train_baseline, "train the promptable baseline"),
                           ("train-refiner", cmd_train_refiner, "train refiner modules on a frozen baseline")):
        p = add(name, fn, text)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True, help="output checkpoint directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
    p.add_argument("--baseline", required=True, help="baseline checkpoint directory")
    p.add_argument("--modules", default="la,pr,mr")

    p = add("eval", cmd_eval, "mIoU / mBIoU on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prompt", default="box", choices=("box", "points", "coarse", "mixed"))
    p.add_argument("--points", type=int, help="positive clicks per object for --prompt points")
    p.add_argument("--out")

    p = add("prompt-sweep", cmd_prompt_sweep, "mIoU over point counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="optional baseline checkpoint for comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--counts", default="1,2,5,10")
    p.add_argument("--out")

    p = add("ablate", cmd_ablate, "train and evaluate module subsets")
    p.add_argument("--checkpoint", required=True, help="baseline checkpoint directory")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--test", required=True, help="test dataset")
    p.add_argument("--modules", action="append", help="module subset such as la,pr; repeatable")
    p.add_argument("--prompt", default="box", choices=("box", "points", "coarse", "mixed"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")

    p = add("eval-video", cmd_eval_video, "J / F / J&F with first-frame prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="video dataset; generated on the fly when omitted")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--sequences", type=int, default=20)
    p.add_argument("--prompt", default="box", choices=("box", "points", "coarse"))
    p.add_argument("--out")

    p = add("infer", cmd_infer, "predict one mask from an image and a JSON prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True, help='JSON file, e.g. {"points": [[x, y]], "labels": [1]}')
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
