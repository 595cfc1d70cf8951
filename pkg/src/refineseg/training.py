"""Training loops (frozen-baseline protocol), evaluation and experiment drivers."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig, format_modules, parse_modules
from .data import PROMPT_KINDS, generate_video_sequence, sample_prompts
from .losses import downsample_target, mask_loss, per_sample_mask_loss, total_loss
from .metrics import jf_score, miou_mbiou
from .model import EncodedImages, RefinerModel
from .encoder import FeaturePyramid

log = logging.getLogger(__name__)

ABLATION_ROWS = ("la", "pr,mr", "la,mr", "la,pr", "la,pr,mr")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)
    seconds: float = 0.0
    holdout: list = field(default_factory=list)


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def mixed_prompts(masks, seed: int, kinds=PROMPT_KINDS):
    """One prompt set per mask, with the kind drawn uniformly per sample."""
    rng = _rng(seed, 5)
    out = []
    for i, m in enumerate(masks):
        kind = kinds[int(rng.integers(len(kinds)))]
        out.append(sample_prompts(m, kind, seed=int(rng.integers(2**31)) + i))
    return out


def _targets(masks: np.ndarray, size: int | None = None) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(masks, dtype=np.float32))[:, None]
    return t if size is None else downsample_target(t, (size, size))


def _schedule(optimizer, total_steps: int):
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / max(total_steps, 1))))


def _check_finite(loss, step):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}")


def candidate_losses(decoder_masks: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """BCE + dice of every candidate mask against the target, shape [B, 3]."""
    b, k = decoder_masks.shape[:2]
    flat = decoder_masks.reshape(b * k, 1, *decoder_masks.shape[-2:])
    tgt = target.repeat_interleave(k, dim=0)
    return per_sample_mask_loss(flat, tgt).view(b, k)


def candidate_ious(decoder_masks: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    pred = decoder_masks > 0
    gt = target > 0.5
    inter = (pred & gt).flatten(2).sum(-1).float()
    union = (pred | gt).flatten(2).sum(-1).float()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def baseline_loss(model: RefinerModel, images, prompts, target_q):
    feature = model.project(model.encoder(images).f16)
    sparse, dense = model.base.encode_prompts(prompts)
    dec = model.base.decode_masks(feature, sparse, dense)
    per_cand = candidate_losses(dec.masks, target_q)
    loss = per_cand.min(dim=1).values.mean()
    score_loss = F.mse_loss(dec.scores, candidate_ious(dec.masks.detach(), target_q))
    return loss + score_loss


def train_baseline(images: np.ndarray, masks: np.ndarray, model_config: ModelConfig | None = None,
                   train_config: TrainConfig | None = None, trainlog: TrainLog | None = None) -> RefinerModel:
    """Train encoder + prompt encoder + decoder (then the memory modules) from scratch."""
    model_config = (model_config or ModelConfig()).with_modules(())
    cfg = train_config or TrainConfig()
    trainlog = trainlog if trainlog is not None else TrainLog()
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    model = RefinerModel(model_config)
    r = model_config.resolution
    params = [p for n, p in model.baseline_named_parameters() if not n.startswith("memory_")]
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    scheduler = _schedule(optimizer, steps_per_epoch * cfg.epochs)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = _rng(cfg.seed, epoch, 1).permutation(n)
        epoch_losses = []
        for start_i in range(0, n, cfg.batch_size):
            idx = np.sort(order[start_i:start_i + cfg.batch_size])
            x = torch.from_numpy(images[idx])
            target = _targets(masks[idx], r // 4)
            prompts = mixed_prompts(masks[idx], seed=cfg.seed * 7919 + step)
            loss = baseline_loss(model, x, prompts, target)
            _check_finite(loss, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            trainlog.losses.append(loss.item())
            epoch_losses.append(loss.item())
            step += 1
        trainlog.epoch_means.append(float(np.mean(epoch_losses)))
        log.info("baseline epoch %d loss %.4f", epoch, trainlog.epoch_means[-1])
    if cfg.memory_steps > 0:
        train_memory(model, cfg, trainlog)
    model.eval()
    trainlog.seconds = time.perf_counter() - start
    return model


def train_memory(model: RefinerModel, cfg: TrainConfig, trainlog: TrainLog | None = None, clip_pool: int = 32):
    """Fit the memory encoder/attention on two-frame clips with everything else fixed."""
    r = model.config.resolution
    clips = [generate_video_sequence(cfg.seed * 100_003 + i, r, 3) for i in range(clip_pool)]
    params = [p for n, p in model.named_parameters() if n.startswith(("memory_encoder.", "memory_attention."))]
    frozen = [p for p in model.parameters() if all(p is not q for q in params)]
    flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = _schedule(optimizer, cfg.memory_steps)
    modules = model.modules_enabled
    model.set_modules(())
    rng = _rng(cfg.seed, 3)
    for step in range(cfg.memory_steps):
        optimizer.zero_grad()
        total = 0.0
        for _ in range(cfg.batch_size):
            clip = clips[int(rng.integers(len(clips)))]
            later = int(rng.integers(1, len(clip)))
            kind = PROMPT_KINDS[int(rng.integers(len(PROMPT_KINDS)))]
            prompt = sample_prompts(clip[0].gt_mask, kind, seed=int(rng.integers(2**31)))
            x0 = torch.from_numpy(clip[0].image)[None]
            x1 = torch.from_numpy(clip[later].image)[None]
            with torch.no_grad():
                first = model.forward_image(x0, [prompt])
            entry = model.encode_memory(first.feature[0], first.final_logits[0], 0)
            out = model.forward_image(x1, [prompt], memory=[entry], frame_index=later)
            target = _targets(clip[later].gt_mask[None], r // 4)
            loss = candidate_losses(out.decoder.masks, target).min(dim=1).values.mean() / cfg.batch_size
            _check_finite(loss, step)
            loss.backward()
            total += loss.item()
        optimizer.step()
        scheduler.step()
        if trainlog is not None:
            trainlog.losses.append(total)
    for p, flag in zip(frozen, flags):
        p.requires_grad_(flag)
    model.set_modules(modules)


@torch.no_grad()
def encode_dataset(model: RefinerModel, images: np.ndarray, with_crops: bool = True, chunk: int = 8) -> EncodedImages:
    """Frozen-encoder features for every image (the refiner never changes them)."""
    model.eval()
    parts = []
    for i in range(0, len(images), chunk):
        parts.append(model.encode(torch.from_numpy(images[i:i + chunk]), with_crops=with_crops))
    pyr = FeaturePyramid(torch.cat([p.pyramid.f4 for p in parts]), torch.cat([p.pyramid.f8 for p in parts]),
                         torch.cat([p.pyramid.f16 for p in parts]))
    subs = torch.cat([p.subs for p in parts], dim=1) if with_crops else None
    return EncodedImages(pyr, subs)


def refiner_loss(model: RefinerModel, out, target, cfg: TrainConfig):
    if out.refinement is not None:
        return total_loss(out.final_logits, out.refinement.intermediates, target, cfg.lambda_final, cfg.lambda_inter)
    return cfg.lambda_final * mask_loss(out.final_logits, target)


def train_refiner(baseline: RefinerModel, images: np.ndarray, masks: np.ndarray, modules="la,pr,mr",
                  train_config: TrainConfig | None = None, encoded: EncodedImages | None = None,
                  holdout=None, trainlog: TrainLog | None = None) -> RefinerModel:
    """Train the enabled refiner modules on top of a frozen copy of ``baseline``.

    ``holdout`` is an optional (images, masks) pair whose loss is recorded before and
    after training.
    """
    cfg = train_config or TrainConfig()
    trainlog = trainlog if trainlog is not None else TrainLog()
    start = time.perf_counter()
    modules = parse_modules(modules)
    model = copy.deepcopy(baseline).set_modules(modules).reset_refiner(cfg.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    params = [p for _, p in model.refiner_named_parameters()]
    model.eval()
    if not params:
        trainlog.seconds = time.perf_counter() - start
        return model
    for p in params:
        p.requires_grad_(True)
    if encoded is None:
        encoded = encode_dataset(model, images, with_crops="la" in modules)
    holdout_batch = None
    if holdout is not None:
        h_images, h_masks = holdout
        holdout_batch = (torch.from_numpy(h_images), _targets(h_masks),
                         mixed_prompts(h_masks, seed=cfg.seed + 424242))
        trainlog.holdout.append(_holdout_loss(model, holdout_batch, cfg))
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    scheduler = _schedule(optimizer, steps_per_epoch * cfg.epochs)
    step = 0
    for epoch in range(cfg.epochs):
        order = _rng(cfg.seed, epoch, 2).permutation(n)
        epoch_losses = []
        for start_i in range(0, n, cfg.batch_size):
            idx = np.sort(order[start_i:start_i + cfg.batch_size])
            x = torch.from_numpy(images[idx])
            target = _targets(masks[idx])
            prompts = mixed_prompts(masks[idx], seed=cfg.seed * 6151 + step)
            out = model.forward_image(x, prompts, encoded=encoded.select(idx))
            loss = refiner_loss(model, out, target, cfg)
            _check_finite(loss, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            trainlog.losses.append(loss.item())
            epoch_losses.append(loss.item())
            step += 1
        trainlog.epoch_means.append(float(np.mean(epoch_losses)))
        log.info("refiner[%s] epoch %d loss %.4f", format_modules(modules), epoch, trainlog.epoch_means[-1])
    for p in params:
        p.requires_grad_(False)
    if holdout_batch is not None:
        trainlog.holdout.append(_holdout_loss(model, holdout_batch, cfg))
    trainlog.seconds = time.perf_counter() - start
    return model


@torch.no_grad()
def _holdout_loss(model, batch, cfg):
    x, target, prompts = batch
    out = model.forward_image(x, prompts)
    if out.refinement is not None:
        return float(total_loss(out.final_logits, out.refinement.intermediates, target,
                                cfg.lambda_final, cfg.lambda_inter))
    return float(cfg.lambda_final * mask_loss(out.final_logits, target))


# --- inference / evaluation -------------------------------------------------

def eval_prompts(masks, kind: str, point_count: int | None, seed: int):
    if kind == "mixed":
        return mixed_prompts(masks, seed)
    negatives = 0 if (kind == "points" and point_count is not None) else None
    return [sample_prompts(m, kind, seed=seed * 1_000_033 + i, num_points=point_count, num_negatives=negatives)
            for i, m in enumerate(masks)]


@torch.no_grad()
def predict_logits(model: RefinerModel, images: np.ndarray, prompts, batch_size: int = 8,
                   baseline: bool = False) -> np.ndarray:
    model.eval()
    outs = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.asarray(images[i:i + batch_size], dtype=np.float32))
        p = prompts[i:i + batch_size]
        logits = model.baseline_forward(x, p) if baseline else model.forward_image(x, p).final_logits
        outs.append(logits[:, 0].numpy())
    return np.concatenate(outs)


def evaluate(model: RefinerModel, images, masks, prompt_kind: str = "box", point_count: int | None = None,
             seed: int = 0, batch_size: int = 8, logits=None) -> dict:
    """Threshold final logits at 0 and aggregate mIoU / mBIoU (as percentages)."""
    masks = np.asarray(masks).astype(bool)
    if logits is None:
        prompts = eval_prompts(masks, prompt_kind, point_count, seed)
        logits = predict_logits(model, images, prompts, batch_size)
    preds = logits > 0
    miou, mbiou = miou_mbiou(list(preds), list(masks))
    return {"mIoU": 100 * miou, "mBIoU": 100 * mbiou, "n": len(masks), "prompt_kind": prompt_kind,
            "point_count": point_count}


def prompt_sweep(model, images, masks, counts=(1, 2, 5, 10), seed: int = 0) -> list:
    rows = []
    for count in counts:
        res = evaluate(model, images, masks, "points", count, seed)
        rows.append({"count": int(count), "mIoU": res["mIoU"], "mBIoU": res["mBIoU"]})
    return rows


def ablate(baseline: RefinerModel, train, test, rows=ABLATION_ROWS, train_config: TrainConfig | None = None,
           prompt_kind: str = "box", seed: int = 0, encoded: EncodedImages | None = None) -> list:
    """Train one refiner per module subset and evaluate each next to the frozen baseline."""
    images, masks = train
    t_images, t_masks = test
    if encoded is None:
        encoded = encode_dataset(baseline, images, with_crops=True)
    base = evaluate(baseline.set_modules(()), t_images, t_masks, prompt_kind, seed=seed)
    results = [{"modules": "none", **_metrics(base)}]
    for row in rows:
        tl = TrainLog()
        model = train_refiner(baseline, images, masks, row, train_config, encoded=encoded, trainlog=tl)
        res = evaluate(model, t_images, t_masks, prompt_kind, seed=seed)
        results.append({"modules": format_modules(parse_modules(row)), **_metrics(res),
                        "train_seconds": round(tl.seconds, 1)})
    return results


def _metrics(res):
    return {"mIoU": res["mIoU"], "mBIoU": res["mBIoU"]}


def evaluate_video(model: RefinerModel, sequences, prompt_kind: str = "box", seed: int = 0) -> dict:
    """Mean J, F and J&F (percentages) over sequences, prompting only frame 0."""
    js, fs = [], []
    for i, seq in enumerate(sequences):
        frames = torch.from_numpy(np.stack([s.image for s in seq]))
        prompt = sample_prompts(seq[0].gt_mask, prompt_kind, seed=seed * 7_919 + i)
        logits = model.propagate_video(frames, prompt)
        j, f, _ = jf_score(list(logits[:, 0].numpy() > 0), [s.gt_mask for s in seq])
        js.append(j)
        fs.append(f)
    j, f = 100 * float(np.mean(js)), 100 * float(np.mean(fs))
    return {"J": j, "F": f, "J&F": (j + f) / 2, "n": len(sequences)}


def format_table(rows, columns=None) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    columns = columns or list(rows[0])
    cells = [[c for c in columns]] + [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)
