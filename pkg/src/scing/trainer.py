"""Two-stage training: prompt/fusion alignment, then image-encoder tuning against frozen class text."""

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .config import Config, OptimConfig, from_dict
from .data import BatchSpec, DatasetManifest, load_images, load_manifest, sample_batch
from .errors import CheckpointError, DataError, NumericError
from .losses import (
    batch_triplet_loss,
    ce_loss,
    clip_contrastive,
    consistency_loss,
    stage1_loss,
    stage2_loss,
)
from .model import ScingModel, load_model_arrays, model_arrays, prompt_meta
from .perturb import feature_dropout, image_stream, perturb_image

logger = logging.getLogger(__name__)

LOG_FIELDS = ("stage", "epoch", "step", "l_clip", "l_con", "l_ce", "l_trp", "total")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingAborted(NumericError):
    pass


def configure_threads() -> int:
    n = int(os.environ.get("SCING_THREADS", "1"))
    torch.set_num_threads(max(1, n))
    return n


def effective_milestones(optim: OptimConfig, epochs: int):
    """Milestones rescaled from ``reference_epochs`` to ``epochs`` (floored, at least 1)."""
    if epochs == optim.reference_epochs:
        ms = list(optim.milestones)
    else:
        ms = [max(1, m * epochs // optim.reference_epochs) for m in optim.milestones]
    out = []
    for m in ms:
        if m < epochs and (not out or m > out[-1]):
            out.append(m)
    return out


def lr_at(config: Config, epoch: int, stage: int = 1) -> float:
    o = config.optim
    epochs = o.stage1_epochs if stage == 1 else o.stage2_epochs
    base = o.stage1_lr if stage == 1 else o.stage2_lr
    passed = sum(1 for m in effective_milestones(o, epochs) if m <= epoch)
    return base * o.lr_decay**passed


@dataclass
class TrainData:
    images: np.ndarray
    labels: np.ndarray
    cameras: np.ndarray
    n_classes: int

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest):
        rows = manifest.split("train")
        if not rows:
            raise DataError("manifest has no train rows")
        classes = manifest.train_classes()
        return cls(
            images=load_images(manifest, rows),
            labels=np.array([classes[r.identity] for r in rows]),
            cameras=np.array([r.camera for r in rows]),
            n_classes=len(classes),
        )

    def steps_per_epoch(self, batch: BatchSpec) -> int:
        return max(1, len(self.labels) // batch.size)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    model: ScingModel
    history: list = field(default_factory=list)


def to_batch_tensor(images, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(images))).permute(0, 3, 1, 2).to(dtype)


def _optimizer_state(opt: torch.optim.Optimizer):
    state = opt.state_dict()
    arrays, meta = {}, {"param_groups": state["param_groups"], "steps": {}}
    for idx, s in state["state"].items():
        meta["steps"][str(idx)] = float(s["step"])
        for key in ("exp_avg", "exp_avg_sq"):
            arrays[f"optim.{idx}.{key}"] = s[key].detach().cpu().numpy().copy()
    return arrays, meta


def _restore_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint):
    meta = ckpt.meta.get("optimizer")
    if not meta:
        raise CheckpointError("checkpoint lacks field 'optimizer'")
    state = {}
    for idx, step in meta["steps"].items():
        state[int(idx)] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(ckpt.arrays[f"optim.{idx}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"optim.{idx}.exp_avg_sq"].copy()),
        }
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def make_checkpoint(stage, model, config, epoch, optimizer=None, rng=None, metrics=None, extra=None):
    arrays = model_arrays(model)
    meta = {"config": config.to_dict(), "epoch": epoch, "fusion": model.fusion, "metrics": metrics or {}}
    meta.update(prompt_meta(model))
    if optimizer is not None:
        opt_arrays, opt_meta = _optimizer_state(optimizer)
        arrays.update(opt_arrays)
        meta["optimizer"] = opt_meta
    if rng is not None:
        meta["rng"] = rng.bit_generator.state
    arrays.update(extra or {})
    return Checkpoint(stage=stage, arrays=arrays, meta=meta)


def model_from_checkpoint(ckpt: Checkpoint, config: Config | None = None) -> ScingModel:
    config = config or from_dict(ckpt.meta["config"])
    n_classes = ckpt.meta.get("prompt.K")
    if n_classes is None:
        raise CheckpointError("checkpoint lacks field 'prompt.K'")
    model = ScingModel(config, n_classes).to(DTYPES[config.run.dtype])
    load_model_arrays(model, ckpt.arrays)
    return model


class CsvLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)

    def write(self, row: dict):
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [row.get(k, "") if not isinstance(row.get(k), float) else f"{row[k]:.8g}" for k in LOG_FIELDS]
            )


def _check_finite(stage, epoch, step, parts: dict):
    if not all(math.isfinite(v) for v in parts.values()):
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        raise TrainingAborted(f"non-finite loss in stage {stage}, epoch {epoch}, step {step}: {detail}")


def _adam(params, lr, optim: OptimConfig):
    return torch.optim.Adam(params, lr=lr, betas=tuple(optim.betas), weight_decay=optim.weight_decay)


def _stage_dir(config: Config, stage: int, out_dir=None):
    return Path(out_dir or config.run.output_dir) / f"stage{stage}"


@torch.no_grad()
def encode_images(encoder, images, dtype, batch_size=256):
    feats, descs = [], []
    for i in range(0, len(images), batch_size):
        v, g = encoder(to_batch_tensor(images[i:i + batch_size], dtype))
        feats.append(v)
        descs.append(g)
    return torch.cat(feats), torch.cat(descs)


def _perturbed_features(model, data, idx, config, seed, epoch, step, dtype):
    """Encode two perturbed views of each batch image and apply feature dropout."""
    views = []
    for view in (1, 2):
        imgs = [
            perturb_image(data.images[i], config.perturb, image_stream(seed, 1, epoch, step, n, view))
            for n, i in enumerate(idx)
        ]
        with torch.set_grad_enabled(config.optim.stage1_train_image):
            V, _ = model.image_encoder(to_batch_tensor(imgs, dtype))
        drop_rng = image_stream(seed, 1, epoch, step, 10_000 + view)
        views.append(feature_dropout(V, config.perturb.feature_dropout, drop_rng))
    return views


def run_stage1(config: Config, data: TrainData | None = None, resume: Checkpoint | None = None,
               out_dir=None, log_path=None) -> StageResult:
    """Train prompts, fusion parameters and the logit scale.

    The text tower stays frozen. The image tower is trained too when
    ``optim.stage1_train_image`` is set, otherwise only its logit scale moves.
    """
    configure_threads()
    dtype = DTYPES[config.run.dtype]
    if data is None:
        data = TrainData.from_manifest(load_manifest(config.data.root))
    seed = config.run.seed
    model = ScingModel(config, data.n_classes).to(dtype)
    for p in model.parameters():
        p.requires_grad_(False)
    trainable = [model.prompts.tokens, model.image_encoder.logit_scale]
    if config.optim.stage1_train_image:
        trainable = [model.prompts.tokens] + list(model.image_encoder.parameters())
    if model.fusion == "svip":
        trainable += list(model.svip.parameters())
    elif model.fusion == "metanet":
        trainable += list(model.meta_net.parameters())
    for p in trainable:
        p.requires_grad_(True)
    optimizer = _adam(trainable, lr_at(config, 0, 1), config.optim)

    start = 0
    if resume is not None:
        if resume.stage != "stage1":
            raise CheckpointError(f"cannot resume stage 1 from a {resume.stage!r} checkpoint")
        load_model_arrays(model, resume.arrays)
        _restore_optimizer(optimizer, resume)
        start = resume.meta["epoch"] + 1

    batch = BatchSpec(config.data.ids_per_batch, config.data.images_per_id)
    steps = data.steps_per_epoch(batch)
    frozen_image = not config.optim.stage1_train_image
    if frozen_image:
        V_all, g_all = encode_images(model.image_encoder, data.images, dtype)
    weight = config.losses.consistency_weight
    pseed = seed + config.perturb.seed
    stage_dir = _stage_dir(config, 1, out_dir)
    log = CsvLog(log_path if log_path is not None else Path(out_dir or config.run.output_dir) / "train_log.csv")
    history = []
    ckpt = resume
    for epoch in range(start, config.optim.stage1_epochs):
        for group in optimizer.param_groups:
            group["lr"] = lr_at(config, epoch, 1)
        rng = image_stream(seed, 1, epoch)
        sums = {"l_clip": 0.0, "l_con": 0.0, "total": 0.0}
        for step in range(steps):
            idx = sample_batch(data.labels, batch, rng)
            y = torch.from_numpy(data.labels[idx])
            if frozen_image:
                V, g = V_all[idx], g_all[idx]
            else:
                V, g = model.image_encoder(to_batch_tensor(data.images[idx], dtype))
            w = model.text_features(y, V)
            if model.fusion == "none":
                l_con = torch.zeros((), dtype=dtype)
            else:
                V1, V2 = _perturbed_features(model, data, idx, config, pseed, epoch, step, dtype)
                l_con = consistency_loss(w, model.text_features(y, V1), model.text_features(y, V2))
            l_clip = clip_contrastive(g, w, y, model.temperature)
            total = stage1_loss(l_clip, l_con, weight) if weight else l_clip
            parts = {"l_clip": l_clip.item(), "l_con": l_con.item(), "total": total.item()}
            _check_finite(1, epoch, step, parts)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for k in sums:
                sums[k] += parts[k]
            log.write({"stage": 1, "epoch": epoch, "step": epoch * steps + step, **parts})
        means = {k: v / steps for k, v in sums.items()}
        means.update(epoch=epoch, lr=optimizer.param_groups[0]["lr"], temperature=model.temperature.item())
        history.append(means)
        logger.info("stage1 epoch %d: %s", epoch, means)
        last = epoch == config.optim.stage1_epochs - 1
        if config.run.save_every_epoch or last:
            ckpt = make_checkpoint("stage1", model, config, epoch, optimizer, rng, metrics=means)
            if config.run.save_every_epoch:
                ckpt_io.save(ckpt, stage_dir / f"epoch_{epoch:03d}.ckpt")
    if ckpt is None:
        raise CheckpointError("stage 1 produced no checkpoint (resumed past the final epoch?)")
    ckpt_io.save(ckpt, stage_dir / "final.ckpt")
    for p in model.parameters():
        p.requires_grad_(False)
    return StageResult(ckpt, model, history)


@torch.no_grad()
def frozen_class_text(model: ScingModel, config: Config, data: TrainData) -> torch.Tensor:
    """Image-independent class embeddings used as stage-2 targets."""
    if config.svip.class_text == "raw" or model.fusion == "none":
        return model.class_text_features()
    V, _ = encode_images(model.image_encoder, data.images, model.prompts.tokens.dtype)
    y = torch.from_numpy(data.labels)
    w = torch.cat([model.text_features(y[i:i + 256], V[i:i + 256]) for i in range(0, len(y), 256)])
    sums = torch.zeros(model.n_classes, w.shape[1], dtype=w.dtype).index_add_(0, y, w)
    return torch.nn.functional.normalize(sums, dim=-1)


def stage2_perturb(config: Config):
    return dataclasses.replace(config.perturb, occlude_prob=0.0, feature_dropout=0.0)


def run_stage2(config: Config, stage1_ckpt: Checkpoint, data: TrainData | None = None,
               resume: Checkpoint | None = None, out_dir=None, log_path=None) -> StageResult:
    """Fine-tune every image-encoder weight (except the logit scale) under CE + triplet."""
    configure_threads()
    if stage1_ckpt is None or stage1_ckpt.stage != "stage1":
        raise CheckpointError("stage 2 needs a stage-1 checkpoint")
    dtype = DTYPES[config.run.dtype]
    if data is None:
        data = TrainData.from_manifest(load_manifest(config.data.root))
    if stage1_ckpt.meta.get("prompt.K") != data.n_classes:
        raise CheckpointError(
            f"field 'prompt.K': checkpoint has {stage1_ckpt.meta.get('prompt.K')} classes, data has {data.n_classes}"
        )
    seed = config.run.seed
    model = model_from_checkpoint(stage1_ckpt, config)
    for p in model.parameters():
        p.requires_grad_(False)
    W = frozen_class_text(model, config, data)
    scale = config.losses.ce_scale or model.image_encoder.logit_scale.exp().item()
    trainable = [p for n, p in model.image_encoder.named_parameters() if n != "logit_scale"]
    for p in trainable:
        p.requires_grad_(True)
    optimizer = _adam(trainable, lr_at(config, 0, 2), config.optim)

    start = 0
    if resume is not None:
        if resume.stage != "stage2":
            raise CheckpointError(f"cannot resume stage 2 from a {resume.stage!r} checkpoint")
        load_model_arrays(model, resume.arrays)
        _restore_optimizer(optimizer, resume)
        W = torch.from_numpy(resume.arrays["stage2.class_text"]).to(dtype)
        start = resume.meta["epoch"] + 1

    batch = BatchSpec(config.data.ids_per_batch, config.data.images_per_id)
    steps = data.steps_per_epoch(batch)
    aug = stage2_perturb(config)
    pseed = seed + config.perturb.seed
    lc = config.losses
    stage_dir = _stage_dir(config, 2, out_dir)
    log = CsvLog(log_path if log_path is not None else Path(out_dir or config.run.output_dir) / "train_log.csv")
    extra = {"stage2.class_text": W.detach().cpu().numpy().copy()}
    history = []
    ckpt = resume
    for epoch in range(start, config.optim.stage2_epochs):
        for group in optimizer.param_groups:
            group["lr"] = lr_at(config, epoch, 2)
        rng = image_stream(seed, 2, epoch)
        sums = {"l_ce": 0.0, "l_trp": 0.0, "total": 0.0}
        model.image_encoder.train()
        for step in range(steps):
            idx = sample_batch(data.labels, batch, rng)
            imgs = [perturb_image(data.images[i], aug, image_stream(pseed, 2, epoch, step, n))
                    for n, i in enumerate(idx)]
            y = torch.from_numpy(data.labels[idx])
            _, g = model.image_encoder(to_batch_tensor(imgs, dtype))
            l_ce = ce_loss(g, W, y, scale)
            l_trp = batch_triplet_loss(g, W, y, lc.margin, lc.triplet_orientation, lc.negative_mining)
            total = stage2_loss(l_ce, l_trp, lc.triplet_weight)
            parts = {"l_ce": l_ce.item(), "l_trp": l_trp.item(), "total": total.item()}
            _check_finite(2, epoch, step, parts)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for k in sums:
                sums[k] += parts[k]
            log.write({"stage": 2, "epoch": epoch, "step": epoch * steps + step, **parts})
        means = {k: v / steps for k, v in sums.items()}
        means.update(epoch=epoch, lr=optimizer.param_groups[0]["lr"])
        history.append(means)
        logger.info("stage2 epoch %d: %s", epoch, means)
        last = epoch == config.optim.stage2_epochs - 1
        if config.run.save_every_epoch or last:
            ckpt = make_checkpoint("stage2", model, config, epoch, optimizer, rng, metrics=means, extra=extra)
            if config.run.save_every_epoch:
                ckpt_io.save(ckpt, stage_dir / f"epoch_{epoch:03d}.ckpt")
    if ckpt is None:
        raise CheckpointError("stage 2 produced no checkpoint (resumed past the final epoch?)")
    ckpt_io.save(ckpt, stage_dir / "final.ckpt")
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return StageResult(ckpt, model, history)
