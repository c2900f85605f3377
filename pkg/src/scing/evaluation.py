"""Retrieval evaluation: cosine ranking, CMC Rank-k / mAP, modality gap and report I/O."""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_module
from .config import from_dict
from .data import DatasetManifest, load_images
from .encoders import ImageEncoder, count_parameters
from .errors import CheckpointError, DataError, NumericError
from .model import ScingModel
from .trainer import DTYPES, configure_threads, encode_images, model_from_checkpoint


def cosine_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine distance undefined for a zero vector")
    return float(1.0 - a @ b / (na * nb))


def _normalize_rows(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if (n == 0).any():
        raise NumericError("cosine distance undefined for a zero vector")
    return x / n


@dataclass
class Ranking:
    order: np.ndarray
    positive: np.ndarray
    valid: np.ndarray


def rank_gallery(query, query_id, query_cam, gallery, gallery_ids, gallery_cams,
                 exclude_same_camera=True) -> Ranking:
    """Sort the gallery by ascending cosine distance to ``query`` (ties by gallery index).

    ``positive`` and ``valid`` are aligned with ``order``. Gallery entries
    sharing identity and camera with the query are invalid when
    ``exclude_same_camera`` is set.
    """
    gallery = np.atleast_2d(gallery)
    if gallery.shape[0] == 0:
        raise DataError("empty gallery")
    # Row-wise reduction rather than BLAS gemv: identical rows must get identical
    # distances so ties fall back to gallery index.
    dist = 1.0 - (_normalize_rows(gallery) * _normalize_rows(query)).sum(axis=1)
    order = np.argsort(dist, kind="stable")
    ids, cams = np.asarray(gallery_ids)[order], np.asarray(gallery_cams)[order]
    same_id = ids == query_id
    valid = ~(same_id & (cams == query_cam)) if exclude_same_camera else np.ones(len(order), bool)
    return Ranking(order, same_id & valid, valid)


@dataclass
class RetrievalMetrics:
    rank1: float
    mAP: float
    aps: list
    n_evaluated: int
    n_excluded: int
    cmc: dict = field(default_factory=dict)


def average_precision(positive, valid) -> float | None:
    """AP over valid entries; ``None`` when the ranking holds no valid positive."""
    hits = np.asarray(positive)[np.asarray(valid)]
    n_pos = int(hits.sum())
    if n_pos == 0:
        return None
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def cmc_map(rankings, ranks=(1,)) -> RetrievalMetrics:
    ranks = sorted(set(ranks) | {1})
    aps, cmc_hits, excluded = [], {k: 0 for k in ranks}, 0
    for r in rankings:
        ap = average_precision(r.positive, r.valid)
        if ap is None:
            excluded += 1
            continue
        aps.append(ap)
        first = int(np.flatnonzero(np.asarray(r.positive)[np.asarray(r.valid)])[0])
        for k in ranks:
            cmc_hits[k] += first < k
    if not aps:
        raise DataError("no evaluable queries (every query lacks a valid positive)")
    n = len(aps)
    cmc = {k: cmc_hits[k] / n for k in ranks}
    return RetrievalMetrics(
        rank1=cmc[1],
        mAP=float(np.mean(aps)),
        aps=aps,
        n_evaluated=n,
        n_excluded=excluded,
        cmc=cmc,
    )


def modality_gap(descriptors, identities, text_embeddings) -> float:
    """Mean cosine distance between each image descriptor and its identity's text embedding.

    ``text_embeddings`` maps identity -> vector (a dict, or an array indexed by identity).
    """
    g = _normalize_rows(descriptors)
    rows = []
    for y in identities:
        try:
            rows.append(np.asarray(text_embeddings[int(y)], dtype=np.float64))
        except (KeyError, IndexError):
            raise KeyError(f"no text embedding for identity {int(y)}") from None
    w = _normalize_rows(np.stack(rows))
    return float(np.mean(1.0 - (g * w).sum(axis=1)))


@torch.no_grad()
def fused_modality_gap(model: ScingModel, images, labels) -> float:
    """Gap between each image and the text embedding its own features condition.

    For image-independent prompts this equals :func:`modality_gap` with the
    class embeddings.
    """
    dtype = model.prompts.tokens.dtype
    V, g = encode_images(model.image_encoder, images, dtype)
    y = torch.as_tensor(labels, dtype=torch.long)
    w = torch.cat([model.text_features(y[i:i + 256], V[i:i + 256]) for i in range(0, len(y), 256)])
    return float(np.mean(1.0 - (_normalize_rows(g.numpy()) * _normalize_rows(w.numpy())).sum(axis=1)))


@dataclass
class EvalReport:
    rank1: float
    map: float
    aps: list
    modality_gap: float | None
    n_queries: int
    n_excluded: int
    gallery_size: int
    cmc: dict
    checkpoint: str
    seed: int
    config: dict

    def to_json(self) -> str:
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def save_aps(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query", "ap"])
            for i, ap in enumerate(self.aps):
                w.writerow([i, repr(ap)])
        return path


def export_inference(ckpt: Checkpoint) -> Checkpoint:
    """Slice holding only image-encoder weights."""
    arrays = {k: v for k, v in ckpt.arrays.items() if k.startswith("image.")}
    if not arrays:
        raise CheckpointError("checkpoint lacks image-encoder fields")
    meta = {"config": ckpt.meta["config"], "source_stage": ckpt.stage, "epoch": ckpt.meta.get("epoch")}
    return Checkpoint(stage="inference", arrays=arrays, meta=meta)


def image_encoder_from_checkpoint(ckpt: Checkpoint) -> ImageEncoder:
    if "config" not in ckpt.meta:
        raise CheckpointError("checkpoint lacks field 'config'")
    config = from_dict(ckpt.meta["config"])
    mc = config.model
    enc = ImageEncoder(mc.image_size, mc.patch_size, mc.width, mc.depth, mc.heads, mc.embed_dim,
                       mc.init_temperature).to(DTYPES[config.run.dtype])
    load_module(enc, {k[len("image."):]: v for k, v in ckpt.arrays.items() if k.startswith("image.")})
    enc.eval()
    return enc


def parameter_count(ckpt: Checkpoint) -> int:
    return int(sum(np.asarray(v).size for k, v in ckpt.arrays.items() if not k.startswith("optim.")))


def _class_text(ckpt: Checkpoint):
    if "stage2.class_text" in ckpt.arrays:
        return ckpt.arrays["stage2.class_text"]
    if "prompt.K" not in ckpt.meta:
        return None
    with torch.no_grad():
        return model_from_checkpoint(ckpt).class_text_features().numpy()


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, exclude_same_camera=None, ranks=(1,),
             images=None) -> EvalReport:
    """Embed query and gallery with the image encoder alone and score retrieval.

    The modality gap needs class text embeddings and is measured on the train
    split; it is ``None`` for an inference-only export. ``images`` may carry
    preloaded ``{split: array}`` pixels.
    """
    configure_threads()
    config = from_dict(ckpt.meta["config"])
    if exclude_same_camera is None:
        exclude_same_camera = config.run.exclude_same_camera
    dtype = DTYPES[config.run.dtype]
    encoder = image_encoder_from_checkpoint(ckpt)
    images = images or {}

    def embed(split):
        rows = manifest.split(split)
        if not rows:
            raise DataError(f"manifest has no {split} rows")
        pix = images.get(split)
        if pix is None:
            pix = load_images(manifest, rows)
        _, g = encode_images(encoder, pix, dtype)
        return rows, g.double().numpy()

    q_rows, q = embed("query")
    g_rows, gal = embed("gallery")
    g_ids = np.array([r.identity for r in g_rows])
    g_cams = np.array([r.camera for r in g_rows])
    rankings = [rank_gallery(q[i], r.identity, r.camera, gal, g_ids, g_cams, exclude_same_camera)
                for i, r in enumerate(q_rows)]
    metrics = cmc_map(rankings, ranks)

    gap = None
    W = _class_text(ckpt)
    if W is not None:
        train_rows, train_g = embed("train")
        classes = manifest.train_classes()
        gap = modality_gap(train_g, [classes[r.identity] for r in train_rows], W)

    return EvalReport(
        rank1=metrics.rank1,
        map=metrics.mAP,
        aps=metrics.aps,
        modality_gap=gap,
        n_queries=metrics.n_evaluated,
        n_excluded=metrics.n_excluded,
        gallery_size=len(g_rows),
        cmc=metrics.cmc,
        checkpoint=ckpt.digest(),
        seed=config.run.seed,
        config=ckpt.meta["config"],
    )


def pca_projection(ckpt: Checkpoint, manifest: DatasetManifest, path, split="train") -> Path:
    """Write a 2-D PCA projection of image descriptors and class text embeddings to CSV."""
    config = from_dict(ckpt.meta["config"])
    encoder = image_encoder_from_checkpoint(ckpt)
    rows = manifest.split(split)
    _, g = encode_images(encoder, load_images(manifest, rows), DTYPES[config.run.dtype])
    points = [("image", r.identity, v) for r, v in zip(rows, g.double().numpy())]
    W = _class_text(ckpt)
    if W is not None:
        inv = {k: pid for pid, k in manifest.train_classes().items()}
        points += [("text", inv.get(k, k), v) for k, v in enumerate(np.asarray(W, dtype=np.float64))]
    X = np.stack([p[2] for p in points])
    X = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    xy = X @ vt[:2].T
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "identity", "x", "y"])
        for (kind, pid, _), (x, y) in zip(points, xy):
            w.writerow([kind, pid, f"{x:.8g}", f"{y:.8g}"])
    return path


def image_encoder_parameter_count(ckpt: Checkpoint) -> int:
    return count_parameters(image_encoder_from_checkpoint(ckpt))
