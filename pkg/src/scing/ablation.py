"""Four-variant component ablation: static prompts, meta-net fusion, SVIP, SVIP + consistency."""

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import Config
from .data import load_images, load_manifest
from .evaluation import evaluate, fused_modality_gap
from .trainer import TrainData, run_stage1, run_stage2

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "metanet", "svip", "svip+pdca")


def variant_overrides(name: str, consistency_weight: float) -> dict:
    """Config overrides for one variant; nothing else differs between variants."""
    table = {
        "baseline": ("none", 0.0),
        "metanet": ("metanet", 0.0),
        "svip": ("svip", 0.0),
        "svip+pdca": ("svip", consistency_weight),
    }
    if name not in table:
        raise ValueError(f"unknown ablation variant {name!r}")
    fusion, weight = table[name]
    return {"svip": {"fusion": fusion}, "losses": {"consistency_weight": weight}}


@dataclass
class AblationPlan:
    config: Config
    seeds: list
    variants: tuple = VARIANTS
    consistency_weight: float = field(default=0.0)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("ablation needs at least one seed")
        if not self.consistency_weight:
            self.consistency_weight = self.config.losses.consistency_weight or 1.0

    def variant_config(self, name: str, seed: int, out_dir) -> Config:
        o = variant_overrides(name, self.consistency_weight)
        return self.config.replace(
            svip=o["svip"],
            losses=o["losses"],
            run={"seed": seed, "output_dir": str(Path(out_dir) / f"{name}_seed{seed}"), "save_every_epoch": False},
        )


def run_variant(config: Config, data: TrainData, manifest, images=None) -> dict:
    t0 = time.perf_counter()
    s1 = run_stage1(config, data)
    gap = fused_modality_gap(s1.model, data.images, data.labels)
    s2 = run_stage2(config, s1.checkpoint, data)
    report = evaluate(s2.checkpoint, manifest, images=images)
    return {
        "map": report.map,
        "rank1": report.rank1,
        "stage1_gap": gap,
        "consistency_first": 1.0 - s1.history[0]["l_con"],
        "consistency_last": 1.0 - s1.history[-1]["l_con"],
        "stage1_history": s1.history,
        "stage2_history": s2.history,
        "modality_gap": report.modality_gap,
        "seconds": time.perf_counter() - t0,
    }


def run_ablation(plan: AblationPlan, out_dir, manifest=None) -> dict:
    """Train and evaluate every variant for every seed on one shared dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest or load_manifest(plan.config.data.root)
    data = TrainData.from_manifest(manifest)
    images = {s: load_images(manifest, manifest.split(s)) for s in ("query", "gallery", "train")}
    runs = []
    for seed in plan.seeds:
        for name in plan.variants:
            cfg = plan.variant_config(name, seed, out_dir)
            result = run_variant(cfg, data, manifest, images)
            result.update(variant=name, seed=seed)
            logger.info("%s seed %d: mAP %.4f rank-1 %.4f", name, seed, result["map"], result["rank1"])
            runs.append(result)
    summary = summarize(runs, plan.variants)
    results = {"runs": runs, "summary": summary, "seeds": list(plan.seeds)}
    (out_dir / "ablation.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    write_table(summary, out_dir / "ablation.csv")
    return results


def summarize(runs, variants=VARIANTS) -> list:
    rows = []
    for name in variants:
        rs = [r for r in runs if r["variant"] == name]
        maps, r1s = [r["map"] for r in rs], [r["rank1"] for r in rs]
        rows.append({
            "variant": name,
            "map_mean": statistics.fmean(maps),
            "map_sd": statistics.stdev(maps) if len(maps) > 1 else 0.0,
            "rank1_mean": statistics.fmean(r1s),
            "rank1_sd": statistics.stdev(r1s) if len(r1s) > 1 else 0.0,
            "n_seeds": len(rs),
        })
    return rows


def write_table(summary, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path
