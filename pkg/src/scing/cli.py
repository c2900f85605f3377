"""Command-line entry point: ``scing {config,generate-data,train,eval,ablate,plot}``.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error, 4 numeric abort.
"""

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import config as config_io
from .ablation import AblationPlan, run_ablation
from .data import generate_dataset, load_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .evaluation import evaluate, export_inference, image_encoder_parameter_count, parameter_count, pca_projection
from .plotting import plot_ablation, plot_embeddings, plot_losses
from .trainer import TrainData, run_stage1, run_stage2

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("scing")


def _load_config(args):
    cfg = config_io.load(args.config) if args.config else config_io.Config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    if getattr(args, "data_root", None):
        overrides.setdefault("data", {})["root"] = args.data_root
    if getattr(args, "output_dir", None):
        overrides.setdefault("run", {})["output_dir"] = args.output_dir
    return cfg.replace(**overrides) if overrides else cfg


def cmd_config(args):
    text = config_io.dumps(config_io.full_scale_preset() if args.full_scale else config_io.Config())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_generate_data(args):
    cfg = _load_config(args)
    d = cfg.data
    seed = d.seed if args.seed is None else args.seed
    frac = d.occluded_fraction if args.occluded_fraction is None else args.occluded_fraction
    root = args.out or d.root
    m = generate_dataset(root, d.n_identities, d.n_cameras, d.images_per_id_per_cam, frac,
                         cfg.model.image_size, seed, d.n_eval_identities)
    digest = hashlib.sha256((Path(root) / "manifest.csv").read_bytes()).hexdigest()
    counts = {s: len(m.split(s)) for s in ("train", "query", "gallery")}
    print(f"dataset: {root}")
    print(f"rows: {len(m.rows)} (train {counts['train']}, query {counts['query']}, gallery {counts['gallery']})")
    print(f"occluded: {sum(r.occluded for r in m.rows)}")
    print(f"manifest sha256: {digest}")


def cmd_train(args):
    cfg = _load_config(args)
    out = Path(cfg.run.output_dir)
    resume = ckpt_io.load(args.resume) if args.resume else None
    data = TrainData.from_manifest(load_manifest(cfg.data.root))
    s1 = None
    if args.stage in ("1", "all"):
        r = run_stage1(cfg, data, resume=resume if resume and resume.stage == "stage1" else None)
        s1 = r.checkpoint
        print(f"stage 1 done: {out / 'stage1' / 'final.ckpt'}")
    if args.stage in ("2", "all"):
        if s1 is None:
            path = out / "stage1" / "final.ckpt"
            if not path.exists():
                raise CheckpointError(f"stage 2 needs a stage-1 checkpoint; none at {path}")
            s1 = ckpt_io.load(path)
        r = run_stage2(cfg, s1, data, resume=resume if resume and resume.stage == "stage2" else None)
        print(f"stage 2 done: {out / 'stage2' / 'final.ckpt'}")
    print(f"training log: {out / 'train_log.csv'}")


def cmd_eval(args):
    ckpt = ckpt_io.load(args.ckpt)
    manifest = load_manifest(args.manifest)
    ranks = tuple(int(k) for k in args.ranks.split(",")) if args.ranks else (1,)
    exclude = False if args.no_exclude_same_camera else None
    report = evaluate(ckpt, manifest, exclude, ranks)
    print(f"rank1 {report.rank1:.4f}  mAP {report.map:.4f}  queries {report.n_queries}  "
          f"excluded {report.n_excluded}  gap {report.modality_gap}")
    if args.json:
        report.save(args.json)
    if args.aps:
        report.save_aps(args.aps)
    if args.embeddings:
        pca_projection(ckpt, manifest, args.embeddings)
    if args.export_inference:
        export = export_inference(ckpt)
        ckpt_io.save(export, args.export_inference)
        n = parameter_count(export)
        print(f"inference export: {args.export_inference} ({n} parameters; image encoder "
              f"{image_encoder_parameter_count(ckpt)})")


def cmd_ablate(args):
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("--seeds needs at least one seed")
    out = Path(args.out or Path(cfg.run.output_dir) / "ablation")
    results = run_ablation(AblationPlan(cfg, seeds), out)
    plot_ablation(out / "ablation.csv", out / "ablation.png")
    for row in results["summary"]:
        print(f"{row['variant']:>10}: mAP {100 * row['map_mean']:.1f} ± {100 * row['map_sd']:.1f}  "
              f"Rank-1 {100 * row['rank1_mean']:.1f} ± {100 * row['rank1_sd']:.1f}")
    print(f"table: {out / 'ablation.csv'}  chart: {out / 'ablation.png'}")


def cmd_plot(args):
    made = []
    if args.log:
        made.append(plot_losses(args.log, Path(args.out) / "losses.png"))
    if args.embeddings:
        made.append(plot_embeddings(args.embeddings, Path(args.out) / "embeddings.png"))
    if args.ablation:
        made.append(plot_ablation(args.ablation, Path(args.out) / "ablation.png"))
    if not made:
        raise ConfigError("nothing to plot: pass --log, --embeddings or --ablation")
    for p in made:
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="scing", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="print the default configuration")
    c.add_argument("--full-scale", action="store_true", help="full-scale geometry and schedule")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("generate-data", help="render the synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--occluded-fraction", type=float)
    g.add_argument("--out", help="dataset directory (default: data.root)")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--config")
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--data-root")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on query/gallery")
    e.add_argument("ckpt")
    e.add_argument("manifest")
    e.add_argument("--json")
    e.add_argument("--aps", help="per-query AP CSV")
    e.add_argument("--embeddings", help="2-D PCA projection CSV")
    e.add_argument("--export-inference", help="write an image-encoder-only checkpoint")
    e.add_argument("--ranks", help="CMC ranks, e.g. 1,5,10")
    e.add_argument("--no-exclude-same-camera", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="four-variant ablation")
    a.add_argument("--config")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--data-root")
    a.add_argument("--output-dir")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render charts from logs and CSVs")
    pl.add_argument("--log")
    pl.add_argument("--embeddings")
    pl.add_argument("--ablation")
    pl.add_argument("--out", default=".")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
