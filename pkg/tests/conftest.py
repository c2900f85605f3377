import os

import pytest
import torch

os.environ.setdefault("SCING_THREADS", "1")
torch.set_num_threads(1)

from scing.config import Config  # noqa: E402
from scing.data import generate_dataset  # noqa: E402


def tiny_config(tmp_path=None, **sections) -> Config:
    """Small model and data geometry for fast end-to-end runs."""
    base = {
        "model": {"image_height": 32, "image_width": 16, "patch_size": 8, "width": 16, "depth": 1,
                  "heads": 2, "embed_dim": 8, "text_depth": 1, "text_heads": 2},
        "optim": {"stage1_epochs": 2, "stage2_epochs": 2},
        "data": {"n_identities": 12, "n_eval_identities": 4, "images_per_id_per_cam": 4,
                 "ids_per_batch": 4, "images_per_id": 2},
        "run": {"save_every_epoch": False},
    }
    if tmp_path is not None:
        base["run"]["output_dir"] = str(tmp_path / "run")
    for name, updates in sections.items():
        base.setdefault(name, {}).update(updates)
    return Config().replace(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    return generate_dataset(root, n_identities=12, n_cameras=2, images_per_id_per_cam=4,
                            occluded_fraction=0.4, geometry=(32, 16), seed=3, n_eval_identities=4)


@pytest.fixture
def tiny(tmp_path, tiny_dataset):
    return tiny_config(tmp_path, data={"root": str(tiny_dataset.root)})


ACCEPTANCE_LINES = []


def record(criterion: str, ok: bool, detail: str) -> None:
    """Keep one PASS/FAIL line per acceptance criterion for the terminal summary."""
    ACCEPTANCE_LINES.append(f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default synthetic benchmark and the full 3-seed, 4-variant ablation on it."""
    import time

    from scing.ablation import AblationPlan, run_ablation

    root = tmp_path_factory.mktemp("desk")
    cfg = Config()
    d = cfg.data
    manifest = generate_dataset(root / "data", d.n_identities, d.n_cameras, d.images_per_id_per_cam,
                                d.occluded_fraction, cfg.model.image_size, d.seed, d.n_eval_identities)
    cfg = cfg.replace(data={"root": str(root / "data")}, run={"output_dir": str(root / "runs")})
    t0 = time.perf_counter()
    results = run_ablation(AblationPlan(cfg, [0, 1, 2]), root / "ablation", manifest)
    return {"config": cfg, "manifest": manifest, "results": results, "root": root,
            "seconds": time.perf_counter() - t0}
