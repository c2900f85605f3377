"""Synthetic person-retrieval benchmark: rendering, manifests and the P x K batch sampler."""

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

MANIFEST_FIELDS = ("path", "identity", "camera", "occluded", "split")
MIN_COLOR_GAP = 0.15


@dataclass(frozen=True)
class Row:
    path: str
    identity: int
    camera: int
    occluded: bool
    split: str


@dataclass
class IdentitySpec:
    identity: int
    head: tuple
    torso: tuple
    legs: tuple
    torso_width: float
    leg_width: float
    head_size: float
    pattern: int

    def colors(self):
        return np.array([*self.head, *self.torso, *self.legs])


@dataclass
class BatchSpec:
    ids_per_batch: int = 16
    images_per_id: int = 4

    @property
    def size(self) -> int:
        return self.ids_per_batch * self.images_per_id


@dataclass
class DatasetManifest:
    root: Path
    rows: list
    seed: int
    geometry: tuple

    def split(self, name: str):
        return [r for r in self.rows if r.split == name]

    def indices(self, name: str):
        return [i for i, r in enumerate(self.rows) if r.split == name]

    def train_classes(self):
        """Map global identity ids of the train split onto contiguous class indices."""
        ids = sorted({r.identity for r in self.rows if r.split == "train"})
        return {pid: k for k, pid in enumerate(ids)}


def _sample_identities(n, rng):
    specs = []
    while len(specs) < n:
        colors = rng.uniform(0.05, 0.95, size=9)
        if any(np.abs(colors - s.colors()).max() < MIN_COLOR_GAP for s in specs):
            continue
        specs.append(
            IdentitySpec(
                identity=len(specs),
                head=tuple(colors[0:3]),
                torso=tuple(colors[3:6]),
                legs=tuple(colors[6:9]),
                torso_width=float(rng.uniform(0.7, 0.92)),
                leg_width=float(rng.uniform(0.2, 0.28)),
                head_size=float(rng.uniform(0.16, 0.22)),
                pattern=int(rng.integers(0, 4)),
            )
        )
    return specs


def _camera_params(n_cameras, rng):
    cams = []
    for _ in range(n_cameras):
        cams.append(
            {
                "background": 0.5 + rng.uniform(-0.15, 0.15, size=3),
                "cast": rng.uniform(0.9, 1.1, size=3),
                "brightness": float(rng.uniform(0.85, 1.1)),
                "shift": float(rng.uniform(-2.0, 2.0)),
                "scale": float(rng.uniform(0.88, 1.0)),
            }
        )
    return cams


def render_person(spec: IdentitySpec, cam: dict, geometry, rng, occlude: bool = False):
    """Render one ``H x W x 3`` float image in [0, 1]."""
    h, w = geometry
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    grad = np.linspace(0.85, 1.15, h)[:, None, None]
    img = np.clip(cam["background"] * grad + rng.normal(0, 0.04, size=(h, w, 3)), 0, 1)

    scale = cam["scale"] * rng.uniform(0.94, 1.04)
    cx = w / 2 + cam["shift"] + rng.uniform(-2.0, 2.0)
    top = h * (0.04 + rng.uniform(0.0, 0.04))
    body_h = h * 0.92 * scale

    head_r = spec.head_size * body_h / 2
    head_cy = top + head_r
    head = ((xx - cx) / (head_r * 1.1)) ** 2 + ((yy - head_cy) / head_r) ** 2 <= 1.0

    torso_top = head_cy + head_r
    torso_bot = top + 0.58 * body_h
    half_w = spec.torso_width * w / 2
    torso = (yy >= torso_top) & (yy < torso_bot) & (np.abs(xx - cx) <= half_w)

    leg_bot = min(top + body_h, h)
    leg_half = spec.leg_width * w / 2
    gap = leg_half * 0.15
    legs = (yy >= torso_bot) & (yy < leg_bot) & (
        (np.abs(xx - (cx - gap - leg_half)) <= leg_half) | (np.abs(xx - (cx + gap + leg_half)) <= leg_half)
    )

    torso_color = np.broadcast_to(np.asarray(spec.torso), (h, w, 3)).copy()
    alt = np.asarray(spec.torso) * 0.55
    if spec.pattern == 1:
        torso_color[(yy // 3).astype(int) % 2 == 1] = alt
    elif spec.pattern == 2:
        torso_color[(xx // 3).astype(int) % 2 == 1] = alt
    elif spec.pattern == 3:
        torso_color[((yy // 3) + (xx // 3)).astype(int) % 2 == 1] = alt

    img[legs] = spec.legs
    img[torso] = torso_color[torso]
    img[head] = spec.head

    img = img * cam["cast"] * cam["brightness"] * rng.uniform(0.95, 1.05)
    img = img + rng.normal(0, 0.02, size=img.shape)

    if occlude:
        frac = rng.uniform(0.25, 0.5)
        color = rng.uniform(0, 1, size=3)
        if rng.random() < 0.5:
            band = max(1, int(round(frac * h)))
            img[h - band:] = color
        else:
            band = max(1, int(round(frac * w * 1.6)))
            band = min(band, w - 1)
            x0 = 0 if rng.random() < 0.5 else w - band
            img[:, x0:x0 + band] = color
    return np.clip(img, 0, 1)


def _assign_splits(n_identities, n_eval, n_cameras, per_cam, occluded_fraction, rng):
    """Return (identity, camera, index, split, occluded) tuples in a fixed order."""
    order = rng.permutation(n_identities)
    eval_ids = set(order[:n_eval].tolist())
    n_query = max(1, per_cam // 6)
    entries = []
    for pid in range(n_identities):
        for cam in range(n_cameras):
            for j in range(per_cam):
                if pid in eval_ids:
                    split = "query" if j < n_query else "gallery"
                else:
                    split = "train"
                entries.append([pid, cam, j, split, False])
    # exact counts: occluded_fraction of query rows, half that rate on train rows
    for split, frac in (("query", occluded_fraction), ("train", occluded_fraction / 2)):
        idx = [i for i, e in enumerate(entries) if e[3] == split]
        k = int(round(frac * len(idx)))
        for i in sorted(rng.choice(len(idx), size=k, replace=False).tolist()):
            entries[idx[i]][4] = True
    return entries


def generate_dataset(
    root,
    n_identities: int = 70,
    n_cameras: int = 2,
    images_per_id_per_cam: int = 12,
    occluded_fraction: float = 0.4,
    geometry=(64, 32),
    seed: int = 0,
    n_eval_identities: int | None = None,
) -> DatasetManifest:
    """Render the benchmark under ``root`` and write ``manifest.csv`` plus ``gen.json``.

    Train and evaluation identities are disjoint. Each eval identity gives
    ``max(1, images_per_id_per_cam // 6)`` queries per camera and the rest go
    to the gallery, so with two or more cameras every query has a
    cross-camera positive.
    """
    if n_identities < 2:
        raise ConfigError("n_identities must be >= 2")
    if not 0.0 <= occluded_fraction <= 1.0:
        raise ConfigError("occluded_fraction must lie in [0, 1]")
    if n_eval_identities is None:
        n_eval_identities = max(1, n_identities * 2 // 7)
    if not 1 <= n_eval_identities < n_identities:
        raise ConfigError("n_eval_identities must leave at least one train identity")
    if images_per_id_per_cam < 2 or n_cameras < 1:
        raise ConfigError("need at least 2 images per identity per camera and one camera")

    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    specs = _sample_identities(n_identities, rng)
    cams = _camera_params(n_cameras, rng)
    entries = _assign_splits(n_identities, n_eval_identities, n_cameras, images_per_id_per_cam,
                             occluded_fraction, rng)

    rows = []
    for row_index, (pid, cam, j, split, occ) in enumerate(entries):
        stream = np.random.default_rng(np.random.SeedSequence([seed, 1, row_index]))
        img = render_person(specs[pid], cams[cam], geometry, stream, occlude=occ)
        rel = f"images/{pid:04d}_c{cam}_{j:03d}.png"
        try:
            Image.fromarray(np.round(img * 255).astype(np.uint8), mode="RGB").save(root / rel)
        except OSError as exc:
            raise DataError(f"cannot write {root / rel}: {exc}") from exc
        rows.append(Row(rel, pid, cam, occ, split))

    manifest = DatasetManifest(root, rows, seed, tuple(geometry))
    write_manifest(manifest)
    sidecar = {
        "n_identities": n_identities,
        "n_eval_identities": n_eval_identities,
        "n_cameras": n_cameras,
        "images_per_id_per_cam": images_per_id_per_cam,
        "occluded_fraction": occluded_fraction,
        "geometry": list(geometry),
        "seed": seed,
        "identities": [asdict(s) for s in specs],
    }
    with open(root / "gen.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return manifest


def write_manifest(manifest: DatasetManifest) -> Path:
    path = Path(manifest.root) / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in manifest.rows:
            writer.writerow([r.path, r.identity, r.camera, int(r.occluded), r.split])
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_FIELDS)}")
        rows = [
            Row(d["path"], int(d["identity"]), int(d["camera"]), bool(int(d["occluded"])), d["split"])
            for d in reader
        ]
    seed, geometry = 0, None
    sidecar = path.parent / "gen.json"
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        seed, geometry = meta.get("seed", 0), tuple(meta.get("geometry", ()))
    return DatasetManifest(path.parent, rows, seed, geometry)


def load_images(manifest: DatasetManifest, rows=None) -> np.ndarray:
    """Read rows (default: all) into an ``(N, H, W, 3)`` float32 array in [0, 1]."""
    rows = manifest.rows if rows is None else rows
    out = []
    for r in rows:
        p = Path(manifest.root) / r.path
        if not p.exists():
            raise DataError(f"image missing: {p}")
        with Image.open(p) as im:
            out.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    return np.stack(out)


def sample_batch(labels, spec: BatchSpec, rng: np.random.Generator):
    """Pick ``P`` distinct identities then ``K`` row indices for each.

    ``labels`` holds one identity per candidate row. Rows are drawn without
    replacement unless an identity has fewer than ``K`` of them.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < spec.ids_per_batch:
        raise ConfigError(f"need {spec.ids_per_batch} identities for a batch, have {len(ids)}")
    chosen = rng.choice(ids, size=spec.ids_per_batch, replace=False)
    batch = []
    for pid in chosen:
        pool = np.flatnonzero(labels == pid)
        replace = len(pool) < spec.images_per_id
        batch.extend(rng.choice(pool, size=spec.images_per_id, replace=replace).tolist())
    return batch


def sample_batch_items(manifest: DatasetManifest, spec: BatchSpec, rng, images=None):
    """:func:`sample_batch` over the train split, returning ``(image, identity, camera)`` triples."""
    train = manifest.split("train")
    picks = sample_batch([r.identity for r in train], spec, rng)
    if images is None:
        loaded = load_images(manifest, [train[i] for i in picks])
        return [(loaded[n], train[i].identity, train[i].camera) for n, i in enumerate(picks)]
    return [(images[i], train[i].identity, train[i].camera) for i in picks]


def dataset_exists(root) -> bool:
    return os.path.exists(Path(root) / "manifest.csv")
