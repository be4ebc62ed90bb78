"""Dataset manifests, image preprocessing and ground-truth cloud loading.

Expected directory layout::

    <root>/<category>/<sample_id>/renders/*.png
    <root>/<category>/<sample_id>/cloud.ply      (or cloud.xyz, and/or mesh.obj)

A split file is a JSON object mapping ``sample_id`` to ``"train"`` or ``"test"``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DuplicateIdError,
    ImageReadError,
    InsufficientPointsError,
    ManifestError,
    MissingFileError,
    UnknownCategoryError,
)
from .pointcloud import PointCloud, load_cloud, load_obj, normalize, sample_mesh_surface

log = logging.getLogger(__name__)

SOURCES = ("shapenet-synthetic", "pix3d-real")
SPLITS = ("train", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
CLOUD_NAMES = ("cloud.ply", "cloud.xyz")
MESH_NAME = "mesh.obj"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# ShapeNet synset ids of the 13 categories used by the 3D-R2N2 split
SHAPENET_SYNSETS = {
    "02691156": "airplane",
    "02828884": "bench",
    "02933112": "cabinet",
    "02958343": "car",
    "03001627": "chair",
    "03211117": "display",
    "03636649": "lamp",
    "03691459": "loudspeaker",
    "04090263": "rifle",
    "04256520": "sofa",
    "04379243": "table",
    "04401088": "telephone",
    "04530566": "watercraft",
}


@dataclass
class Record:
    sample_id: str
    category: str
    images: List[str]
    split: str
    cloud: Optional[str] = None
    mesh: Optional[str] = None

    def image_for_epoch(self, epoch: int) -> str:
        """Round-robin view selection: one render per object per epoch."""
        return self.images[epoch % len(self.images)]


@dataclass
class DatasetManifest:
    records: List[Record]
    source: str = "shapenet-synthetic"
    gt_resolution: int = 1024

    def split(self, name: str) -> List[Record]:
        return [r for r in self.records if r.split == name]

    @property
    def categories(self) -> List[str]:
        return sorted({r.category for r in self.records})

    def validate(self) -> None:
        seen = set()
        for r in self.records:
            if r.sample_id in seen:
                raise DuplicateIdError(f"duplicate sample id {r.sample_id!r}")
            seen.add(r.sample_id)
            if r.split not in SPLITS:
                raise ManifestError(f"record {r.sample_id!r}: bad split {r.split!r}")
            if self.source == "pix3d-real" and r.split != "test":
                raise ManifestError(f"record {r.sample_id!r}: real-image manifests are test-only")
            paths = list(r.images) + [p for p in (r.cloud, r.mesh) if p]
            for p in paths:
                if not Path(p).is_file():
                    raise MissingFileError(f"record {r.category}/{r.sample_id}: missing file {p}")
            if not r.images:
                raise MissingFileError(f"record {r.category}/{r.sample_id}: no renders")
            if not (r.cloud or r.mesh):
                raise MissingFileError(f"record {r.category}/{r.sample_id}: no cloud or mesh file")

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            row = {"source": self.source, "gt_resolution": self.gt_resolution, **asdict(r)}
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, os.PathLike]) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: Union[str, os.PathLike]) -> "DatasetManifest":
        records, source, resolution = [], None, None
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            row = json.loads(line)
            source = source or row.pop("source")
            resolution = resolution or row.pop("gt_resolution")
            row.pop("source", None)
            row.pop("gt_resolution", None)
            records.append(Record(**row))
        if not records:
            raise ManifestError(f"{path}: empty manifest")
        return cls(records, source, int(resolution))


def build_manifest(
    root: Union[str, os.PathLike],
    source: str = "shapenet-synthetic",
    split_file: Optional[Union[str, os.PathLike]] = None,
    gt_resolution: int = 1024,
    categories: Optional[Iterable[str]] = None,
) -> DatasetManifest:
    """Enumerate ``root`` into a manifest sorted by category, then sample id.

    Without a split file, synthetic sources go entirely to ``train`` and real
    sources to ``test``. With one, only the listed samples are kept.
    """
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    allowed = set(categories) if categories is not None else None

    splits: Optional[Dict[str, str]] = None
    if split_file is not None:
        splits = json.loads(Path(split_file).read_text())
        bad = {v for v in splits.values() if v not in SPLITS}
        if bad:
            raise ManifestError(f"{split_file}: unknown split labels {sorted(bad)}")

    records: List[Record] = []
    seen: Dict[str, str] = {}
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        category = cat_dir.name
        if allowed is not None and category not in allowed and SHAPENET_SYNSETS.get(category) not in allowed:
            raise UnknownCategoryError(f"category {category!r} is not in the allowed set")
        for sample_dir in sorted(p for p in cat_dir.iterdir() if p.is_dir()):
            sid = sample_dir.name
            if sid in seen:
                raise DuplicateIdError(f"sample id {sid!r} appears in {seen[sid]!r} and {category!r}")
            seen[sid] = category
            if splits is not None and sid not in splits:
                continue
            split = splits[sid] if splits is not None else ("train" if source == "shapenet-synthetic" else "test")
            records.append(_scan_sample(sample_dir, category, split))

    if splits is not None:
        absent = sorted(set(splits) - set(seen))
        if absent:
            log.warning("split file lists %d ids not present under %s", len(absent), root)
    manifest = DatasetManifest(records, source, gt_resolution)
    manifest.validate()
    return manifest


def _scan_sample(sample_dir: Path, category: str, split: str) -> Record:
    render_dir = sample_dir / "renders"
    images = (
        sorted(str(p.resolve()) for p in render_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if render_dir.is_dir()
        else []
    )
    if not images:
        raise MissingFileError(f"record {category}/{sample_dir.name}: no renders in {render_dir}")
    cloud = next((sample_dir / n for n in CLOUD_NAMES if (sample_dir / n).is_file()), None)
    mesh = sample_dir / MESH_NAME
    if cloud is None and not mesh.is_file():
        raise MissingFileError(
            f"record {category}/{sample_dir.name}: missing cloud file {sample_dir / CLOUD_NAMES[0]}"
        )
    return Record(
        sample_id=sample_dir.name,
        category=category,
        images=images,
        split=split,
        cloud=str(cloud.resolve()) if cloud else None,
        mesh=str(mesh.resolve()) if mesh.is_file() else None,
    )


# --------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class PreprocessSpec:
    size: int = 224
    resample: str = "bilinear"
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD
    background: Tuple[int, int, int] = (255, 255, 255)


def to_rgb(img: Image.Image, background=(255, 255, 255)) -> Image.Image:
    """Drop alpha by compositing over ``background``; expand gray to three channels."""
    if img.mode == "P":
        img = img.convert("RGBA")
    if img.mode in ("RGBA", "LA"):
        img = img.convert("RGBA")
        base = Image.new("RGBA", img.size, tuple(background) + (255,))
        return Image.alpha_composite(base, img).convert("RGB")
    return img.convert("RGB")


def preprocess_image(path: Union[str, os.PathLike], spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Load an image as a normalized ``(size, size, 3)`` float32 array."""
    try:
        with Image.open(path) as img:
            img.load()
            rgb = to_rgb(img, spec.background)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    if rgb.size != (spec.size, spec.size):
        method = {"bilinear": Image.BILINEAR, "bicubic": Image.BICUBIC, "nearest": Image.NEAREST}[spec.resample]
        rgb = rgb.resize((spec.size, spec.size), method)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return (arr - np.asarray(spec.mean, dtype=np.float32)) / np.asarray(spec.std, dtype=np.float32)


# --------------------------------------------------------------------------
# ground truth


def load_gt_cloud(record: Record, target_n: int, seed: int = 0, mode: str = "unit-sphere-centered") -> PointCloud:
    """Exactly ``target_n`` ground-truth points, normalized.

    A cloud file with enough points is subsampled without replacement
    (original order kept); otherwise the mesh is resampled. Points are never
    duplicated to reach ``target_n``.
    """
    pts = None
    if record.cloud:
        cloud = load_cloud(record.cloud)
        if len(cloud) == target_n:
            pts = cloud.points
        elif len(cloud) > target_n:
            rng = np.random.default_rng([seed, target_n])
            keep = np.sort(rng.choice(len(cloud), size=target_n, replace=False))
            pts = cloud.points[keep]
    if pts is None:
        if not record.mesh:
            raise InsufficientPointsError(
                f"record {record.sample_id!r}: cloud has fewer than {target_n} points and no mesh is available"
            )
        pts = sample_mesh_surface(load_obj(record.mesh), target_n, seed=seed).points
    out, _ = normalize(PointCloud(pts, category=record.category, id=record.sample_id), mode)
    return out
