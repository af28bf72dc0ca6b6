"""Synthetic paired-domain datasets for the retrieval pipeline.

Generates a source and a target domain over schematic aerial scenes: animals
are placed by a herd process (herd centers uniform over images, herd sizes
Poisson-truncated at one, member offsets uniform in a disc), each animal gets
one latent true-positive candidate on the acquisition grid, and false
positives are scattered on grid nodes away from all animals. True-positive
features come from a single Gaussian component and false positives from a
three-component mixture, one of whose components sits deliberately close to
the true-positive component. Target features pass through a feature-space
rotation, a translation, and added isotropic noise, and the target pool is
materially more imbalanced than the source.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .candidates import (
    FALSE_POSITIVE,
    TRUE_POSITIVE,
    Candidate,
    CandidateSet,
    GroundTruthPoint,
    ImageMeta,
    attach_animal_counts,
    load_candidate_set,
    load_ground_truth,
    load_image_metas,
    save_candidate_set,
    save_ground_truth,
    save_image_metas,
)
from .detector import SurrogateDetector, class_balanced_weights, fit_detector

GRID_STRIDE = 25
NEUTRAL_CONFIDENCE = (0.49, 0.49, 0.02)

# Feature geometry: false-positive mixture components sit below the
# true-positive component along a common "animal-likeness" axis (drop) and
# are spread sideways in orthogonal directions (lateral). The first
# component is the near one that makes pure confidence-ranking fallible.
FP_COMPONENT_DROPS = (3.0, 6.0, 6.0)
FP_COMPONENT_LATERALS = (1.5, 3.0, 3.0)
FP_COMPONENT_WEIGHTS = (0.25, 0.45, 0.3)
# Confounder cluster present only in the target domain: slightly above the
# true positives along the animal-likeness axis (so a source-trained scorer
# ranks it confidently high) but far out along an orthogonal direction the
# source data never exercised (so in feature space it is its own distant
# island, nearer to background structure than to animals).
NOVEL_FP_RISE = 2.0
NOVEL_FP_LATERAL = 6.0
NOVEL_FP_SIGMA = 2.0
MAX_PLACEMENT_ATTEMPTS = 500


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShiftConfig:
    """Controls the feature-space discrepancy between source and target."""

    d: int = 16
    rotation_strength: float = 0.35
    translation_norm: float = 2.0
    noise_sigma: float = 0.4
    target_fp_multiplier: float = 4.0
    novel_fp_fraction: float = 0.04
    herd_cluster_radius: float = 120.0
    herd_mean_size: float = 3.0

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be at least 2")
        for name in ("rotation_strength", "translation_norm", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.target_fp_multiplier < 1:
            raise ValueError("target_fp_multiplier must be >= 1")
        if not 0.0 <= self.novel_fp_fraction <= 1.0:
            raise ValueError("novel_fp_fraction must be in [0, 1]")
        if self.herd_cluster_radius < GRID_STRIDE:
            raise ValueError(f"herd_cluster_radius must be >= {GRID_STRIDE}")
        if self.herd_mean_size <= 0:
            raise ValueError("herd_mean_size must be positive")


@dataclass(frozen=True)
class DatasetScale:
    n_images_src: int = 30
    n_images_tgt: int = 100
    n_animals_src: int = 300
    n_animals_tgt: int = 150
    n_fp_src: int = 1200
    image_width: int = 2000
    image_height: int = 2000

    def __post_init__(self):
        if self.n_images_src <= 0 or self.n_images_tgt <= 0:
            raise ValueError("image counts must be positive")
        if self.n_animals_src <= 0:
            raise ValueError("source animal count must be positive")
        if self.n_animals_tgt < 0:
            raise ValueError("target animal count must be >= 0")
        if self.n_fp_src <= 0:
            raise ValueError("false-positive count must be positive")
        if self.image_width < GRID_STRIDE or self.image_height < GRID_STRIDE:
            raise ValueError("image dimensions must cover at least one grid cell")


@dataclass(frozen=True)
class DomainData:
    images: tuple[ImageMeta, ...]
    gt: tuple[GroundTruthPoint, ...]
    pool: CandidateSet

    def image_map(self) -> dict[str, ImageMeta]:
        return {m.image_id: m for m in self.images}


@dataclass(frozen=True)
class SyntheticDataset:
    source: DomainData
    target: DomainData
    shift: ShiftConfig
    scale: DatasetScale
    seed: int


def _unit_vector(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _orthonormal_plane(rng: np.random.Generator, d: int) -> tuple[np.ndarray, np.ndarray]:
    u = _unit_vector(rng, d)
    v = rng.normal(size=d)
    v = v - (v @ u) * u
    return u, v / np.linalg.norm(v)


def _rotate(X: np.ndarray, planes, theta: float) -> np.ndarray:
    """Apply a rotation by theta in each of the given orthogonal 2-planes."""
    if theta == 0.0 or not planes:
        return X
    c, s = math.cos(theta), math.sin(theta)
    out = X
    for u, v in planes:
        xu = out @ u
        xv = out @ v
        out = out + np.outer((c - 1.0) * xu - s * xv, u) + np.outer((c - 1.0) * xv + s * xu, v)
    return out


class _FeatureModel:
    """Class-conditional generators shared by both domains."""

    def __init__(self, rng: np.random.Generator, shift: ShiftConfig):
        d = shift.d
        self.shift = shift
        self.mu_tp = rng.normal(size=d)
        axis = _unit_vector(rng, d)
        means = []
        for drop, lateral in zip(FP_COMPONENT_DROPS, FP_COMPONENT_LATERALS):
            side = rng.normal(size=d)
            side = side - (side @ axis) * axis
            side = side / np.linalg.norm(side)
            means.append(self.mu_tp - drop * axis + lateral * side)
        self.fp_means = np.stack(means)
        novel_side = rng.normal(size=d)
        novel_side = novel_side - (novel_side @ axis) * axis
        novel_side = novel_side / np.linalg.norm(novel_side)
        self.novel_mean = self.mu_tp + NOVEL_FP_RISE * axis + NOVEL_FP_LATERAL * novel_side
        # one rotation plane per pair of dimensions so the rotation moves the
        # whole feature space, not a low-dimensional slice of it
        n_planes = max(1, d // 2)
        self.planes = [_orthonormal_plane(rng, d) for _ in range(n_planes)]
        self.translation = shift.translation_norm * _unit_vector(rng, d)

    def sample_tp(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mu_tp + rng.normal(size=(n, self.shift.d))

    def sample_fp(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comps = rng.choice(len(FP_COMPONENT_WEIGHTS), size=n, p=FP_COMPONENT_WEIGHTS)
        return self.fp_means[comps] + rng.normal(size=(n, self.shift.d))

    def sample_fp_target(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Target false positives: source mixture plus the confounder cluster.

        The confounder component is broader than the source mixture so that a
        handful of labeled examples cannot pin down its full extent.
        """
        q = self.shift.novel_fp_fraction
        weights = [(1.0 - q) * w for w in FP_COMPONENT_WEIGHTS] + [q]
        means = np.vstack([self.fp_means, self.novel_mean])
        comps = rng.choice(len(weights), size=n, p=weights)
        sigma = np.where(comps == len(FP_COMPONENT_WEIGHTS), NOVEL_FP_SIGMA, 1.0)
        return means[comps] + sigma[:, None] * rng.normal(size=(n, self.shift.d))

    def to_target(self, rng: np.random.Generator, X: np.ndarray) -> np.ndarray:
        out = _rotate(X, self.planes, self.shift.rotation_strength)
        out = out + self.translation
        if self.shift.noise_sigma > 0:
            out = out + self.shift.noise_sigma * rng.normal(size=X.shape)
        return out


def _grid_bounds(width: int, height: int) -> tuple[int, int]:
    return width // GRID_STRIDE, height // GRID_STRIDE


def _place_animals(
    rng: np.random.Generator,
    images: tuple[ImageMeta, ...],
    n_animals: int,
    shift: ShiftConfig,
    domain_code: str,
    taken: set,
) -> tuple[list[GroundTruthPoint], list[tuple[str, int, int]]]:
    """Herd process: returns ground-truth points and one grid node per animal."""
    gt: list[GroundTruthPoint] = []
    nodes: list[tuple[str, int, int]] = []
    radius = shift.herd_cluster_radius
    while len(gt) < n_animals:
        im = images[int(rng.integers(len(images)))]
        size = int(rng.poisson(shift.herd_mean_size))
        if size < 1:
            size = 1
        size = min(size, n_animals - len(gt))
        cx = rng.uniform(0.0, im.width)
        cy = rng.uniform(0.0, im.height)
        gx_max, gy_max = _grid_bounds(im.width, im.height)
        for _ in range(size):
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                ang = rng.uniform(0.0, 2.0 * math.pi)
                rad = radius * math.sqrt(rng.uniform())
                px = min(max(cx + rad * math.cos(ang), 0.0), float(im.width))
                py = min(max(cy + rad * math.sin(ang), 0.0), float(im.height))
                gx = min(max(int(round(px / GRID_STRIDE)), 0), gx_max)
                gy = min(max(int(round(py / GRID_STRIDE)), 0), gy_max)
                node = (im.image_id, gx, gy)
                node_dist = math.hypot(gx * GRID_STRIDE - px, gy * GRID_STRIDE - py)
                if node in taken or node_dist > radius:
                    continue
                taken.add(node)
                animal_id = f"a_{domain_code}_{len(gt):05d}"
                gt.append(GroundTruthPoint(animal_id, im.image_id, px, py))
                nodes.append(node)
                break
            else:
                raise GenerationError(
                    f"could not place animal {len(gt)} in {im.image_id}: image capacity exceeded"
                )
    return gt, nodes


def _place_false_positives(
    rng: np.random.Generator,
    images: tuple[ImageMeta, ...],
    gt: list[GroundTruthPoint],
    n_fp: int,
    radius: float,
    taken: set,
) -> list[tuple[str, int, int]]:
    gt_by_image: dict[str, list[tuple[float, float]]] = {}
    for p in gt:
        gt_by_image.setdefault(p.image_id, []).append((p.px, p.py))
    gt_arrays = {
        k: np.array(v, dtype=np.float64).reshape(-1, 2) for k, v in gt_by_image.items()
    }
    nodes: list[tuple[str, int, int]] = []
    for k in range(n_fp):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            im = images[int(rng.integers(len(images)))]
            gx_max, gy_max = _grid_bounds(im.width, im.height)
            gx = int(rng.integers(0, gx_max + 1))
            gy = int(rng.integers(0, gy_max + 1))
            node = (im.image_id, gx, gy)
            if node in taken:
                continue
            pts = gt_arrays.get(im.image_id)
            if pts is not None:
                dx = pts[:, 0] - gx * GRID_STRIDE
                dy = pts[:, 1] - gy * GRID_STRIDE
                if np.any(dx * dx + dy * dy <= radius * radius):
                    continue
            taken.add(node)
            nodes.append(node)
            break
        else:
            raise GenerationError(
                f"could not place false positive {k}: image capacity exceeded"
            )
    return nodes


def _build_pool(
    domain_tag: str,
    domain_code: str,
    tp_nodes: list[tuple[str, int, int]],
    fp_nodes: list[tuple[str, int, int]],
    features: np.ndarray,
    d: int,
) -> CandidateSet:
    cands = []
    labels = [TRUE_POSITIVE] * len(tp_nodes) + [FALSE_POSITIVE] * len(fp_nodes)
    for k, ((image_id, gx, gy), label) in enumerate(zip(tp_nodes + fp_nodes, labels)):
        cands.append(
            Candidate(
                candidate_id=f"c_{domain_code}_{k:06d}",
                image_id=image_id,
                grid_x=gx,
                grid_y=gy,
                px=float(gx * GRID_STRIDE),
                py=float(gy * GRID_STRIDE),
                confidence=NEUTRAL_CONFIDENCE,
                features=features[k],
                gt_label=label,
            )
        )
    return CandidateSet(domain_tag=domain_tag, candidates=tuple(cands), d=d, grid_stride=GRID_STRIDE)


def _check_capacity(scale: DatasetScale, shift: ShiftConfig) -> None:
    gx_max, gy_max = _grid_bounds(scale.image_width, scale.image_height)
    nodes_per_image = (gx_max + 1) * (gy_max + 1)
    n_fp_tgt = int(round(scale.n_fp_src * shift.target_fp_multiplier))
    demands = (
        ("source", scale.n_images_src, scale.n_animals_src + scale.n_fp_src),
        ("target", scale.n_images_tgt, scale.n_animals_tgt + n_fp_tgt),
    )
    for name, n_images, n_points in demands:
        if n_points > 0.4 * n_images * nodes_per_image:
            raise GenerationError(
                f"{name} capacity exceeded: {n_points} grid points requested but "
                f"{n_images} images of {scale.image_width}x{scale.image_height} "
                f"offer only {n_images * nodes_per_image}"
            )


def generate(
    shift: ShiftConfig = ShiftConfig(),
    scale: DatasetScale = DatasetScale(),
    seed: int = 0,
) -> SyntheticDataset:
    """Deterministically generate a paired source/target dataset."""
    _check_capacity(scale, shift)
    rng = np.random.default_rng(seed)
    model = _FeatureModel(rng, shift)
    d = shift.d

    src_images = tuple(
        ImageMeta(f"src_{i:04d}", scale.image_width, scale.image_height, "source")
        for i in range(scale.n_images_src)
    )
    tgt_images = tuple(
        ImageMeta(f"tgt_{i:04d}", scale.image_width, scale.image_height, "target")
        for i in range(scale.n_images_tgt)
    )

    taken_src: set = set()
    src_gt, src_tp_nodes = _place_animals(
        rng, src_images, scale.n_animals_src, shift, "src", taken_src
    )
    src_fp_nodes = _place_false_positives(
        rng, src_images, src_gt, scale.n_fp_src, shift.herd_cluster_radius, taken_src
    )
    src_features = np.concatenate(
        [
            model.sample_tp(rng, len(src_tp_nodes)),
            model.sample_fp(rng, len(src_fp_nodes)),
        ]
    )

    n_fp_tgt = int(round(scale.n_fp_src * shift.target_fp_multiplier))
    taken_tgt: set = set()
    tgt_gt, tgt_tp_nodes = _place_animals(
        rng, tgt_images, scale.n_animals_tgt, shift, "tgt", taken_tgt
    )
    tgt_fp_nodes = _place_false_positives(
        rng, tgt_images, tgt_gt, n_fp_tgt, shift.herd_cluster_radius, taken_tgt
    )
    tgt_base = np.concatenate(
        [
            model.sample_tp(rng, len(tgt_tp_nodes)),
            model.sample_fp_target(rng, len(tgt_fp_nodes)),
        ]
    )
    tgt_features = model.to_target(rng, tgt_base)

    source = DomainData(
        images=attach_animal_counts(src_images, src_gt),
        gt=tuple(src_gt),
        pool=_build_pool("source", "src", src_tp_nodes, src_fp_nodes, src_features, d),
    )
    target = DomainData(
        images=attach_animal_counts(tgt_images, tgt_gt),
        gt=tuple(tgt_gt),
        pool=_build_pool("target", "tgt", tgt_tp_nodes, tgt_fp_nodes, tgt_features, d),
    )
    return SyntheticDataset(source=source, target=target, shift=shift, scale=scale, seed=seed)


def initial_detector(dataset: SyntheticDataset, seed: int = 0) -> SurrogateDetector:
    """Fit the surrogate scorer on the source latent pool."""
    pool = dataset.source.pool
    labels = np.array([1.0 if g == TRUE_POSITIVE else 0.0 for g in pool.gt_labels])
    class_balanced_weights(labels)  # raises if a class is missing
    return fit_detector(pool.features, labels, seed=seed)


# ---------------------------------------------------------------------------
# Persistence: three CSVs per domain plus a config echo
# ---------------------------------------------------------------------------

CONFIG_FILE = "config.json"


def save_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tag, dom in (("source", dataset.source), ("target", dataset.target)):
        save_image_metas(dom.images, out / f"{tag}_images.csv")
        save_ground_truth(dom.gt, out / f"{tag}_gt.csv")
        save_candidate_set(dom.pool, out / f"{tag}_candidates.csv")
    echo = {
        "shift": asdict(dataset.shift),
        "scale": asdict(dataset.scale),
        "seed": dataset.seed,
        "grid_stride": GRID_STRIDE,
    }
    with (out / CONFIG_FILE).open("w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir: str | Path) -> SyntheticDataset:
    src = Path(in_dir)
    with (src / CONFIG_FILE).open(encoding="utf-8") as fh:
        echo = json.load(fh)
    shift = ShiftConfig(**echo["shift"])
    scale = DatasetScale(**echo["scale"])
    domains = {}
    for tag in ("source", "target"):
        images = load_image_metas(src / f"{tag}_images.csv")
        gt = load_ground_truth(src / f"{tag}_gt.csv")
        pool = load_candidate_set(
            src / f"{tag}_candidates.csv", domain_tag=tag, grid_stride=echo["grid_stride"]
        )
        domains[tag] = DomainData(images=attach_animal_counts(images, gt), gt=gt, pool=pool)
    return SyntheticDataset(
        source=domains["source"],
        target=domains["target"],
        shift=shift,
        scale=scale,
        seed=echo["seed"],
    )
