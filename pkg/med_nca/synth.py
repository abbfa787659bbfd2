"""Synthetic organ-like segmentation data and dataset manifests.

Each sample is a star-convex blob (the organ, in the mask) on a brighter
background with dimmer distractor blobs, an illumination gradient and
Gaussian noise. A sample depends only on (seed, index).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from med_nca.errors import ConfigError, ManifestError
from med_nca.pgm import read_pgm, write_pgm
from med_nca.pipeline import TrainSample

logger = logging.getLogger(__name__)

ORGAN_INTENSITY = 0.35
BACKGROUND_INTENSITY = 0.65
DISTRACTOR_INTENSITY = 0.5
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic generator."""

    seed: int = 0
    count: int = 250
    height: int = 128
    width: int = 128
    organ_radius_range: tuple[float, float] = (0.12, 0.28)
    deform_amplitude: float = 0.3
    noise_sigma: float = 0.05
    n_distractors: int = 3

    def __post_init__(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"height and width must be >= 16, got {self.height}×{self.width}")
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"height and width must be divisible by 4, got {self.height}×{self.width}")
        lo, hi = self.organ_radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"organ_radius_range must be positive and ordered, got {self.organ_radius_range}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.count < 0 or self.n_distractors < 0:
            raise ConfigError("count and n_distractors must be >= 0")


def _grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")


def generate_sample(spec: SynthSpec, index: int) -> TrainSample:
    """Deterministic sample ``index`` of ``spec``."""
    if not 0 <= index < spec.count:
        raise ConfigError(f"index {index} outside [0, {spec.count})")
    rng = np.random.default_rng([spec.seed, index])
    height, width = spec.height, spec.width
    side = min(height, width)
    yy, xx = _grid(height, width)

    # organ: r(θ) = r0·(1 + A·Σ a_k cos(kθ + φ_k)), k = 2..5
    r0 = rng.uniform(*spec.organ_radius_range) * side
    harmonics = np.arange(2, 6)
    amps = rng.uniform(0.0, 0.25, size=harmonics.size)
    phases = rng.uniform(0.0, 2 * np.pi, size=harmonics.size)
    r_max = r0 * (1.0 + spec.deform_amplitude * amps.sum())
    cy = rng.uniform(min(r_max + 1, height / 2), max(height - r_max - 1, height / 2))
    cx = rng.uniform(min(r_max + 1, width / 2), max(width - r_max - 1, width / 2))

    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    wobble = (amps[:, None, None] * np.cos(harmonics[:, None, None] * theta + phases[:, None, None])).sum(axis=0)
    radius = np.maximum(r0 * (1.0 + spec.deform_amplitude * wobble), 0.5)
    mask = np.hypot(dy, dx) <= radius

    image = np.where(mask, ORGAN_INTENSITY, BACKGROUND_INTENSITY)

    # distractors: dimmer discs that never touch the organ or each other
    placed: list[tuple[float, float, float]] = []
    for _ in range(spec.n_distractors):
        rd = r0 * rng.uniform(0.3, 0.6)
        for _attempt in range(50):
            py = rng.uniform(rd, height - rd)
            px = rng.uniform(rd, width - rd)
            clear_of_organ = np.hypot(py - cy, px - cx) > r_max + rd + 2
            clear_of_others = all(np.hypot(py - qy, px - qx) > rd + qr + 2 for qy, qx, qr in placed)
            if clear_of_organ and clear_of_others:
                placed.append((py, px, rd))
                break
        else:
            logger.debug(f"sample {index}: no room for a distractor of radius {rd:.1f}, skipped")
    for py, px, rd in placed:
        image[np.hypot(yy - py, xx - px) <= rd] = DISTRACTOR_INTENSITY

    # smooth illumination gradient in normalized coordinates
    gain = rng.uniform(0.0, 0.1)
    angle = rng.uniform(0.0, 2 * np.pi)
    u = 2 * xx / max(width - 1, 1) - 1
    v = 2 * yy / max(height - 1, 1) - 1
    image = image + gain * (u * np.cos(angle) + v * np.sin(angle))

    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape) if spec.noise_sigma > 0 else image
    image = np.clip(image, 0.0, 1.0)
    return TrainSample(
        image=image[None].astype(np.float32),
        mask=mask[None].astype(np.float32),
        name=f"sample_{index:05d}",
    )


def split_counts(count: int, ratios: dict[str, float]) -> dict[str, int]:
    """Integer split sizes; rounding slack goes to train."""
    total = sum(ratios.get(s, 0.0) for s in SPLITS)
    if total <= 0:
        raise ConfigError(f"split ratios must sum to a positive value, got {ratios}")
    counts = {s: int(round(count * ratios.get(s, 0.0) / total)) for s in ("val", "test")}
    counts["train"] = count - counts["val"] - counts["test"]
    if counts["train"] < 0:
        raise ConfigError(f"split ratios {ratios} do not fit {count} samples")
    return {s: counts[s] for s in SPLITS}


# ============================================================================
# MANIFEST
# ============================================================================


@dataclass
class ManifestRow:
    split: str
    image_path: str
    mask_path: str
    seed: int
    index: int


@dataclass
class DatasetManifest:
    """Line-oriented dataset index with the generator settings in its header."""

    spec: SynthSpec
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    def split(self, name: str) -> list[ManifestRow]:
        if name not in SPLITS:
            raise ManifestError(f"Unknown split: {name}. Must be one of {list(SPLITS)}")
        return [row for row in self.rows if row.split == name]

    def validate(self, check_files: bool = True) -> None:
        seen: dict[int, str] = {}
        for row in self.rows:
            if row.split not in SPLITS:
                raise ManifestError(f"row for index {row.index} has unknown split {row.split!r}")
            if row.index in seen and seen[row.index] != row.split:
                raise ManifestError(f"index {row.index} appears in both {seen[row.index]} and {row.split}")
            seen[row.index] = row.split
            if check_files:
                for rel in (row.image_path, row.mask_path):
                    if not (self.root / rel).is_file():
                        raise ManifestError(f"missing file listed in manifest: {self.root / rel}")

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        spec_fields = asdict(self.spec)
        spec_fields["organ_radius_range"] = ",".join(repr(float(v)) for v in self.spec.organ_radius_range)
        lines = [f"#version={self.version}"]
        lines += [f"#spec.{key}={value}" for key, value in spec_fields.items()]
        lines += ["\t".join([r.split, r.image_path, r.mask_path, str(r.seed), str(r.index)]) for r in self.rows]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest not found: {path}")
        version = None
        spec_values: dict[str, str] = {}
        rows: list[ManifestRow] = []
        for number, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key == "version":
                    version = int(value)
                elif key.startswith("spec."):
                    spec_values[key[5:]] = value
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ManifestError(f"{path}:{number}: expected 5 tab-separated fields, got {len(parts)}")
            try:
                rows.append(ManifestRow(parts[0], parts[1], parts[2], int(parts[3]), int(parts[4])))
            except ValueError as e:
                raise ManifestError(f"{path}:{number}: {e}") from e
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {version} in {path}")
        try:
            spec = SynthSpec(
                seed=int(spec_values["seed"]),
                count=int(spec_values["count"]),
                height=int(spec_values["height"]),
                width=int(spec_values["width"]),
                organ_radius_range=tuple(float(v) for v in spec_values["organ_radius_range"].split(",")),
                deform_amplitude=float(spec_values["deform_amplitude"]),
                noise_sigma=float(spec_values["noise_sigma"]),
                n_distractors=int(spec_values["n_distractors"]),
            )
        except (KeyError, ValueError) as e:
            raise ManifestError(f"{path}: incomplete generator settings in header ({e})") from e
        manifest = cls(spec=spec, rows=rows, root=path.parent, version=version)
        manifest.validate(check_files)
        return manifest

    def load_split(self, name: str) -> list[TrainSample]:
        samples = []
        for row in self.split(name):
            image = read_pgm(self.root / row.image_path)[None]
            mask = read_pgm(self.root / row.mask_path)[None]
            samples.append(TrainSample(image=image, mask=mask, name=Path(row.image_path).stem))
        return samples


def _write_pair(out_dir: Path, spec: SynthSpec, index: int) -> tuple[str, str]:
    sample = generate_sample(spec, index)
    image_rel = f"images/{sample.name}.pgm"
    mask_rel = f"masks/{sample.name}.pgm"
    write_pgm(out_dir / image_rel, sample.image, "image")
    write_pgm(out_dir / mask_rel, sample.mask, "mask")
    return image_rel, mask_rel


def generate_dataset(
    spec: SynthSpec,
    out_dir: str | Path,
    ratios: dict[str, float],
    workers: int = 1,
) -> DatasetManifest:
    """Write PGM pairs plus ``manifest.tsv`` to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = split_counts(spec.count, ratios)
    labels = [s for s in SPLITS for _ in range(counts[s])]

    indices = list(range(spec.count))
    if workers > 1 and spec.count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(lambda i: _write_pair(out_dir, spec, i), indices))
    else:
        paths = [_write_pair(out_dir, spec, i) for i in indices]

    rows = [ManifestRow(labels[i], img, msk, spec.seed, i) for i, (img, msk) in enumerate(paths)]
    manifest = DatasetManifest(spec=spec, rows=rows, root=out_dir)
    manifest.write(out_dir / "manifest.tsv")
    logger.info(f"Generated {spec.count} samples ({counts}) at {spec.height}×{spec.width} in {out_dir}")
    return manifest


def regenerate(manifest: DatasetManifest, index: int) -> TrainSample:
    """Rebuild one listed sample from the manifest's generator settings."""
    rows = [r for r in manifest.rows if r.index == index]
    if not rows:
        raise ManifestError(f"index {index} not in manifest")
    spec = SynthSpec(**{**asdict(manifest.spec), "seed": rows[0].seed})
    return generate_sample(spec, index)
