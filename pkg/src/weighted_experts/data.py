"""Synthetic multi-site image corpus with per-site acquisition shift.

Every global class owns a low-frequency cosine template. A site draws
patients, gives each a latent intensity offset, and renders noisy, shifted
copies of the templates under its own gain and bias.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AugmentConfig, ScenarioConfig, SiteSpec, scenario_from_dict, to_dict
from .errors import ConfigError, DataError

SITE_MAGIC = b"ESD1"
TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class GlobalClassRegistry:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate class names in registry")

    def __len__(self) -> int:
        return len(self.names)

    def id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"class {name!r} is not in the registry") from None

    def ids(self, names) -> list[int]:
        return [self.id(n) for n in names]


@dataclass
class SiteDataset:
    site_id: str
    role: str
    step: int  # 0 for base, 1..t for incremental, -1 for external
    label_set: list[int]  # ordered global ids
    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) global ids
    patients: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask: np.ndarray) -> "SiteDataset":
        return SiteDataset(self.site_id, self.role, self.step, list(self.label_set),
                           self.images[mask], self.labels[mask], self.patients[mask])


@dataclass
class MultiSiteCorpus:
    registry: GlobalClassRegistry
    config: ScenarioConfig
    sites: list[SiteDataset]  # base first, then incremental steps in order
    external: list[SiteDataset] = field(default_factory=list)
    splits: dict[str, tuple[SiteDataset, SiteDataset, SiteDataset]] = field(default_factory=dict)

    def site(self, site_id: str) -> SiteDataset:
        for s in self.sites + self.external:
            if s.site_id == site_id:
                return s
        raise KeyError(site_id)

    def split(self, site_id: str, which: str) -> SiteDataset:
        return self.splits[site_id][SPLIT_NAMES.index(which)]


# ---------------------------------------------------------------- generation


def class_templates(n_classes: int, size: int, n_waves: int, rng: np.random.Generator) -> np.ndarray:
    """Periodic templates in [0.2, 0.8]; integer frequencies keep np.roll seamless."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n_classes, size, size))
    for c in range(n_classes):
        s = np.zeros((size, size))
        for _ in range(n_waves):
            fx, fy = rng.integers(0, 3, size=2)
            if fx == 0 and fy == 0:
                fx = 1
            amp = rng.uniform(0.5, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            s += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        out[c] = 0.5 + 0.3 * s / np.abs(s).max()
    return out


def render(template: np.ndarray, spec: SiteSpec, offset: float, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
    shifted = np.roll(template, (int(dy), int(dx)), axis=(0, 1))
    noisy = shifted + offset + rng.normal(0.0, 1.0, template.shape) * spec.noise
    return np.clip(spec.gain * noisy + spec.bias, 0.0, 1.0)


def generate_site(spec: SiteSpec, templates: np.ndarray, registry: GlobalClassRegistry, step: int,
                  rng: np.random.Generator) -> SiteDataset:
    label_set = registry.ids(spec.labels)
    n = spec.patients * spec.samples_per_patient
    if n == 0:
        raise DataError(f"site {spec.site_id} is empty")
    size = templates.shape[1]
    images = np.empty((n, size, size))
    labels = np.empty(n, dtype=np.int64)
    patients = np.repeat(np.arange(spec.patients), spec.samples_per_patient)
    i = 0
    for _ in range(spec.patients):
        offset = rng.normal(0.0, spec.patient_sd)
        for _ in range(spec.samples_per_patient):
            c = label_set[rng.integers(len(label_set))]
            images[i] = render(templates[c], spec, offset, rng)
            labels[i] = c
            i += 1
    return SiteDataset(spec.site_id, spec.role, step, label_set, images, labels, patients)


def generate_scenario(config: ScenarioConfig, seed: int | None = None) -> MultiSiteCorpus:
    config.validate()
    if seed is not None and seed != config.seed:
        config = dataclasses.replace(config, seed=seed)
    seed = config.seed
    registry = GlobalClassRegistry(tuple(config.class_names))
    templates = class_templates(len(registry), config.image_size, config.n_waves,
                                np.random.default_rng([seed, 0]))
    internal, external, splits = [], [], {}
    ordered = [s for s in config.sites if s.role == "base"][:1]
    ordered += [s for s in config.sites if s.role != "base" and s.role != "external"]
    ordered += [s for s in config.sites if s.role == "external"]
    if sum(s.role == "base" for s in config.sites) > 1:
        raise ConfigError("exactly one base site is supported")
    step = 0
    for spec in ordered:
        idx = config.sites.index(spec)
        site_step = -1 if spec.role == "external" else step
        ds = generate_site(spec, templates, registry, site_step, np.random.default_rng([seed, 1, idx]))
        if spec.role == "external":
            external.append(ds)
        else:
            internal.append(ds)
            step += 1
        splits[spec.site_id] = split_by_patient(ds, config.split, seed=seed * 1000 + idx)
    return MultiSiteCorpus(registry, config, internal, external, splits)


def split_by_patient(dataset: SiteDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition by patient id into (train, val, test)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = np.unique(dataset.patients)
    n = len(ids)
    needed = sum(r > 0 for r in ratios)
    if n < 3 or n < needed:
        raise DataError(f"site {dataset.site_id}: {n} patients cannot fill {needed} splits")
    # every split with a non-zero ratio gets at least one patient; train takes the rest
    counts = [0] + [max(1, int(round(r * n))) if r > 0 else 0 for r in ratios[1:]]
    counts[0] = n - counts[1] - counts[2]
    if ratios[0] > 0 and counts[0] <= 0 or ratios[0] == 0 and counts[0] != 0:
        raise DataError(f"site {dataset.site_id}: {n} patients cannot honour ratios {ratios}")
    perm = np.random.default_rng(seed).permutation(ids)
    groups = np.split(perm, np.cumsum(counts)[:-1])
    return tuple(dataset.subset(np.isin(dataset.patients, g)) for g in groups)


# ---------------------------------------------------------------- augmentation


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    dy, dx = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
    gain = rng.uniform(1.0 - cfg.gain, 1.0 + cfg.gain)
    bias = rng.uniform(-cfg.bias, cfg.bias)
    noise = rng.normal(0.0, 1.0, image.shape) * cfg.noise
    out = np.roll(image, (int(dy), int(dx)), axis=(0, 1)) * gain + bias + noise
    return np.clip(out, 0.0, 1.0)


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return np.stack([augment(im, rng, cfg) for im in images]) if len(images) else images.copy()


# ---------------------------------------------------------------- persistence


def _site_bytes(ds: SiteDataset) -> bytes:
    header = json.dumps({
        "site_id": ds.site_id, "role": ds.role, "step": ds.step, "label_set": ds.label_set,
        "n": len(ds), "height": int(ds.images.shape[1]), "width": int(ds.images.shape[2]),
    }).encode()
    n = len(ds)
    rec = np.zeros(n, dtype=[("label", "<u4"), ("patient", "<u4"),
                             ("pixels", "<f8", (ds.images.shape[1] * ds.images.shape[2],))])
    rec["label"] = ds.labels
    rec["patient"] = ds.patients
    rec["pixels"] = ds.images.reshape(n, -1)
    return SITE_MAGIC + struct.pack("<I", len(header)) + header + rec.tobytes()


def _site_from_bytes(blob: bytes) -> SiteDataset:
    if blob[:4] != SITE_MAGIC:
        raise DataError("not a site file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    h = json.loads(blob[8:8 + hlen])
    dt = np.dtype([("label", "<u4"), ("patient", "<u4"), ("pixels", "<f8", (h["height"] * h["width"],))])
    rec = np.frombuffer(blob, dtype=dt, count=h["n"], offset=8 + hlen)
    return SiteDataset(h["site_id"], h["role"], h["step"], list(h["label_set"]),
                       rec["pixels"].reshape(h["n"], h["height"], h["width"]).astype(np.float64),
                       rec["label"].astype(np.int64), rec["patient"].astype(np.int64))


def save_corpus(corpus: MultiSiteCorpus, directory: str | Path) -> str:
    """Write the corpus and return a checksum over every file written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    files = {
        "registry.json": json.dumps({"classes": list(corpus.registry.names)}, indent=2).encode(),
        "scenario.json": json.dumps(to_dict(corpus.config), indent=2).encode(),
    }
    for ds in corpus.sites + corpus.external:
        files[f"site_{ds.site_id}.bin"] = _site_bytes(ds)
    for name in sorted(files):
        (d / name).write_bytes(files[name])
        digest.update(name.encode())
        digest.update(files[name])
    return digest.hexdigest()


def load_corpus(directory: str | Path) -> MultiSiteCorpus:
    d = Path(directory)
    if not (d / "scenario.json").exists():
        raise DataError(f"no corpus at {d} (run gen-data first)")
    config = scenario_from_dict(json.loads((d / "scenario.json").read_text()))
    registry = GlobalClassRegistry(tuple(json.loads((d / "registry.json").read_text())["classes"]))
    internal, external, splits = [], [], {}
    for spec in config.sites:
        ds = _site_from_bytes((d / f"site_{spec.site_id}.bin").read_bytes())
        (external if ds.role == "external" else internal).append(ds)
        idx = config.sites.index(spec)
        splits[spec.site_id] = split_by_patient(ds, config.split, seed=config.seed * 1000 + idx)
    internal.sort(key=lambda s: s.step)
    return MultiSiteCorpus(registry, config, internal, external, splits)
