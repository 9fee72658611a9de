"""Synthetic CT/MRI-like liver volumes, preprocessing and client dataset assembly.

The generator is a desk-scale stand-in for real scans. Each patient has a
smooth random liver blob whose shape depends only on the patient seed, so two
MRI sequences of the same patient share the shape. CT-like volumes show a
bright liver on a darker background; MRI-like volumes invert that contrast
and carry a multiplicative bias field.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.transform import resize

from .nn import Modality

log = logging.getLogger(__name__)

MIXED = "Mixed"
CLIENT_MIXES = ("CT", "MRI", MIXED)


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 32
    slices: int = 8
    noise: float = 0.03
    bias_field: float = 0.25
    distractor_prob: float = 0.5
    distractor_size: tuple[float, float] = (0.06, 0.10)
    # per-client scanner offset added to every intensity, and contrast scale
    offset: float = 0.0
    contrast: float = 1.0
    # per-scan acquisition jitter: uniform offset in [-a, a], contrast scale in [1 - c, 1 + c]
    scan_offset: float = 0.0
    scan_contrast: float = 0.0


@dataclass
class Volume:
    patient_id: str
    modality: Modality
    slices: np.ndarray          # [S, H, W] float32
    masks: np.ndarray           # [S, H, W] uint8
    variant: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.slices.shape != self.masks.shape:
            raise ValueError(f"{self.patient_id}: slices {self.slices.shape} vs masks {self.masks.shape}")

    def __len__(self) -> int:
        return self.slices.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.slices.shape[1:]


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass
class ClientDataset:
    client_id: str
    modality_mix: str
    train: list[Volume]
    val: list[Volume]
    test: list[Volume]

    def split(self, name: str) -> list[Volume]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray, list[Modality]]:
        """Stack one split into ([N, 1, H, W] images, [N, H, W] masks, per-slice modality)."""
        vols = self.split(split)
        if not vols:
            raise ValueError(f"client {self.client_id}: {split} split is empty")
        x = np.concatenate([v.slices for v in vols])[:, None]
        y = np.concatenate([v.masks for v in vols])
        mods = [v.modality for v in vols for _ in range(len(v))]
        return x, y, mods

    @property
    def n_train(self) -> int:
        return sum(len(v) for v in self.train)

    def patient_ids(self) -> set[str]:
        return {v.patient_id for v in self.train + self.val + self.test}


# ---- generation ------------------------------------------------------------

def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


_MOD_CODE = {Modality.CT: 1, Modality.MRI: 2}


def _liver_masks(patient_seed: int, cfg: GeneratorConfig) -> np.ndarray:
    rng = _rng(patient_seed, 0)
    res, n = cfg.resolution, cfg.slices
    cx, cy = rng.uniform(0.38, 0.62, 2) * res
    a, b = rng.uniform(0.20, 0.32, 2) * res
    theta = rng.uniform(0, math.pi)
    harm = [(k, rng.uniform(-0.08, 0.08), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4)]
    drift = rng.uniform(-0.04, 0.04, 2) * res
    zc = rng.uniform(0.35, 0.65) * (n - 1)

    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    masks = np.zeros((n, res, res), dtype=np.uint8)
    for z in range(n):
        frac = (z - zc) / max(n - 1, 1)
        scale = max(0.65, math.sqrt(max(0.0, 1 - (1.6 * frac) ** 2)))
        ox, oy = cx + drift[0] * frac * 2, cy + drift[1] * frac * 2
        dx, dy = xx - ox, yy - oy
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
        rad = np.hypot(u, v)
        phi = np.arctan2(v, u)
        bound = 1.0 + sum(c * np.cos(k * phi + p) for k, c, p in harm)
        masks[z] = rad <= bound * scale
    return masks


def _smooth_field(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.normal(size=shape), sigma=sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def generate_synthetic_volume(modality: "Modality | str", patient_seed: int,
                              cfg: GeneratorConfig = GeneratorConfig(), variant: int = 0,
                              patient_id: str | None = None) -> Volume:
    """Deterministic synthetic volume for one patient.

    CT-like: liver 0.55-0.70 on background 0.2-0.4. MRI-like: liver 0.25-0.40
    on background 0.5-0.8, then a smooth multiplicative bias field. ``variant``
    selects an MRI sequence-like sub-band; the liver shape ignores it.
    """
    modality = Modality.parse(modality)
    if modality not in _MOD_CODE:
        raise ValueError("volumes are CT or MRI")
    masks = _liver_masks(patient_seed, cfg)
    res, n = cfg.resolution, cfg.slices
    rng = _rng(patient_seed, _MOD_CODE[modality], variant, 1)
    if modality is Modality.CT:
        liver = rng.uniform(0.58, 0.67)
        bg = rng.uniform(0.24, 0.36)
    else:
        k = variant % 3
        liver = rng.uniform(0.27, 0.33) + 0.025 * k
        bg = rng.uniform(0.56, 0.68) + 0.04 * k

    shape_rng = _rng(patient_seed, 7)
    distract = shape_rng.random() < cfg.distractor_prob
    dpos = shape_rng.uniform(0.1, 0.9, 2) * res
    drad = shape_rng.uniform(*cfg.distractor_size) * res
    yy, xx = np.mgrid[0:res, 0:res] + 0.5

    tissue = 0.04 * _smooth_field(rng, (n, res, res), sigma=(1.0, 3.0, 3.0))
    img = np.where(masks > 0, liver, bg) + tissue
    if distract:
        blob = (np.hypot(xx - dpos[0], yy - dpos[1]) <= drad)[None] & (masks == 0)
        img = np.where(blob, liver + 0.02, img)
    img = gaussian_filter(img, sigma=(0, 0.6, 0.6))
    if modality is Modality.MRI:
        bias = np.exp(cfg.bias_field * _smooth_field(rng, (res, res), sigma=6.0))
        img = img * bias[None]
    scan_rng = _rng(patient_seed, _MOD_CODE[modality], variant, 2)
    offset = cfg.offset + scan_rng.uniform(-cfg.scan_offset, cfg.scan_offset)
    contrast = cfg.contrast * scan_rng.uniform(1 - cfg.scan_contrast, 1 + cfg.scan_contrast)
    img = offset + contrast * img + rng.normal(scale=cfg.noise, size=img.shape)
    return Volume(
        patient_id=patient_id or f"{modality.value}-{patient_seed}",
        modality=modality,
        slices=img.astype(np.float32),
        masks=masks,
        variant=variant,
        meta={"seed": int(patient_seed), "generator": asdict(cfg)},
    )


def dixon_water_fat(in_phase: Volume, out_phase: Volume) -> tuple[Volume, Volume]:
    """Two-point Dixon: water = (in + out) / 2, fat = (in - out) / 2."""
    if in_phase.slices.shape != out_phase.slices.shape:
        raise ValueError(f"in-phase {in_phase.slices.shape} and out-phase {out_phase.slices.shape} differ")
    ip = in_phase.slices.astype(np.float64)
    op = out_phase.slices.astype(np.float64)
    water = replace(in_phase, slices=((ip + op) / 2).astype(in_phase.slices.dtype),
                    masks=in_phase.masks.copy(), meta={**in_phase.meta, "dixon": "water"})
    fat = replace(in_phase, slices=((ip - op) / 2).astype(in_phase.slices.dtype),
                  masks=in_phase.masks.copy(), meta={**in_phase.meta, "dixon": "fat"})
    return water, fat


# ---- preprocessing ---------------------------------------------------------

def dataset_norm_stats(volumes: Sequence[Volume]) -> NormStats:
    """Average of per-slice means and average of per-slice standard deviations."""
    if not volumes:
        raise ValueError("cannot compute normalization statistics of an empty dataset")
    means, stds = [], []
    for v in volumes:
        s = v.slices.astype(np.float64).reshape(len(v), -1)
        means.append(s.mean(axis=1))
        stds.append(s.std(axis=1))
    stats = NormStats(float(np.concatenate(means).mean()), float(np.concatenate(stds).mean()))
    if stats.std <= 0:
        log.warning("dataset has zero intensity spread; normalization will fail")
    return stats


def preprocess(volume: Volume, stats: NormStats, target: tuple[int, int]) -> Volume:
    """Bilinear resize, scalar standardization, clip to [-3, 3]; masks resized nearest."""
    if stats.std <= 0:
        raise ValueError(f"normalization std must be positive, got {stats.std}")
    target = tuple(target)
    x = volume.slices.astype(np.float64)
    m = volume.masks
    if x.shape[1:] != target:
        x = np.stack([resize(s, target, order=1, mode="edge", anti_aliasing=False, preserve_range=True) for s in x])
        m = np.stack([resize(s, target, order=0, mode="edge", anti_aliasing=False, preserve_range=True)
                      for s in m]).round().astype(np.uint8)
    x = np.clip((x - stats.mean) / stats.std, -3.0, 3.0)
    return replace(volume, slices=x.astype(np.float32), masks=(m > 0).astype(np.uint8))


# ---- clients ---------------------------------------------------------------

@dataclass
class ClientSpec:
    id: str
    modality: str
    patients: int = 10
    mri_variant: int = 0
    ct_fraction: float = 0.5
    patient_seed_base: int | None = None
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in CLIENT_MIXES:
            raise ValueError(f"client {self.id}: modality must be one of {CLIENT_MIXES}, got {self.modality!r}")


def split_counts(n: int) -> tuple[int, int, int]:
    """floor(40%) train, floor(20%) val, the rest test.

    Validation gets at least one patient (taken from test) so early stopping
    and model selection always have something to score; this only changes n < 5.
    """
    if n < 3:
        raise ValueError(f"need at least 3 patients to split, got {n}")
    train, val = int(math.floor(0.4 * n)), max(1, int(math.floor(0.2 * n)))
    return train, val, n - train - val


def _patient_seed(spec: ClientSpec, client_index: int, i: int, master_seed: int) -> int:
    if spec.patient_seed_base is not None:
        return spec.patient_seed_base + i
    return int(_rng(master_seed, 101, client_index, i).integers(0, 2**31 - 1))


def build_client(spec: ClientSpec, client_index: int, master_seed: int, base: GeneratorConfig,
                 target: tuple[int, int] | None = None) -> ClientDataset:
    if spec.patients < 3:
        raise ValueError(f"client {spec.id}: needs at least 3 patients to split, got {spec.patients}")
    gen = replace(base, **spec.generator)
    target = target or (gen.resolution, gen.resolution)
    if spec.modality == MIXED:
        n_ct = int(round(spec.ct_fraction * spec.patients))
        groups = [(Modality.CT, n_ct), (Modality.MRI, spec.patients - n_ct)]
    else:
        groups = [(Modality(spec.modality), spec.patients)]

    train, val, test = [], [], []
    offset = 0
    for modality, count in groups:
        if count < 3:
            raise ValueError(f"client {spec.id}: {modality.value} group needs at least 3 patients, got {count}")
        raw = []
        for i in range(offset, offset + count):
            seed = _patient_seed(spec, client_index, i, master_seed)
            raw.append(generate_synthetic_volume(modality, seed, gen, variant=spec.mri_variant,
                                                 patient_id=f"{spec.id}-p{i:03d}"))
        offset += count
        stats = dataset_norm_stats(raw)
        vols = [preprocess(v, stats, target) for v in raw]
        order = _rng(master_seed, 202, client_index, _MOD_CODE[modality]).permutation(count)
        n_tr, n_va, _ = split_counts(count)
        train += [vols[j] for j in order[:n_tr]]
        val += [vols[j] for j in order[n_tr:n_tr + n_va]]
        test += [vols[j] for j in order[n_tr + n_va:]]
    return ClientDataset(spec.id, spec.modality, train, val, test)


def split_clients(specs: Sequence[ClientSpec], seed: int, generator: GeneratorConfig = GeneratorConfig(),
                  target: tuple[int, int] | None = None) -> list[ClientDataset]:
    """Generate, preprocess and 40/20/40-split every client's patients.

    Mixed clients are split per modality so both modalities reach every split.
    """
    return [build_client(s, i, seed, generator, target) for i, s in enumerate(specs)]


# ---- volume files ----------------------------------------------------------
# u32 header length, JSON header, float32 slices, uint8 masks (little-endian)

def write_volume(path: str | Path, volume: Volume) -> None:
    header = {
        "id": volume.patient_id,
        "modality": volume.modality.value,
        "variant": volume.variant,
        "shape": list(volume.slices.shape),
        "seed": volume.meta.get("seed"),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(volume.slices.astype("<f4").tobytes())
        fh.write(volume.masks.astype(np.uint8).tobytes())


def read_volume(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated volume file")
    (hlen,) = struct.unpack_from("<I", raw)
    header = json.loads(raw[4:4 + hlen])
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    start = 4 + hlen
    if len(raw) != start + 5 * count:
        raise ValueError(f"{path}: expected {start + 5 * count} bytes, found {len(raw)}")
    slices = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    masks = np.frombuffer(raw, dtype=np.uint8, count=count, offset=start + 4 * count).reshape(shape).copy()
    return Volume(header["id"], Modality(header["modality"]), slices, masks,
                  variant=header.get("variant", 0), meta={"seed": header.get("seed")})


def export_volumes(directory: str | Path, volumes: Sequence[Volume]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for v in volumes:
        p = directory / f"{v.patient_id}.vol"
        write_volume(p, v)
        paths.append(p)
    return paths


def import_volumes(directory: str | Path) -> list[Volume]:
    return [read_volume(p) for p in sorted(Path(directory).glob("*.vol"))]
