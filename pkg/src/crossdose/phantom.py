"""Synthetic activity phantoms and low-dose acquisition simulation.

A phantom is a 2-D slice in SUV units: an elliptical body filled with a
background activity, elliptical organs painted on top, and small hot lesions.
An optional smooth multiplicative texture field adds per-subject variability,
and a Gaussian blur stands in for the reconstruction post-filter.

Low-dose acquisition is simulated by pixelwise Poisson thinning.  With kappa
expected full-dose counts per SUV per pixel and dose fraction d, the observed
image is

    x = Poisson(d * kappa * y) / (d * kappa)

which is unbiased (E[x] = y) with variance y / (d * kappa): halving the dose
doubles the noise variance, and at very low doses the count statistics become
strongly skewed, exactly the regime this lab studies.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .raster import (
    STANDARD_DOSES,
    DatasetManifest,
    reference_path,
    lowdose_path,
    subject_dir,
    write_manifest,
    write_raster,
)


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (cx, cy) in normalized [-1, 1] coordinates
    axes: tuple[float, float]    # semi-axes as fractions of the half-width
    rotation_deg: float
    suv: float


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float]  # normalized coordinates, must lie in the body
    radius: float                # pixels
    peak_suv: float


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 128
    background_suv: float = 1.0
    body_center: tuple[float, float] = (0.0, 0.0)
    body_axes: tuple[float, float] = (0.84, 0.68)
    body_rotation_deg: float = 0.0
    organs: tuple[Ellipse, ...] = ()
    lesions: tuple[Lesion, ...] = ()
    smoothing_sigma: float = 1.0     # pixels, applied to the reference only
    texture_amplitude: float = 0.0   # relative modulation of activity inside the body
    suv_clip_max: float = 16.0
    seed: int = 0


def _grid(size: int):
    c = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(c, c)  # xx, yy


def _ellipse_mask(xx, yy, center, axes, rotation_deg):
    a, b = axes
    if a <= 0 or b <= 0:
        raise ValidationError(f"degenerate ellipse axes {axes}")
    th = np.deg2rad(rotation_deg)
    dx, dy = xx - center[0], yy - center[1]
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _inside_body(spec: PhantomSpec, point) -> bool:
    a, b = spec.body_axes
    th = np.deg2rad(spec.body_rotation_deg)
    dx, dy = point[0] - spec.body_center[0], point[1] - spec.body_center[1]
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def validate_spec(spec: PhantomSpec) -> None:
    if spec.size < 32:
        raise ValidationError(f"phantom size {spec.size} < 32")
    if spec.background_suv < 0 or spec.suv_clip_max <= 0:
        raise ValidationError("SUV values must be nonnegative, clip max positive")
    if spec.smoothing_sigma < 0:
        raise ValidationError("smoothing_sigma must be >= 0")
    if spec.body_axes[0] <= 0 or spec.body_axes[1] <= 0:
        raise ValidationError(f"degenerate body axes {spec.body_axes}")
    for organ in spec.organs:
        if organ.axes[0] <= 0 or organ.axes[1] <= 0:
            raise ValidationError(f"degenerate (zero-area) organ: {organ}")
        if organ.suv < 0:
            raise ValidationError(f"negative organ SUV: {organ}")
    for lesion in spec.lesions:
        if lesion.radius <= 0 or lesion.peak_suv < 0:
            raise ValidationError(f"degenerate lesion: {lesion}")
        if not _inside_body(spec, lesion.center):
            raise ValidationError(f"lesion at {lesion.center} lies outside the body ellipse")


def synthesize_reference(spec: PhantomSpec) -> np.ndarray:
    """Render the clean full-dose slice for ``spec`` (float32, SUV).

    Deterministic given ``spec.seed``; the seed only drives the texture field.
    """
    validate_spec(spec)
    xx, yy = _grid(spec.size)
    img = np.zeros((spec.size, spec.size), dtype=np.float64)
    body = _ellipse_mask(xx, yy, spec.body_center, spec.body_axes, spec.body_rotation_deg)
    img[body] = spec.background_suv
    for organ in spec.organs:
        mask = _ellipse_mask(xx, yy, organ.center, organ.axes, organ.rotation_deg) & body
        img[mask] = organ.suv
    if spec.texture_amplitude > 0:
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0x7E47)))
        field = gaussian_filter(rng.standard_normal(img.shape), sigma=spec.size / 16.0)
        field /= max(field.std(), 1e-12)
        img[body] *= 1.0 + spec.texture_amplitude * field[body]
        np.clip(img, 0.0, None, out=img)
    half = (spec.size - 1) / 2.0
    for lesion in spec.lesions:
        # normalized -> pixel coordinates; lesions are solid discs at peak SUV
        cx = (lesion.center[0] + 1.0) * half
        cy = (lesion.center[1] + 1.0) * half
        px = np.arange(spec.size)
        dist2 = (px[None, :] - cx) ** 2 + (px[:, None] - cy) ** 2
        mask = dist2 <= lesion.radius**2
        img[mask] = np.maximum(img[mask], lesion.peak_suv)
    if spec.smoothing_sigma > 0:
        img = gaussian_filter(img, spec.smoothing_sigma)
    np.clip(img, 0.0, spec.suv_clip_max, out=img)
    return img.astype(np.float32)


def lesion_mask(spec: PhantomSpec) -> np.ndarray:
    """Boolean union of the lesion discs, pre-smoothing geometry."""
    half = (spec.size - 1) / 2.0
    mask = np.zeros((spec.size, spec.size), dtype=bool)
    px = np.arange(spec.size)
    for lesion in spec.lesions:
        cx = (lesion.center[0] + 1.0) * half
        cy = (lesion.center[1] + 1.0) * half
        dist2 = (px[None, :] - cx) ** 2 + (px[:, None] - cy) ** 2
        mask |= dist2 <= lesion.radius**2
    return mask


@dataclass(frozen=True)
class DoseSimConfig:
    dose_fraction: float
    counts_per_suv: float = 50.0  # kappa: expected full-dose counts per SUV per pixel
    seed: int = 0


@dataclass(frozen=True)
class LowDoseImage:
    data: np.ndarray
    dose_fraction: float


def simulate_low_dose(y: np.ndarray, cfg: DoseSimConfig) -> LowDoseImage:
    """Poisson-thin the reference ``y`` down to ``cfg.dose_fraction``."""
    if not 0 < cfg.dose_fraction <= 1:
        raise ValidationError(f"dose fraction {cfg.dose_fraction} outside (0, 1]")
    if cfg.counts_per_suv <= 0:
        raise ValidationError(f"counts_per_suv {cfg.counts_per_suv} must be positive")
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValidationError("reference image must be finite and nonnegative")
    scale = cfg.dose_fraction * cfg.counts_per_suv
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    counts = rng.poisson(scale * y)
    return LowDoseImage((counts / scale).astype(np.float32), cfg.dose_fraction)


def _subject_key(subject_id: str) -> int:
    return zlib.crc32(subject_id.encode("utf-8"))


def random_phantom_spec(subject_id: str, seed: int, size: int = 128) -> PhantomSpec:
    """Deterministic per-subject phantom: geometry and texture derive from
    (seed, subject_id), so parallel and serial dataset builds agree."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _subject_key(subject_id))))
    body_axes = (0.80 + 0.08 * rng.uniform(-1, 1), 0.64 + 0.08 * rng.uniform(-1, 1))
    body_rot = rng.uniform(-10, 10)
    organs = []
    for _ in range(rng.integers(2, 5)):
        organs.append(
            Ellipse(
                center=(0.5 * rng.uniform(-1, 1), 0.4 * rng.uniform(-1, 1)),
                axes=(rng.uniform(0.08, 0.30), rng.uniform(0.08, 0.30)),
                rotation_deg=rng.uniform(0, 180),
                suv=rng.uniform(1.5, 4.0),
            )
        )
    lesions = []
    for _ in range(rng.integers(1, 4)):
        lesions.append(
            Lesion(
                center=(0.45 * rng.uniform(-1, 1), 0.35 * rng.uniform(-1, 1)),
                radius=rng.uniform(3.0, 7.0) * size / 128.0,
                peak_suv=rng.uniform(6.0, 12.0),
            )
        )
    return PhantomSpec(
        size=size,
        background_suv=rng.uniform(0.8, 1.2),
        body_axes=body_axes,
        body_rotation_deg=body_rot,
        organs=tuple(organs),
        lesions=tuple(lesions),
        smoothing_sigma=1.0,
        texture_amplitude=0.15,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def _pair_seed(seed: int, subject_id: str, dose: float) -> int:
    ss = np.random.SeedSequence((seed, _subject_key(subject_id), round(dose * 10000)))
    return int(ss.generate_state(1)[0])


def build_dataset(
    specs: dict[str, PhantomSpec],
    root,
    seed: int = 0,
    kappa: float = 50.0,
    dose_levels: tuple[float, ...] = STANDARD_DOSES,
    train_fraction: float = 0.75,
) -> DatasetManifest:
    """Write one subject directory per spec plus the manifest.

    The split is deterministic: the first ceil(train_fraction * n) subjects in
    sorted id order train, the rest test.
    """
    ids = sorted(specs)
    if not ids:
        raise ValidationError("no phantom specs given")
    n_train = int(round(train_fraction * len(ids)))
    split = {sid: ("train" if i < n_train else "test") for i, sid in enumerate(ids)}
    clip = max(specs[sid].suv_clip_max for sid in ids)
    for sid in ids:
        subject_dir(root, sid).mkdir(parents=True, exist_ok=True)
        y = synthesize_reference(specs[sid])
        write_raster(reference_path(root, sid), y)
        for d in dose_levels:
            sim = DoseSimConfig(d, kappa, _pair_seed(seed, sid, d))
            write_raster(lowdose_path(root, sid, d), simulate_low_dose(y, sim).data)
    manifest = DatasetManifest(
        subject_ids=tuple(ids),
        dose_levels=tuple(dose_levels),
        split=split,
        seed=seed,
        suv_clip_max=clip,
        kappa=kappa,
        size=specs[ids[0]].size,
    )
    write_manifest(root, manifest)
    return manifest


def make_standard_dataset(
    root,
    n_subjects: int = 24,
    seed: int = 7,
    size: int = 128,
    kappa: float = 50.0,
    dose_levels: tuple[float, ...] = STANDARD_DOSES,
    train_fraction: float = 0.75,
) -> DatasetManifest:
    """Random phantom suite with the standard six dose levels."""
    ids = [f"s{i:02d}" for i in range(n_subjects)]
    specs = {sid: random_phantom_spec(sid, seed, size) for sid in ids}
    return build_dataset(specs, root, seed=seed, kappa=kappa,
                         dose_levels=dose_levels, train_fraction=train_fraction)


def manifest_specs(manifest: DatasetManifest) -> dict[str, PhantomSpec]:
    """Re-derive the phantom specs recorded by a standard dataset build.

    Works because generation is a pure function of (seed, subject_id, size);
    used by the noise analysis to recover lesion masks without storing them.
    """
    return {sid: random_phantom_spec(sid, manifest.seed, manifest.size)
            for sid in manifest.subject_ids}
