"""Synthetic multi-modal scenes, RAW ingestion, patchification and masking."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Modality
from .numkit import SeededRng, check_finite
from .objectives import ReconTarget, power_target

DEFAULT_MASK_RATIO = 0.6
DEFAULT_PATCH = 8
DEFAULT_SIZE = 32

# SAR rendering
SAR_LOOKS = 16
POL_WEIGHTS = np.array([0.4, 0.1, 0.1, 0.4])
PHASE_SPREAD = 0.25  # radians per unit of the smooth phase field


@dataclass
class SceneImage:
    modality: Modality
    pixels: np.ndarray  # (H, W, C) float32, channel-last

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != self.modality.channels:
            raise ModalityChannelError(
                f"{self.modality.value} needs {self.modality.channels} channels, got shape {self.pixels.shape}"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


class RawFormatError(ValueError):
    pass


class MagicError(RawFormatError):
    pass


class TruncationError(RawFormatError):
    pass


class ModalityChannelError(RawFormatError):
    pass


# ---------------------------------------------------------------- synthesis


def _terrain(rng: SeededRng, h: int, w: int, n_blobs: int = 4) -> np.ndarray:
    # blob widths of a third to over half the scene keep masked patches inferable from context
    yy, xx = np.mgrid[0:h, 0:w]
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    field = np.zeros((h, w))
    cx = rng.uniform(-0.1, 1.1, n_blobs)
    cy = rng.uniform(-0.1, 1.1, n_blobs)
    sigma = rng.uniform(0.3, 0.6, n_blobs)
    amp = rng.normal(n_blobs)
    for i in range(n_blobs):
        field += amp[i] * np.exp(-((xx - cx[i]) ** 2 + (yy - cy[i]) ** 2) / (2 * sigma[i] ** 2))
    return field


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _optical(rng: SeededRng, h: int, w: int):
    elev = _terrain(rng.spawn(1), h, w)
    veg = _terrain(rng.spawn(2), h, w)
    texture = rng.spawn(3).normal((h, w, 3)) * 0.05
    rgb = np.stack(
        [
            1.2 * elev - 0.6 * veg,
            0.6 * elev + 1.0 * veg,
            0.9 * elev - 0.3 * veg,
        ],
        axis=-1,
    )
    return _sigmoid(rgb + texture), elev, veg


def _scene_rng(seed: int) -> SeededRng:
    # every modality renders the same underlying scene for a given seed
    return SeededRng(seed).spawn(Modality.OPT.code)


def _luminance(rgb):
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def render_sar_l1(seed: int, h: int = DEFAULT_SIZE, w: int = DEFAULT_SIZE):
    """Return ``(pixels[H, W, 8], amplitudes[H, W, 4])`` for a synthetic SAR-L1 scene.

    Each polarization's intensity is ``luminance * weight * speckle`` with
    gamma-distributed speckle; phases are smooth fields.
    """
    rng = SeededRng(seed).spawn(Modality.SAR_L1.code)
    rgb, elev, veg = _optical(_scene_rng(seed), h, w)
    lum = _luminance(rgb)
    # vegetation raises cross-pol returns
    weights = POL_WEIGHTS[None, None, :] * np.stack(
        [np.ones_like(veg), 1 + 0.5 * _sigmoid(veg), 1 + 0.5 * _sigmoid(veg), np.ones_like(veg)], axis=-1
    )
    speckle = rng.spawn(4).gamma(SAR_LOOKS, 1.0 / SAR_LOOKS, (h, w, 4))
    amplitude = np.sqrt(lum[..., None] * weights * speckle)
    pixels = np.empty((h, w, 8))
    for p in range(4):
        phase = PHASE_SPREAD * _terrain(rng.spawn(10 + p), h, w, n_blobs=3) + p * math.pi / 4
        pixels[..., 2 * p] = amplitude[..., p] * np.cos(phase)
        pixels[..., 2 * p + 1] = amplitude[..., p] * np.sin(phase)
    return pixels.astype(np.float32), amplitude


def synth_scene(m: Modality, seed: int, size: int = DEFAULT_SIZE) -> SceneImage:
    """Procedural scene for modality ``m``; deterministic in ``(m, seed, size)``."""
    m = Modality.parse(m)
    h = w = size
    if m is Modality.SAR_L1:
        return SceneImage(m, render_sar_l1(seed, h, w)[0])
    rng = SeededRng(seed).spawn(m.code)
    rgb, elev, veg = _optical(_scene_rng(seed), h, w)
    if m is Modality.OPT:
        px = rgb
    elif m is Modality.MS:
        nir = _sigmoid(1.5 * veg + 0.3 * elev)
        px = np.concatenate([rgb, nir[..., None]], axis=-1)
    else:
        speckle = rng.spawn(4).gamma(SAR_LOOKS, 1.0 / SAR_LOOKS, (h, w))
        px = (_luminance(rgb) * speckle)[..., None]
    return SceneImage(m, px.astype(np.float32))


# ------------------------------------------------------------ patchify/mask


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(P, patch*patch*C)`` in row-major patch order."""
    h, w, c = pixels.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    return np.ascontiguousarray(
        pixels.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)
    )


def unpatchify(tokens: np.ndarray, patch: int, h: int, w: int) -> np.ndarray:
    gh, gw = h // patch, w // patch
    c = tokens.shape[1] // (patch * patch)
    return np.ascontiguousarray(tokens.reshape(gh, gw, patch, patch, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c))


@dataclass
class MaskPlan:
    num_patches: int
    masked: np.ndarray  # sorted unique indices
    ratio: float
    seed: int

    @property
    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.num_patches, dtype=bool)
        out[self.masked] = True
        return out


def plan_mask(num_patches: int, ratio: float, seed: int) -> MaskPlan:
    """Uniformly sample ``round(ratio * P)`` patches without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    count = int(math.floor(ratio * num_patches + 0.5))
    perm = SeededRng(seed).spawn(0x4D41534B).permutation(num_patches)
    return MaskPlan(num_patches, np.sort(perm[:count]), ratio, seed)


# ------------------------------------------------------------ normalisation


@dataclass
class NormStats:
    """Per-modality channel statistics used for standardisation."""

    mean: dict[str, list[float]] = field(default_factory=dict)
    std: dict[str, list[float]] = field(default_factory=dict)
    target_mean: dict[str, list[float]] = field(default_factory=dict)
    target_std: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "target_mean": self.target_mean, "target_std": self.target_std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**d)

    def standardize(self, img: SceneImage) -> np.ndarray:
        key = img.modality.value
        return (img.pixels - np.asarray(self.mean[key])) / np.asarray(self.std[key])

    def target(self, img: SceneImage) -> np.ndarray:
        """Reconstruction target image ``(H, W, target_channels)``, standardised."""
        key = img.modality.value
        raw = power_target(img.pixels)[..., None] if img.modality is Modality.SAR_L1 else img.pixels
        return (raw - np.asarray(self.target_mean[key])) / np.asarray(self.target_std[key])

    def destandardize_target(self, m: Modality, t: np.ndarray) -> np.ndarray:
        key = Modality.parse(m).value
        return t * np.asarray(self.target_std[key]) + np.asarray(self.target_mean[key])


def compute_norm_stats(modalities, count: int = 64, seed: int = 20240501, size: int = DEFAULT_SIZE) -> NormStats:
    stats = NormStats()
    for m in map(Modality.parse, modalities):
        imgs = [synth_scene(m, seed + i, size) for i in range(count)]
        px = np.stack([im.pixels for im in imgs]).astype(np.float64).reshape(-1, m.channels)
        stats.mean[m.value] = px.mean(axis=0).tolist()
        stats.std[m.value] = np.maximum(px.std(axis=0), 1e-6).tolist()
        if m is Modality.SAR_L1:
            pw = np.stack([power_target(im.pixels) for im in imgs]).reshape(-1, 1)
            stats.target_mean[m.value] = pw.mean(axis=0).tolist()
            stats.target_std[m.value] = np.maximum(pw.std(axis=0), 1e-6).tolist()
        else:
            stats.target_mean[m.value] = stats.mean[m.value]
            stats.target_std[m.value] = stats.std[m.value]
    return stats


# -------------------------------------------------------------------- batch


@dataclass
class ModalTokens:
    modality: Modality
    tokens: np.ndarray  # (B, P, D_in), masked patches zeroed
    mask: np.ndarray  # (B, P) bool
    targets: np.ndarray  # (B, P, D_out)
    plans: list[MaskPlan]

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    def recon_target(self) -> ReconTarget:
        b, p, d = self.targets.shape
        return ReconTarget(self.modality, self.targets.reshape(b * p, d), self.mask.reshape(-1))


@dataclass
class MultiModalBatch:
    parts: dict[Modality, ModalTokens]

    @property
    def counts(self) -> dict[str, int]:
        return {m.value: t.count for m, t in self.parts.items()}


def make_batch(images: list[SceneImage], stats: NormStats, patch: int = DEFAULT_PATCH,
               ratio: float = DEFAULT_MASK_RATIO, seed: int = 0) -> MultiModalBatch:
    """Standardise, patchify and mask a list of (possibly mixed-modality) images."""
    groups: dict[Modality, list] = {}
    root = SeededRng(seed)
    for i, img in enumerate(images):
        check_finite(img.pixels, "scene pixels")
        x = patchify(stats.standardize(img), patch)
        t = patchify(stats.target(img), patch)
        plan = plan_mask(x.shape[0], ratio, int(root.spawn(i).integers(0, 2**62)))
        keep = ~plan.as_bool
        groups.setdefault(img.modality, []).append((x * keep[:, None], plan.as_bool, t, plan))
    parts = {}
    for m, items in groups.items():
        parts[m] = ModalTokens(
            modality=m,
            tokens=np.stack([it[0] for it in items]).astype(np.float32),
            mask=np.stack([it[1] for it in items]),
            targets=np.stack([it[2] for it in items]).astype(np.float32),
            plans=[it[3] for it in items],
        )
    return MultiModalBatch(parts)


# ---------------------------------------------------------------------- RAW

RAW_MAGIC = b"RMRW"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sHBBIII")


def write_raw(path, img: SceneImage) -> None:
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, img.modality.code, 0, img.height, img.width, img.channels)
    payload = np.ascontiguousarray(img.pixels, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_raw(path) -> SceneImage:
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise TruncationError(f"{path}: header truncated ({len(blob)} bytes)")
    magic, version, code, _, h, w, c = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise RawFormatError(f"{path}: unsupported RAW version {version}")
    need = h * w * c * 4
    payload = blob[_RAW_HEADER.size:]
    if len(payload) < need:
        raise TruncationError(f"{path}: payload has {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise RawFormatError(f"{path}: {len(payload) - need} trailing bytes")
    m = Modality.from_code(code)
    if c != m.channels:
        raise ModalityChannelError(f"{path}: header declares {m.value} but has {c} channels")
    px = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    return SceneImage(m, check_finite(px, f"{path} payload"))


def load_manifest(path) -> list[tuple[Path, Modality]]:
    """Manifest JSON: ``{"images": [{"path": ..., "modality": ...}, ...]}``; paths relative to the manifest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc["images"] if isinstance(doc, dict) else doc
    return [((path.parent / e["path"]).resolve(), Modality.parse(e["modality"])) for e in entries]


def write_manifest(path, entries) -> None:
    path = Path(path)
    doc = {"images": [{"path": str(p), "modality": Modality.parse(m).value} for p, m in entries]}
    path.write_text(json.dumps(doc, indent=2))


def ingest_raw(path, declared: Modality | str) -> SceneImage:
    """Read a RAW file and check it against the manifest's declared modality."""
    img = read_raw(path)
    declared = Modality.parse(declared)
    if img.modality is not declared:
        raise ModalityChannelError(f"{path}: manifest declares {declared.value}, file holds {img.modality.value}")
    return img


def ingest_manifest(path) -> list[SceneImage]:
    return [ingest_raw(p, m) for p, m in load_manifest(path)]
