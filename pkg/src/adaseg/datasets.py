"""Synthetic two-domain segmentation data with a controllable shift.

Both domains draw from the same scene process: a shaded background with one
star-convex blob per foreground class. Target samples differ by the shift
spec: a palette rotation (color_shift), additive smooth noise
(texture_noise_sigma), and extra boundary wobble of the blobs
(shape_deform). The wobble perturbs the shape itself before rasterization,
so target masks remain exact by construction; the appearance shifts touch
only the image.

Images are quantized to the 8-bit grid at generation time, which makes the
PNG round trip bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ValidationError

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# per-class fill colors (class 0 is background); palettes beyond K=4 cycle.
# all entries share near-equal luminance so hue is the only class cue: the
# target palette rotation then genuinely misleads a source-only model
_CLASS_COLORS = np.array([
    [0.53, 0.53, 0.53],   # background: neutral
    [0.80, 0.42, 0.40],   # class 1: red hue
    [0.35, 0.52, 0.95],   # class 2: blue hue
    [0.30, 0.65, 0.35],   # class 3: green hue
])


@dataclass
class ShiftSpec:
    color_shift: float = 0.0
    texture_noise_sigma: float = 0.0
    shape_deform: float = 0.0

    def validate(self):
        if not (0.0 <= self.color_shift <= 1.0):
            raise ConfigurationError(f"shift_spec.color_shift outside [0,1]: {self.color_shift}")
        if self.texture_noise_sigma < 0:
            raise ConfigurationError(
                f"shift_spec.texture_noise_sigma negative: {self.texture_noise_sigma}")
        if not (0.0 <= self.shape_deform <= 1.0):
            raise ConfigurationError(f"shift_spec.shape_deform outside [0,1]: {self.shape_deform}")


@dataclass
class SynthConfig:
    image_size: int = 32
    num_classes: int = 2
    num_source: int = 60
    num_target: int = 60
    num_target_eval: int = 40
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0
    # class-frequency knob: sampled blob radius as a fraction of image size
    blob_radius_range: tuple[float, float] = (0.18, 0.30)

    def validate(self):
        if not isinstance(self.image_size, (int, np.integer)) or self.image_size < 16:
            raise ConfigurationError(f"image_size must be an integer >= 16: {self.image_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2: {self.num_classes}")
        if self.num_source < 1:
            raise ConfigurationError(f"num_source must be >= 1: {self.num_source}")
        if self.num_target < 1:
            raise ConfigurationError(f"num_target must be >= 1: {self.num_target}")
        if self.num_target_eval < 1:
            raise ConfigurationError(f"num_target_eval must be >= 1: {self.num_target_eval}")
        lo, hi = self.blob_radius_range
        if not (0.05 <= lo <= hi <= 0.45):
            raise ConfigurationError(f"blob_radius_range invalid: {self.blob_radius_range}")
        self.shift.validate()


@dataclass
class LabeledExample:
    image: np.ndarray                 # [H, W, 3] float32 in [0,1], 8-bit grid
    mask: np.ndarray | None = None    # [H, W] uint8 class indices
    split: str = ""


@dataclass
class DomainPairDataset:
    source: list[LabeledExample]
    target_train: list[LabeledExample]
    target_eval: list[LabeledExample]
    num_classes: int
    image_size: int

    def split_arrays(self, name: str) -> tuple[np.ndarray, np.ndarray | None]:
        """Stack a split into (images [N,3,H,W] float32, masks [N,H,W] or None)."""
        examples = getattr(self, name)
        images = np.stack([np.moveaxis(e.image, -1, 0) for e in examples])
        if examples[0].mask is None:
            return images, None
        masks = np.stack([e.mask.astype(np.int64) for e in examples])
        return images, masks


def _from_uint8(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / np.float32(255.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return _from_uint8(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8))


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Low-frequency random field in roughly [-1, 1] via bilinear upsampling."""
    coarse = rng.normal(0.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, size)
    xs = np.linspace(0, cells, size)
    y0 = np.clip(ys.astype(int), 0, cells - 1)
    x0 = np.clip(xs.astype(int), 0, cells - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x0 + 1] * wx
    bot = coarse[y0 + 1][:, x0] * (1 - wx) + coarse[y0 + 1][:, x0 + 1] * wx
    return top * (1 - wy) + bot * wy


def _render_scene(rng: np.random.Generator, cfg: SynthConfig, deform_extra: float
                  ) -> tuple[np.ndarray, np.ndarray]:
    """One scene: shaded background plus one blob per foreground class."""
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    bg = _CLASS_COLORS[0] + rng.normal(0, 0.03, size=3)
    img = np.empty((n, n, 3))
    grad = 0.10 * (yy - 0.5) + 0.06 * _smooth_field(rng, n, cells=3)
    img[:] = bg[None, None, :] + grad[:, :, None]
    mask = np.zeros((n, n), dtype=np.uint8)

    k_fg = cfg.num_classes - 1
    lo, hi = cfg.blob_radius_range
    # centers on a jittered ring to keep blobs disjoint (regions stay connected)
    base_angle = rng.uniform(0, 2 * np.pi)
    for k in range(1, cfg.num_classes):
        if k_fg == 1:
            cy, cx = rng.uniform(0.32, 0.68, size=2)
            radius = rng.uniform(lo, hi)
        else:
            ang = base_angle + 2 * np.pi * (k - 1) / k_fg
            ring = 0.24
            cy = 0.5 + ring * np.sin(ang) + rng.uniform(-0.04, 0.04)
            cx = 0.5 + ring * np.cos(ang) + rng.uniform(-0.04, 0.04)
            radius = rng.uniform(lo, hi) * (1.6 / k_fg)
        amp = 0.18 + 0.35 * deform_extra
        freqs = rng.integers(2, 5, size=2)
        phases = rng.uniform(0, 2 * np.pi, size=2)
        amps = rng.uniform(0.4, 1.0, size=2) * amp / 2
        theta = np.arctan2(yy - cy, xx - cx)
        r_theta = radius * (1.0
                            + amps[0] * np.sin(freqs[0] * theta + phases[0])
                            + amps[1] * np.sin(freqs[1] * theta + phases[1]))
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        inside = dist <= r_theta
        color = _CLASS_COLORS[k % len(_CLASS_COLORS)] + rng.normal(0, 0.03, size=3)
        # mild rim shading only: luminance must stay uninformative
        shade = 1.0 - 0.08 * np.clip(dist / np.maximum(r_theta, 1e-9), 0, 1)
        img[inside] = color[None, :] * shade[inside, None] + grad[inside, None]
        mask[inside] = k
    return img, mask


def _apply_appearance_shift(img: np.ndarray, shift: ShiftSpec,
                            rng: np.random.Generator) -> np.ndarray:
    """Palette rotation then additive texture noise (image only, never masks)."""
    out = img
    s = shift.color_shift
    if s > 0:
        rotated = out[:, :, [2, 0, 1]]                  # R->G->B->R palette turn
        out = (1.0 - s) * out + s * rotated
        out = out + 0.08 * s                            # slight exposure change
    sigma = shift.texture_noise_sigma
    if sigma > 0:
        n = img.shape[0]
        coarse = np.stack([_smooth_field(rng, n, cells=6) for _ in range(3)], axis=-1)
        fine = rng.normal(0.0, 1.0, size=out.shape)
        out = out + sigma * (0.7 * coarse + 0.5 * fine)
    return out


def synth_generate(config: SynthConfig) -> DomainPairDataset:
    """Deterministic two-domain dataset from a config (pure in config.seed)."""
    config.validate()
    streams = np.random.SeedSequence(config.seed).spawn(3)
    rng_src = np.random.default_rng(streams[0])
    rng_tgt = np.random.default_rng(streams[1])
    rng_ev = np.random.default_rng(streams[2])

    def make(rng, count, shifted: bool, split: str, keep_mask: bool):
        out = []
        for _ in range(count):
            deform = config.shift.shape_deform if shifted else 0.0
            img, mask = _render_scene(rng, config, deform)
            if shifted:
                img = _apply_appearance_shift(img, config.shift, rng)
            out.append(LabeledExample(image=_quantize(img),
                                      mask=mask if keep_mask else None,
                                      split=split))
        return out

    return DomainPairDataset(
        source=make(rng_src, config.num_source, False, "source", True),
        target_train=make(rng_tgt, config.num_target, True, "target_train", False),
        target_eval=make(rng_ev, config.num_target_eval, True, "target_eval", True),
        num_classes=config.num_classes,
        image_size=config.image_size,
    )


# ---------------------------------------------------------------------------
# on-disk format: 8-bit PNGs plus one JSON manifest with relative paths
# ---------------------------------------------------------------------------

def save_dataset(ds: DomainPairDataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"version": MANIFEST_VERSION, "num_classes": ds.num_classes,
                "image_size": ds.image_size, "splits": []}
    for split in ("source", "target_train", "target_eval"):
        examples = getattr(ds, split)
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        entries = []
        for i, ex in enumerate(examples):
            img_rel = f"{split}/img_{i:05d}.png"
            q = np.round(ex.image * 255.0).astype(np.uint8)
            Image.fromarray(q, mode="RGB").save(out_dir / img_rel)
            entry = {"image": img_rel, "mask": None}
            if ex.mask is not None:
                msk_rel = f"{split}/msk_{i:05d}.png"
                Image.fromarray(ex.mask.astype(np.uint8), mode="L").save(out_dir / msk_rel)
                entry["mask"] = msk_rel
            entries.append(entry)
        manifest["splits"].append({"name": split, "entries": entries})
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(manifest_path) -> DomainPairDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValidationError(f"manifest not found: {manifest_path}", code="DATA")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version: {manifest.get('version')}",
                              code="DATA")
    root = manifest_path.parent
    k = int(manifest["num_classes"])
    size = int(manifest["image_size"])
    splits: dict[str, list[LabeledExample]] = {}
    for split in manifest["splits"]:
        name = split["name"]
        examples = []
        for entry in split["entries"]:
            img_path = root / entry["image"]
            if not img_path.exists():
                raise ValidationError(f"missing image file: {entry['image']}", code="DATA")
            img = _from_uint8(np.asarray(Image.open(img_path).convert("RGB")))
            if img.shape != (size, size, 3):
                raise ValidationError(f"bad image size in {entry['image']}: {img.shape}",
                                      code="DATA")
            mask = None
            if entry["mask"] is not None:
                msk_path = root / entry["mask"]
                if not msk_path.exists():
                    raise ValidationError(f"missing mask file: {entry['mask']}", code="DATA")
                mask = np.asarray(Image.open(msk_path)).astype(np.uint8)
                if mask.shape != (size, size):
                    raise ValidationError(f"mask/image size mismatch in {entry['mask']}",
                                          code="DATA")
                if mask.max() >= k:
                    raise ValidationError(
                        f"mask value {mask.max()} >= num_classes {k} in {entry['mask']}",
                        code="DATA")
            examples.append(LabeledExample(image=img, mask=mask, split=name))
        splits[name] = examples
    for required in ("source", "target_train", "target_eval"):
        if required not in splits:
            raise ValidationError(f"manifest missing split {required!r}", code="DATA")
    return DomainPairDataset(source=splits["source"], target_train=splits["target_train"],
                             target_eval=splits["target_eval"], num_classes=k,
                             image_size=size)


def dataset_equal(a: DomainPairDataset, b: DomainPairDataset) -> bool:
    if a.num_classes != b.num_classes or a.image_size != b.image_size:
        return False
    for split in ("source", "target_train", "target_eval"):
        ea, eb = getattr(a, split), getattr(b, split)
        if len(ea) != len(eb):
            return False
        for x, y in zip(ea, eb):
            if not np.array_equal(x.image, y.image):
                return False
            if (x.mask is None) != (y.mask is None):
                return False
            if x.mask is not None and not np.array_equal(x.mask, y.mask):
                return False
    return True


def dataset_checksum(ds: DomainPairDataset) -> str:
    h = hashlib.sha256()
    for split in ("source", "target_train", "target_eval"):
        for ex in getattr(ds, split):
            h.update(ex.image.tobytes())
            h.update(b"/" if ex.mask is None else ex.mask.tobytes())
    return h.hexdigest()
