"""Synthetic two-camera video re-id data and a frame-directory loader.

Identities are procedurally drawn pedestrians (head, torso, legs, a stripe
and an optional bag) pasted over a camera-specific background.  Each
sequence jitters the figure position per frame, applies the camera's colour
transform and injects occlusion, blur and brightness corruption per frame.
Every sequence draws from its own stream seeded by (seed, identity, camera,
sequence tags), so rendering order never matters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter, zoom

log = logging.getLogger(__name__)

_TEMPLATE_TAG = 11
_CAMERA_TAG = 13
_BATCH_TAG = 17
_TRAIN_TAG = 0
_EVAL_TAG = 1


@dataclass
class Corruption:
    occlusion_prob: float = 0.2
    occlusion_min: int = 10
    occlusion_max: int = 22
    blur_prob: float = 0.2
    blur_kernel: int = 3
    brightness_jitter: float = 0.15

    def __post_init__(self):
        for name in ("occlusion_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 1 <= self.occlusion_min <= self.occlusion_max:
            raise ValueError("need 1 <= occlusion_min <= occlusion_max")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be a positive odd integer")
        if not 0.0 <= self.brightness_jitter < 1.0:
            raise ValueError("brightness_jitter must be in [0, 1)")

    @classmethod
    def off(cls) -> "Corruption":
        return cls(occlusion_prob=0.0, blur_prob=0.0, brightness_jitter=0.0)


@dataclass
class SynthConfig:
    num_identities: int = 20
    num_cameras: int = 2
    frames: int = 8
    image_height: int = 64
    image_width: int = 32
    corruption: Corruption = field(default_factory=Corruption)
    camera_strength: float = 0.8
    max_translation: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 1 or self.num_cameras < 1 or self.frames < 1:
            raise ValueError("identities, cameras and frames must be positive")
        if self.image_height < 16 or self.image_width < 8:
            raise ValueError("image must be at least 16x8")
        if self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image_height, self.image_width


@dataclass
class VideoBatch:
    images: np.ndarray  # [N*K, T, 3, h, w]
    labels: np.ndarray  # identity per sequence
    cameras: np.ndarray
    n_ids: int
    k_seqs: int


@dataclass
class Template:
    figure: np.ndarray  # [3, h, w]
    mask: np.ndarray  # [h, w] bool, pedestrian pixels


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: tuple[int, int], amp: float) -> np.ndarray:
    coarse = rng.random((3, *cells))
    up = zoom(coarse, (1, h / cells[0], w / cells[1]), order=1, mode="nearest")
    return amp * up[:, :h, :w]


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def gen_identity(identity: int, seed: int, config: SynthConfig) -> Template:
    """Deterministic pedestrian template for ``identity``."""
    if not 0 <= identity < config.num_identities:
        raise ValueError(f"identity {identity} out of range [0, {config.num_identities})")
    rng = np.random.default_rng([seed, _TEMPLATE_TAG, identity])
    h, w = config.image_size
    fig = np.zeros((3, h, w))
    mask = np.zeros((h, w), dtype=bool)

    def paint(region: np.ndarray, colour: np.ndarray) -> None:
        fig[:, region] = colour[:, None]
        mask[region] = True

    yy, xx = np.mgrid[0:h, 0:w]
    cx = w / 2 + rng.uniform(-1.5, 1.5)
    torso_w = w * rng.uniform(0.26, 0.4)
    head_r = h * rng.uniform(0.06, 0.08)
    neck = h * 0.05 + 2 * head_r
    hip = h * rng.uniform(0.5, 0.6)
    feet = h * 0.95
    upper = rng.random(3)
    lower = rng.random(3)
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.6, 1.0)
    paint(_ellipse(h, w, h * 0.05 + head_r, cx, head_r, head_r * 0.85), skin)
    paint((yy >= neck) & (yy < hip) & (np.abs(xx - cx) <= torso_w), upper)
    leg_gap = rng.uniform(0.5, 2.0)
    legs = (yy >= hip) & (yy < feet) & (np.abs(xx - cx) <= torso_w * 0.85) & (np.abs(xx - cx) >= leg_gap)
    paint(legs, lower)
    # stripe on torso or legs at an identity-specific height
    s0 = rng.uniform(neck, feet - 4)
    stripe = (yy >= s0) & (yy < s0 + rng.uniform(2, 5)) & mask
    fig[:, stripe] = rng.random(3)[:, None]
    if rng.random() < 0.5:
        side = 1 if rng.random() < 0.5 else -1
        bx = cx + side * (torso_w + 2)
        by = rng.uniform(neck, hip - 6)
        paint((yy >= by) & (yy < by + rng.uniform(6, 12)) & (np.abs(xx - bx) <= 2.5), rng.random(3))
    texture = _smooth_noise(rng, h, w, (8, 4), 0.12) - 0.06
    fig = np.where(mask[None], np.clip(fig + texture, 0.0, 1.0), 0.0)
    return Template(fig, mask)


def camera_style(camera: int, config: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Colour mixing matrix, offset and background scene of one camera."""
    if not 0 <= camera < config.num_cameras:
        raise ValueError(f"camera {camera} out of range [0, {config.num_cameras})")
    rng = np.random.default_rng([config.seed, _CAMERA_TAG, camera])
    s = config.camera_strength
    # hue rotation about the grey axis, cameras spread evenly around the circle
    theta = s * (2 * np.pi * camera / config.num_cameras + rng.uniform(-0.2, 0.2))
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)
    mix = np.diag(1.0 + s * rng.uniform(-0.15, 0.15, size=3)) @ rot
    offset = s * rng.uniform(-0.08, 0.08, size=3)
    h, w = config.image_size
    scene = 0.2 + _smooth_noise(rng, h, w, (4, 3), 0.6)
    return mix, offset, scene


def _stream_seed(config: SynthConfig, identity: int, camera: int, tags: Sequence[int]) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.seed, identity, camera, *tags])


def render_sequence(
    identity: int,
    camera: int,
    frames: int,
    corruption: Corruption,
    seed: int | Sequence[int] | np.random.SeedSequence,
    config: SynthConfig,
    with_masks: bool = False,
):
    """Render ``frames`` images [T, 3, h, w] in [0, 1].

    With ``with_masks`` also returns the per-frame occlusion masks [T, h, w].
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = np.random.default_rng(seed)
    tpl = gen_identity(identity, config.seed, config)
    mix, offset, scene = camera_style(camera, config)
    h, w = config.image_size
    c = corruption
    background = np.clip(scene + rng.normal(0.0, 0.03, size=scene.shape), 0.0, 1.0)
    m = config.max_translation
    base_dy, base_dx = rng.integers(-m, m + 1, size=2) if m else (0, 0)
    out = np.empty((frames, 3, h, w))
    masks = np.zeros((frames, h, w), dtype=bool)
    for t in range(frames):
        dy, dx = (base_dy + rng.integers(-m, m + 1), base_dx + rng.integers(-m, m + 1)) if m else (0, 0)
        fig = np.roll(tpl.figure, (dy, dx), axis=(1, 2))
        fmask = np.roll(tpl.mask, (dy, dx), axis=(0, 1))
        img = np.where(fmask[None], fig, background)
        img = np.einsum("ij,jhw->ihw", mix, img) + offset[:, None, None]
        if c.brightness_jitter > 0:
            img = img * (1.0 + rng.uniform(-c.brightness_jitter, c.brightness_jitter))
        if c.blur_prob > 0 and c.blur_kernel > 1 and rng.random() < c.blur_prob:
            img = uniform_filter(img, size=(1, c.blur_kernel, c.blur_kernel), mode="nearest")
        img = np.clip(img, 0.0, 1.0)
        if c.occlusion_prob > 0 and rng.random() < c.occlusion_prob:
            ph = min(int(rng.integers(c.occlusion_min, c.occlusion_max + 1)), h)
            pw = min(int(rng.integers(c.occlusion_min, c.occlusion_max + 1)), w)
            y0 = int(rng.integers(0, h - ph + 1))
            x0 = int(rng.integers(0, w - pw + 1))
            colour = rng.random(3)
            img[:, y0:y0 + ph, x0:x0 + pw] = colour[:, None, None]
            masks[t, y0:y0 + ph, x0:x0 + pw] = True
        out[t] = img
    return (out, masks) if with_masks else out


def sample_batch(config: SynthConfig, epoch_seed: int, n_ids: int, k_seqs: int) -> VideoBatch:
    """PK batch: ``n_ids`` distinct identities times ``k_seqs`` sequences each."""
    if n_ids > config.num_identities:
        raise ValueError(f"cannot draw {n_ids} identities from {config.num_identities}")
    if n_ids < 1 or k_seqs < 1:
        raise ValueError("n_ids and k_seqs must be positive")
    rng = np.random.default_rng([config.seed, _BATCH_TAG, epoch_seed])
    ids = rng.choice(config.num_identities, size=n_ids, replace=False)
    cams = rng.integers(0, config.num_cameras, size=(n_ids, k_seqs))
    images = np.empty((n_ids * k_seqs, config.frames, 3, *config.image_size))
    labels = np.repeat(ids, k_seqs)
    for i, ident in enumerate(ids):
        for k in range(k_seqs):
            seed = _stream_seed(config, int(ident), int(cams[i, k]), (_TRAIN_TAG, epoch_seed, k))
            images[i * k_seqs + k] = render_sequence(int(ident), int(cams[i, k]), config.frames,
                                                     config.corruption, seed, config)
    return VideoBatch(images, labels, cams.reshape(-1), n_ids, k_seqs)


@dataclass
class SequenceSet:
    """Flat list of sequences with identity/camera labels (and optional masks)."""

    frames: list[np.ndarray]
    identities: np.ndarray
    cameras: np.ndarray
    masks: list[np.ndarray] | None = None
    names: list[str] | None = None


def render_eval_split(
    config: SynthConfig,
    trial: int,
    probes_per_id: int = 1,
    gallery_per_id: int = 1,
    probe_camera: int = 0,
    gallery_camera: int = 1,
    frames: int | None = None,
    corruption: Corruption | None = None,
) -> tuple[SequenceSet, SequenceSet]:
    """Held-out probe/gallery renders, disjoint from every training stream."""
    frames = frames or config.frames
    corruption = corruption or config.corruption
    sets = []
    for cam, count in ((probe_camera, probes_per_id), (gallery_camera, gallery_per_id)):
        seqs, ids, cams = [], [], []
        for ident in range(config.num_identities):
            for j in range(count):
                seed = _stream_seed(config, ident, cam, (_EVAL_TAG, trial, j))
                seqs.append(render_sequence(ident, cam, frames, corruption, seed, config))
                ids.append(ident)
                cams.append(cam)
        sets.append(SequenceSet(seqs, np.array(ids), np.array(cams)))
    return sets[0], sets[1]


# ---------------------------------------------------------------------------
# real data on disk
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp"}


def read_split_file(path: str | Path) -> dict[str, str]:
    """Parse ``person_id<TAB>train|test`` lines."""
    split: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise ValueError(f"{path}:{n}: expected 'person_id<TAB>train|test', got {line!r}")
        split[parts[0]] = parts[1]
    return split


def load_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    """Decode one image to [3, h, w] floats in [0, 1], resized to ``size``."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ValueError(f"cannot decode image file {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_frame_dirs(
    root: str | Path,
    split_file: str | Path | None = None,
    subset: str | None = None,
    image_size: tuple[int, int] = (64, 32),
    min_length: int | None = None,
) -> SequenceSet:
    """Load ``root/person_id/camera_id/seq_id/*`` frame directories.

    Frames are taken in filename order.  With ``split_file`` and ``subset``
    only persons assigned to that subset are loaded.  Sequences shorter than
    ``min_length`` raise, when a minimum is configured.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root {root} does not exist")
    split = read_split_file(split_file) if split_file is not None else None
    seqs, ids, cams, names = [], [], [], []
    person_index: dict[str, int] = {}
    camera_index: dict[str, int] = {}
    for person in sorted(p for p in root.iterdir() if p.is_dir()):
        if split is not None and subset is not None and split.get(person.name) != subset:
            continue
        for camera in sorted(c for c in person.iterdir() if c.is_dir()):
            for seq in sorted(s for s in camera.iterdir() if s.is_dir()):
                files = sorted(f for f in seq.iterdir() if f.suffix.lower() in _IMAGE_SUFFIXES)
                if min_length is not None and len(files) < min_length:
                    raise ValueError(f"sequence {seq} has {len(files)} frames, need at least {min_length}")
                if not files:
                    log.warning("skipping empty sequence directory %s", seq)
                    continue
                seqs.append(np.stack([load_image(f, image_size) for f in files]))
                ids.append(person_index.setdefault(person.name, len(person_index)))
                cams.append(camera_index.setdefault(camera.name, len(camera_index)))
                names.append(f"{person.name}/{camera.name}/{seq.name}")
    return SequenceSet(seqs, np.array(ids, dtype=int), np.array(cams, dtype=int), names=names)


def with_corruption(config: SynthConfig, **overrides) -> SynthConfig:
    """Copy of ``config`` with some corruption fields replaced."""
    return replace(config, corruption=replace(config.corruption, **overrides))
