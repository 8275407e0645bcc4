"""
Synthetic face corpus and manifest ingestion.

``generate_corpus`` renders procedural face-like grayscale images, turns half
of each split into fakes with a localized manipulation, and writes P5 images,
``.mask.pgm`` sidecars for the fakes, and a tab-separated manifest:

    #forenvit-manifest v1
    train/000012_eye_swap.pgm	1	train	eye_swap	studio

The seen families appear in train/val/test; the unseen families appear only
in val_unseen/test_unseen. Every rendered face gets its own id from one
counter, so no base face is shared between splits.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter
from scipy.special import expit

from errors import ConfigurationError, ContractError, DataError, ForenvitIOError, ManifestError
from numerics import Rng

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "#forenvit-manifest v1"
MANIFEST_NAME = "manifest.tsv"
SPLITS = ("train", "val", "test", "val_unseen", "test_unseen")
UNSEEN_SPLITS = ("val_unseen", "test_unseen")
SEEN_METHODS = ("eye_swap", "mouth_grid")
UNSEEN_METHODS = ("landmark_blur", "noise_fill")
REAL_METHOD = "real"
SOURCES = ("studio", "outdoor")


@dataclass
class CorpusSpec:
    train_real: int = 1000
    train_fake: int = 1000
    val_real: int = 200
    val_fake: int = 200
    test_real: int = 200
    test_fake: int = 200
    val_unseen_real: int = 100
    val_unseen_fake: int = 100
    test_unseen_real: int = 100
    test_unseen_fake: int = 100
    image_size: int = 28
    seed: int = 0
    seen_methods: tuple = SEEN_METHODS
    unseen_methods: tuple = UNSEEN_METHODS

    def __post_init__(self):
        self.seen_methods = tuple(self.seen_methods)
        self.unseen_methods = tuple(self.unseen_methods)
        for split in SPLITS:
            for kind in ("real", "fake"):
                count = getattr(self, f"{split}_{kind}")
                if count <= 0:
                    raise ConfigurationError(f"{split}_{kind} must be positive, got {count}")
        if self.image_size < 16:
            raise ConfigurationError(f"image_size must be at least 16, got {self.image_size}")
        known = set(MANIPULATIONS)
        for method in self.seen_methods + self.unseen_methods:
            if method not in known:
                raise ConfigurationError(f"unknown manipulation '{method}'")
        if not self.seen_methods or not self.unseen_methods:
            raise ConfigurationError("both seen and unseen manipulation families are required")
        if set(self.seen_methods) & set(self.unseen_methods):
            raise ConfigurationError("seen and unseen manipulation families must be disjoint")

    def counts(self, split):
        return getattr(self, f"{split}_real"), getattr(self, f"{split}_fake")

    def methods_for(self, split):
        return self.unseen_methods if split in UNSEEN_SPLITS else self.seen_methods


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Landmarks:
    left_eye: tuple
    right_eye: tuple
    nose: tuple
    mouth: tuple
    center: tuple
    radii: tuple

    def points(self):
        return (self.left_eye, self.right_eye, self.nose, self.mouth)


def face_rng(seed, face_id):
    return Rng(seed).split(f"face{face_id}")


def source_of(face_id):
    return SOURCES[face_id % len(SOURCES)]


def render_face(rng, size, source="studio"):
    """A pristine face: oval, two eye blobs, a mouth bar, nose shading, background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    half = size / 2.0
    cy = half + rng.uniform(-1.0, 1.0) * size * 0.04
    cx = half + rng.uniform(-1.0, 1.0) * size * 0.04
    ry = size * rng.uniform(0.36, 0.42)
    rx = size * rng.uniform(0.28, 0.33)

    amplitude = 0.04 if source == "studio" else 0.5
    texture = uniform_filter(rng.normal((size, size)), size=3, mode="nearest")
    background = rng.uniform(0.2, 0.35) + amplitude * texture

    inside = 1.0 - ((yy - cy) / ry) ** 2 - ((xx - cx) / rx) ** 2
    alpha = expit(inside * 8.0)
    image = background * (1.0 - alpha) + rng.uniform(0.6, 0.8) * alpha

    sigma = size * 0.045
    eye_row = cy - 0.25 * ry
    spacing = rx * rng.uniform(0.36, 0.44)
    for eye_col in (cx - spacing, cx + spacing):
        blob = np.exp(-((yy - eye_row) ** 2 + (xx - eye_col) ** 2) / (2.0 * sigma ** 2))
        image -= rng.uniform(0.35, 0.5) * blob

    nose_row = cy + 0.08 * ry
    image -= 0.08 * np.exp(-((yy - nose_row) ** 2 + (xx - cx) ** 2) / (2.0 * (1.5 * sigma) ** 2))

    mouth_row = cy + 0.5 * ry
    bar = expit((0.35 * rx - np.abs(xx - cx)) * 2.0) * expit((size * 0.035 - np.abs(yy - mouth_row)) * 2.0)
    image -= rng.uniform(0.25, 0.35) * bar

    image = np.clip(image, 0.02, 0.9)

    def point(row, col):
        return int(np.clip(round(row), 0, size - 1)), int(np.clip(round(col), 0, size - 1))

    landmarks = Landmarks(
        left_eye=point(eye_row, cx - spacing),
        right_eye=point(eye_row, cx + spacing),
        nose=point(nose_row, cx),
        mouth=point(mouth_row, cx),
        center=point(cy, cx),
        radii=(float(ry), float(rx)),
    )
    return image, landmarks


def box(center, half, size):
    """Square slice pair of side 2*half+1 around ``center``, shifted to stay inside."""
    side = 2 * half + 1
    top = int(np.clip(center[0] - half, 0, size - side))
    left = int(np.clip(center[1] - half, 0, size - side))
    return slice(top, top + side), slice(left, left + side)


def _mask_for(region, size):
    mask = np.zeros((size, size), dtype=bool)
    mask[region] = True
    return mask


def eye_swap(image, landmarks, rng):
    """Replace one eye with the mirrored, relit other eye."""
    size = image.shape[0]
    half = max(2, size // 9)
    left, right = box(landmarks.left_eye, half, size), box(landmarks.right_eye, half, size)
    target, donor = (left, right) if rng.random() < 0.5 else (right, left)
    out = image.copy()
    out[target] = np.clip(image[donor][:, ::-1] + rng.uniform(0.15, 0.25), 0.0, 1.0)
    return out, _mask_for(target, size)


def mouth_grid(image, landmarks, rng):
    """Periodic checker artifact over the mouth."""
    size = image.shape[0]
    region = box(landmarks.mouth, max(2, size // 9), size)
    rows = np.arange(region[0].start, region[0].stop)[:, None]
    cols = np.arange(region[1].start, region[1].stop)[None, :]
    checker = np.where((rows + cols) % 2 == 0, 1.0, -1.0)
    out = image.copy()
    out[region] = np.clip(image[region] + rng.uniform(0.25, 0.35) * checker, 0.0, 1.0)
    return out, _mask_for(region, size)


def landmark_blur(image, landmarks, rng):
    """Smoothed, slightly lifted square at a random facial landmark."""
    size = image.shape[0]
    region = box(rng.choice(landmarks.points()), max(2, size // 10), size)
    smoothed = uniform_filter(image, size=5, mode="nearest")
    out = image.copy()
    out[region] = np.clip(smoothed[region] + 0.12, 0.0, 1.0)
    return out, _mask_for(region, size)


def noise_fill(image, landmarks, rng):
    """Uniform noise over a square somewhere inside the face oval."""
    size = image.shape[0]
    ry, rx = landmarks.radii
    center = (
        int(round(landmarks.center[0] + rng.uniform(-0.4, 0.4) * ry)),
        int(round(landmarks.center[1] + rng.uniform(-0.4, 0.4) * rx)),
    )
    region = box(center, max(2, size // 10), size)
    out = image.copy()
    shape = (region[0].stop - region[0].start, region[1].stop - region[1].start)
    out[region] = rng.uniform(0.0, 1.0, shape)
    return out, _mask_for(region, size)


MANIPULATIONS = {
    "eye_swap": eye_swap,
    "mouth_grid": mouth_grid,
    "landmark_blur": landmark_blur,
    "noise_fill": noise_fill,
}


def apply_manipulation(method, image, landmarks, rng):
    """(fake image, artifact mask); pixels outside the mask are untouched."""
    if method not in MANIPULATIONS:
        raise ConfigurationError(f"unknown manipulation '{method}'")
    return MANIPULATIONS[method](image, landmarks, rng)


def to_bytes(image):
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_sample(seed, face_id, size, method=REAL_METHOD):
    """(image, mask or None) for one corpus entry; reals are the pristine render."""
    rng = face_rng(seed, face_id)
    image, landmarks = render_face(rng.split("render"), size, source_of(face_id))
    if method == REAL_METHOD:
        return image, None
    return apply_manipulation(method, image, landmarks, rng.split("manipulation"))


def generate_class_images(count, num_classes, image_size, rng):
    """Labelled oriented-stripe images for the supervised pretraining recipe."""
    if count <= 0 or num_classes <= 0:
        raise ConfigurationError("count and num_classes must be positive")
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    labels = np.arange(count) % num_classes
    labels = labels[rng.permutation(count)]
    images = np.empty((count, 1, image_size, image_size), dtype=np.float32)
    for i, label in enumerate(labels):
        angle = np.pi * label / num_classes
        phase = rng.uniform(0.0, 2.0 * np.pi)
        stripes = np.sin(2.0 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / 6.0 + phase)
        image = 0.5 + 0.3 * stripes + 0.05 * rng.normal((image_size, image_size))
        images[i, 0] = np.clip(image, 0.0, 1.0)
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------

def write_image(path, pixels):
    """Write uint8 pixels as P5 (H, W) or P6 (H, W, 3)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PPM")
    except OSError as e:
        raise ForenvitIOError(f"cannot write image {path}: {e}") from e
    return path


def read_image(path, channels=1):
    """(C, H, W) float32 in [0, 1] from any image Pillow can read."""
    path = Path(path)
    try:
        with Image.open(path) as image:
            image = image.convert("L" if channels == 1 else "RGB")
            pixels = np.asarray(image, dtype=np.float32) / 255.0
    except OSError as e:
        raise ForenvitIOError(f"cannot read image {path}: {e}") from e
    return pixels[None] if channels == 1 else pixels.transpose(2, 0, 1)


def mask_path(image_path):
    image_path = Path(image_path)
    return image_path.with_name(image_path.stem + ".mask.pgm")


def read_mask(image_path):
    path = mask_path(image_path)
    if not path.exists():
        return None
    return read_image(path)[0] > 0.5


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    path: Path
    label: int
    split: str
    method: str
    source: str
    line: int = 0


@dataclass
class Manifest:
    records: list
    root: Path = field(default_factory=Path)

    def split(self, name):
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split '{name}'; choose from {', '.join(SPLITS)}")
        return [record for record in self.records if record.split == name]

    def relative(self, record):
        try:
            return record.path.relative_to(self.root).as_posix()
        except ValueError:
            return record.path.as_posix()

    def to_text(self):
        lines = [MANIFEST_HEADER]
        for r in self.records:
            lines.append("\t".join((self.relative(r), str(r.label), r.split, r.method, r.source)))
        return "\n".join(lines) + "\n"

    def save(self, path):
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_text(), encoding="utf-8")
        except OSError as e:
            raise ForenvitIOError(f"cannot write manifest {path}: {e}") from e
        return path


def generate_corpus(spec, out_dir):
    """Render every split to ``out_dir`` and write its manifest."""
    out_dir = Path(out_dir)
    size = spec.image_size
    records = []
    face_id = 0
    for split in SPLITS:
        reals, fakes = spec.counts(split)
        families = spec.methods_for(split)
        entries = [REAL_METHOD] * reals + [families[i % len(families)] for i in range(fakes)]
        for method in entries:
            image, mask = render_sample(spec.seed, face_id, size, method)
            path = out_dir / split / f"{face_id:06d}_{method}.pgm"
            write_image(path, to_bytes(image))
            if mask is not None:
                write_image(mask_path(path), mask.astype(np.uint8) * 255)
            label = 0 if method == REAL_METHOD else 1
            records.append(ManifestRecord(path, label, split, method, source_of(face_id)))
            face_id += 1
        logger.info("rendered %s: %d real, %d fake", split, reals, fakes)
    manifest = Manifest(records, out_dir)
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


def _parse_record(fields, root, number):
    if len(fields) != 5:
        raise ManifestError(f"expected 5 tab-separated fields, got {len(fields)}", number)
    path, label, split, method, source = fields
    if label not in ("0", "1"):
        raise ManifestError(f"label must be 0 or 1, got '{label}'", number)
    if split not in SPLITS:
        raise ManifestError(f"unknown split '{split}'", number)
    full = Path(path) if Path(path).is_absolute() else root / path
    if not full.exists():
        raise ManifestError(f"image {full} does not exist", number)
    return ManifestRecord(full, int(label), split, method, source, number)


def load_manifest(path):
    """Parse and check a manifest; relative image paths resolve against its directory."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ForenvitIOError(f"cannot read manifest {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise ManifestError(f"{path} is not UTF-8 text: {e.reason} at byte {e.start}") from e
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"missing '{MANIFEST_HEADER}' header", 1)
    root = path.parent
    records, seen = [], {}
    for number, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        record = _parse_record(line.rstrip("\n").split("\t"), root, number)
        key = record.path.resolve()
        if key in seen:
            raise ManifestError(f"{record.path} already listed on line {seen[key]}", number)
        seen[key] = number
        records.append(record)
    return Manifest(records, root)


# ---------------------------------------------------------------------------
# Loading and batching
# ---------------------------------------------------------------------------

@dataclass
class SplitData:
    images: np.ndarray
    labels: np.ndarray
    methods: list
    sources: list
    paths: list

    def __len__(self):
        return int(self.labels.size)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return SplitData(
            self.images[indices],
            self.labels[indices],
            [self.methods[i] for i in indices],
            [self.sources[i] for i in indices],
            [self.paths[i] for i in indices],
        )


def load_split(manifest, split, channels=1):
    records = manifest.split(split)
    if not records:
        raise DataError(f"split '{split}' is empty")
    arrays = [read_image(r.path, channels) for r in records]
    for record, array in zip(records, arrays):
        if array.shape != arrays[0].shape:
            raise DataError(
                f"{record.path} is {array.shape[2]}x{array.shape[1]}, "
                f"but {records[0].path} is {arrays[0].shape[2]}x{arrays[0].shape[1]}"
            )
    images = np.stack(arrays).astype(np.float32)
    return SplitData(
        images=images,
        labels=np.array([r.label for r in records], dtype=np.int64),
        methods=[r.method for r in records],
        sources=[r.source for r in records],
        paths=[r.path for r in records],
    )


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    methods: list
    indices: np.ndarray


def iterate(data, batch_size, rng=None):
    """Batches in seeded-shuffled order (input order without an rng); the last partial batch is kept."""
    if batch_size <= 0:
        raise ConfigurationError(f"batch_size must be positive, got {batch_size}")
    if len(data) == 0:
        raise ContractError("cannot iterate an empty split")
    order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
    for start in range(0, len(data), batch_size):
        indices = order[start:start + batch_size]
        yield Batch(
            data.images[indices],
            data.labels[indices],
            [data.methods[i] for i in indices],
            indices,
        )
