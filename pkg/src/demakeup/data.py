"""Dataset ingestion, preprocessing, and the procedural fixture generator.

Preprocessing warps the non-makeup reference into the makeup frame and merges
raw parse maps into cosmetic-region label maps, caching everything as PNG so
training reads pixel-aligned supervision straight from disk. The fixture
generator builds a deterministic synthetic stand-in dataset: procedural faces
with exact keypoints, exact parse maps, localized "makeup" color shifts, and
a small affine jitter between the paired frames.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import regions, warp

logger = logging.getLogger(__name__)

VALID_IMAGE_SIZES = (32, 64, 128, 256)

MANIFEST_REQUIRED_FIELDS = ("identity", "x", "y", "kps_x", "kps_y", "parse_x", "parse_y")
MANIFEST_CACHE_FIELDS = ("w", "labels_x", "labels_y")
_PATH_FIELDS = MANIFEST_REQUIRED_FIELDS[1:] + MANIFEST_CACHE_FIELDS


class ManifestError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class PairedSample:
    """One makeup/non-makeup pair; cache paths are filled by preprocessing."""

    identity: str
    x: Path
    y: Path
    kps_x: Path
    kps_y: Path
    parse_x: Path
    parse_y: Path
    w: Path | None = None
    labels_x: Path | None = None
    labels_y: Path | None = None


@dataclass
class Batch:
    """Loaded arrays for one training batch; images are Bx3xHxW in [-1, 1]."""

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    labels_x: np.ndarray
    labels_y: np.ndarray
    identities: list


def decode_image(path) -> np.ndarray:
    """Read an RGB PNG to HxWx3 float32 in [-1, 1] (v -> v/127.5 - 1)."""
    try:
        img = Image.open(path)
        if img.mode != "RGB":
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32)
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 127.5 - 1.0


def encode_image(path, image) -> None:
    """Write an HxWx3 array in [-1, 1] as lossless 8-bit RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {arr.shape}")
    quantized = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def load_manifest(path) -> list[PairedSample]:
    """Parse a line-delimited manifest of key=value fields.

    Paths are resolved relative to the manifest's directory. Duplicate
    identities are allowed (multiple pairs per person).
    """
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    samples = []
    with open(manifest_path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise ManifestError(
                        f"{manifest_path}:{lineno}: malformed token {token!r}, expected key=value"
                    )
                key, value = token.split("=", 1)
                if key in fields:
                    raise ManifestError(f"{manifest_path}:{lineno}: duplicate field {key!r}")
                fields[key] = value
            missing = [f for f in MANIFEST_REQUIRED_FIELDS if f not in fields]
            if missing:
                raise ManifestError(
                    f"{manifest_path}:{lineno}: missing field(s) {', '.join(missing)}"
                )
            unknown = set(fields) - set(MANIFEST_REQUIRED_FIELDS) - set(MANIFEST_CACHE_FIELDS)
            if unknown:
                raise ManifestError(
                    f"{manifest_path}:{lineno}: unknown field(s) {', '.join(sorted(unknown))}"
                )
            kwargs = {"identity": fields["identity"]}
            for key in _PATH_FIELDS:
                if key in fields:
                    kwargs[key] = (base / fields[key]).resolve()
            samples.append(PairedSample(**kwargs))
    return samples


def save_manifest(path, samples) -> None:
    """Write samples with paths made relative to the manifest directory."""
    manifest_path = Path(path)
    base = manifest_path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with open(manifest_path, "w") as fh:
        for s in samples:
            tokens = [f"identity={s.identity}"]
            for key in _PATH_FIELDS:
                value = getattr(s, key)
                if value is not None:
                    tokens.append(f"{key}={rel(value)}")
            fh.write(" ".join(tokens) + "\n")


def preprocess(sample: PairedSample, out_dir, mapping=None) -> PairedSample:
    """Cache W (warped reference) and the merged label maps for one pair.

    Idempotent: re-running writes byte-identical files for identical inputs.
    Degenerate keypoints propagate as DegenerateLandmarksError; use
    preprocess_dataset to skip such samples instead.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    y_img = decode_image(sample.y)
    kps_x = warp.load_keypoints(sample.kps_x)
    kps_y = warp.load_keypoints(sample.kps_y)
    w_img = warp.warp_ground_truth(y_img, kps_y, kps_x)
    labels_x = regions.merge_parsing_labels(regions.load_label_map(sample.parse_x), mapping)
    labels_y = regions.merge_parsing_labels(regions.load_label_map(sample.parse_y), mapping)
    stem = Path(sample.x).stem
    w_path = out / f"{stem}_w.png"
    labels_x_path = out / f"{stem}_labels_x.png"
    labels_y_path = out / f"{stem}_labels_y.png"
    encode_image(w_path, w_img)
    regions.save_label_map(labels_x_path, labels_x)
    regions.save_label_map(labels_y_path, labels_y)
    return replace(sample, w=w_path, labels_x=labels_x_path, labels_y=labels_y_path)


def preprocess_dataset(samples, out_dir, mapping=None) -> list[PairedSample]:
    """Preprocess uncached samples; degenerate-keypoint samples are skipped
    with a logged reason rather than aborting the run."""
    kept = []
    for sample in samples:
        if sample.w and sample.labels_x and sample.labels_y:
            kept.append(sample)
            continue
        try:
            kept.append(preprocess(sample, out_dir, mapping=mapping))
        except warp.DegenerateLandmarksError as exc:
            logger.warning("skipping sample %s: %s", sample.identity, exc)
    return kept


# ---------------------------------------------------------------------------
# Synthetic fixture dataset
# ---------------------------------------------------------------------------


@dataclass
class _FaceSpec:
    background: np.ndarray
    skin: np.ndarray
    eye_color: np.ndarray
    lip_color: np.ndarray
    center: np.ndarray  # (row, col)
    face_axes: np.ndarray  # (semi_r, semi_c)
    eye_offset: np.ndarray
    eye_axes: np.ndarray
    lip_offset: np.ndarray
    lip_axes: np.ndarray
    eye_makeup: np.ndarray
    lip_makeup: np.ndarray
    foundation_tint: np.ndarray


def _sample_face(rng: np.random.Generator, size: int) -> _FaceSpec:
    s = float(size)

    def color(lo, hi):
        return rng.uniform(lo, hi, size=3)

    strong = rng.choice([-1.0, 1.0], size=3) * rng.uniform(55.0, 95.0, size=3)
    lip_strong = rng.choice([-1.0, 1.0], size=3) * rng.uniform(55.0, 95.0, size=3)
    return _FaceSpec(
        background=color(15.0, 85.0),
        skin=color(120.0, 225.0),
        eye_color=color(25.0, 80.0),
        lip_color=color(95.0, 165.0),
        center=np.array([s * rng.uniform(0.48, 0.52), s * rng.uniform(0.48, 0.52)]),
        face_axes=np.array([s * rng.uniform(0.33, 0.40), s * rng.uniform(0.26, 0.33)]),
        eye_offset=np.array([-s * rng.uniform(0.09, 0.12), s * rng.uniform(0.11, 0.15)]),
        eye_axes=np.array([s * rng.uniform(0.035, 0.05), s * rng.uniform(0.055, 0.075)]),
        lip_offset=np.array([s * rng.uniform(0.16, 0.21), 0.0]),
        lip_axes=np.array([s * rng.uniform(0.04, 0.06), s * rng.uniform(0.09, 0.12)]),
        eye_makeup=strong,
        lip_makeup=lip_strong,
        foundation_tint=rng.uniform(-14.0, 14.0, size=3),
    )


def _ellipse_mask(size, center, axes):
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ((rows - center[0]) / axes[0]) ** 2 + ((cols - center[1]) / axes[1]) ** 2 <= 1.0


def _ellipse_points(center, axes, angles):
    angles = np.asarray(angles, dtype=np.float64)
    return np.stack(
        [center[0] + axes[0] * np.cos(angles), center[1] + axes[1] * np.sin(angles)], axis=1
    )


def _render_face(spec: _FaceSpec, size: int):
    """Paint the face and its parse map; returns (image float [0,255] HWC,
    parse uint8, keypoints (68, 2))."""
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = spec.background
    parse = np.zeros((size, size), dtype=np.uint8)

    def paint(mask, color, code):
        img[mask] = color
        parse[mask] = code

    cy, cx = spec.center
    face = _ellipse_mask(size, spec.center, spec.face_axes)
    paint(face, spec.skin, regions.PARSE_SKIN)

    for side in (-1.0, 1.0):
        ear_center = (cy, cx + side * spec.face_axes[1])
        ear_axes = (spec.face_axes[0] * 0.18, spec.face_axes[1] * 0.10)
        paint(_ellipse_mask(size, ear_center, ear_axes), spec.skin * 0.88, regions.PARSE_EAR)

    eye_centers = []
    for side in (-1.0, 1.0):
        ec = np.array([cy + spec.eye_offset[0], cx + side * spec.eye_offset[1]])
        eye_centers.append(ec)
        peri_axes = spec.eye_axes * 1.8
        paint(_ellipse_mask(size, ec, peri_axes), spec.skin * 0.96, regions.PARSE_PERIOCULAR)
        brow_center = (ec[0] - peri_axes[0] * 1.35, ec[1])
        brow_axes = (spec.eye_axes[0] * 0.45, spec.eye_axes[1] * 1.25)
        paint(_ellipse_mask(size, brow_center, brow_axes), spec.skin * 0.5, regions.PARSE_BROW)
        paint(_ellipse_mask(size, ec, spec.eye_axes), spec.eye_color, regions.PARSE_EYE)

    nose_center = (cy + size * 0.03, cx)
    nose_axes = (size * 0.085, size * 0.032)
    paint(_ellipse_mask(size, nose_center, nose_axes), spec.skin * 0.92, regions.PARSE_NOSE)

    lip_center = np.array([cy + spec.lip_offset[0], cx + spec.lip_offset[1]])
    lip_mask = _ellipse_mask(size, lip_center, spec.lip_axes)
    rows = np.arange(size)[:, None]
    upper = lip_mask & (rows < lip_center[0])
    lower = lip_mask & ~(rows < lip_center[0])
    paint(upper, spec.lip_color, regions.PARSE_UPPER_LIP)
    paint(lower, spec.lip_color * 0.9, regions.PARSE_LOWER_LIP)

    keypoints = _face_keypoints(spec, eye_centers, nose_center, nose_axes, lip_center)
    return img, parse, keypoints


def _face_keypoints(spec, eye_centers, nose_center, nose_axes, lip_center):
    """68 landmarks on the analytic region contours (jaw 17, brows 5+5,
    nose 9, eyes 6+6, outer lip 12, inner lip 8)."""
    pts = []
    # Jaw: lower face-ellipse arc, chin at angle 0 (row-major parametrization).
    jaw_angles = np.linspace(-80.0, 80.0, 17) * math.pi / 180.0
    pts.append(_ellipse_points(spec.center, spec.face_axes, jaw_angles))
    # Brows: top arc of the brow ellipse above each eye.
    for ec in eye_centers:
        peri = spec.eye_axes * 1.8
        brow_center = (ec[0] - peri[0] * 1.35, ec[1])
        brow_axes = (spec.eye_axes[0] * 0.45, spec.eye_axes[1] * 1.25)
        u = np.linspace(-1.0, 1.0, 5)
        rows = brow_center[0] - brow_axes[0] * np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
        cols = brow_center[1] + brow_axes[1] * u
        pts.append(np.stack([rows, cols], axis=1))
    # Nose: 4 bridge points down the midline, then 5 across the base arc.
    bridge_rows = np.linspace(eye_centers[0][0], nose_center[0] - nose_axes[0] * 0.2, 4)
    pts.append(np.stack([bridge_rows, np.full(4, nose_center[1])], axis=1))
    u = np.linspace(-1.0, 1.0, 5)
    base_rows = nose_center[0] + nose_axes[0] * np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
    pts.append(np.stack([base_rows, nose_center[1] + nose_axes[1] * u], axis=1))
    # Eyes: 6 points around each eye ellipse.
    eye_angles = np.array([90.0, 150.0, 210.0, 270.0, 330.0, 30.0]) * math.pi / 180.0
    for ec in eye_centers:
        pts.append(_ellipse_points(ec, spec.eye_axes, eye_angles))
    # Lips: 12 around the outer contour, 8 around a shrunken inner contour.
    outer_angles = np.linspace(0.0, 2.0 * math.pi, 12, endpoint=False)
    pts.append(_ellipse_points(lip_center, spec.lip_axes, outer_angles))
    inner_angles = np.linspace(0.0, 2.0 * math.pi, 8, endpoint=False)
    pts.append(_ellipse_points(lip_center, spec.lip_axes * 0.55, inner_angles))
    out = np.concatenate(pts, axis=0)
    assert out.shape == (warp.NUM_KEYPOINTS, 2)
    return out


def _apply_makeup(image, parse, spec: _FaceSpec) -> np.ndarray:
    """Strong shifts on eye-shadow and lip regions, a mild tint on foundation."""
    out = image.copy()
    merged = regions.merge_parsing_labels(parse)
    out[merged == regions.EYE_SHADOW] += spec.eye_makeup
    out[merged == regions.LIP] += spec.lip_makeup
    out[merged == regions.FOUNDATION] += spec.foundation_tint
    return np.clip(out, 0.0, 255.0)


def _sample_jitter(rng: np.random.Generator, size: int):
    """Affine map T(p) = M p + v from the jittered frame into the source frame."""
    angle = rng.uniform(-4.0, 4.0) * math.pi / 180.0
    scale = rng.uniform(0.97, 1.03)
    translation = rng.uniform(-0.03, 0.03, size=2) * size
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    matrix = scale * np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    offset = center + translation - matrix @ center
    return matrix, offset


def _affine_field(matrix, offset, size):
    rows, cols = np.meshgrid(
        np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij"
    )
    grid = np.stack([rows, cols], axis=-1)
    src = grid @ matrix.T + offset
    return src - grid


def _affine_inverse_points(matrix, offset, points):
    inv = np.linalg.inv(matrix)
    return (np.asarray(points) - offset) @ inv.T


def _warp_labels_affine(parse, matrix, offset):
    size = parse.shape[0]
    rows, cols = np.meshgrid(
        np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij"
    )
    grid = np.stack([rows, cols], axis=-1)
    src = grid @ matrix.T + offset
    sr = np.clip(np.rint(src[..., 0]).astype(np.intp), 0, size - 1)
    sc = np.clip(np.rint(src[..., 1]).astype(np.intp), 0, size - 1)
    return parse[sr, sc]


def synthesize_fixture_dataset(seed: int, count: int, image_size: int, out_dir) -> Path:
    """Generate a deterministic paired dataset; returns the manifest path.

    Per identity: Y is a procedural face; X is Y with makeup applied in the
    eye-shadow/lip regions (plus a mild foundation tint) and a small affine
    jitter of the whole frame. Keypoints and parse maps are exact.
    """
    if image_size not in VALID_IMAGE_SIZES:
        raise ValueError(f"image_size must be one of {VALID_IMAGE_SIZES}, got {image_size}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for idx, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        identity = f"id{idx:04d}"
        spec = _sample_face(rng, image_size)
        y_img, parse_y, kps_y = _render_face(spec, image_size)
        makeup_img = _apply_makeup(y_img, parse_y, spec)
        matrix, offset = _sample_jitter(rng, image_size)
        x_img = warp.apply_warp(makeup_img, _affine_field(matrix, offset, image_size))
        parse_x = _warp_labels_affine(parse_y, matrix, offset)
        kps_x = _affine_inverse_points(matrix, offset, kps_y)

        paths = {
            "x": out / f"{identity}_x.png",
            "y": out / f"{identity}_y.png",
            "kps_x": out / f"{identity}_kps_x.txt",
            "kps_y": out / f"{identity}_kps_y.txt",
            "parse_x": out / f"{identity}_parse_x.png",
            "parse_y": out / f"{identity}_parse_y.png",
        }
        encode_image(paths["x"], x_img / 127.5 - 1.0)
        encode_image(paths["y"], y_img / 127.5 - 1.0)
        warp.save_keypoints(paths["kps_x"], kps_x)
        warp.save_keypoints(paths["kps_y"], kps_y)
        regions.save_label_map(paths["parse_x"], parse_x)
        regions.save_label_map(paths["parse_y"], parse_y)
        samples.append(PairedSample(identity=identity, **paths))
    manifest = out / "manifest.txt"
    save_manifest(manifest, samples)
    return manifest


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _load_sample_arrays(sample: PairedSample):
    if not (sample.w and sample.labels_x and sample.labels_y):
        raise DataError(f"sample {sample.identity}: not preprocessed (missing cache paths)")
    try:
        x = decode_image(sample.x)
        w = decode_image(sample.w)
        y = decode_image(sample.y)
        labels_x = regions.load_label_map(sample.labels_x)
        labels_y = regions.load_label_map(sample.labels_y)
    except Exception as exc:
        raise DataError(f"sample {sample.identity}: {exc}") from exc
    return x, w, y, labels_x, labels_y


def make_batches(samples, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Deterministic shuffled batches for one epoch.

    The permutation is a pure function of (seed, epoch); the last partial
    batch is dropped so batch statistics stay uniform.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(len(samples))
    batches = []
    for start in range(0, (len(samples) // batch_size) * batch_size, batch_size):
        chosen = [samples[i] for i in perm[start : start + batch_size]]
        arrays = [_load_sample_arrays(s) for s in chosen]
        batches.append(
            Batch(
                x=np.stack([a[0].transpose(2, 0, 1) for a in arrays]),
                w=np.stack([a[1].transpose(2, 0, 1) for a in arrays]),
                y=np.stack([a[2].transpose(2, 0, 1) for a in arrays]),
                labels_x=np.stack([a[3] for a in arrays]),
                labels_y=np.stack([a[4] for a in arrays]),
                identities=[s.identity for s in chosen],
            )
        )
    return batches
