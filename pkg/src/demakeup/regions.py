"""Cosmetic-region label maps and per-region feature statistics.

Face-parsing outputs are merged down to four codes (background, foundation,
eye-shadow, lip); the texture loss then compares per-region channel mean/std
between feature maps.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

BACKGROUND = 0
FOUNDATION = 1
EYE_SHADOW = 2
LIP = 3
REGION_CODES = (BACKGROUND, FOUNDATION, EYE_SHADOW, LIP)
COSMETIC_REGIONS = (FOUNDATION, EYE_SHADOW, LIP)
REGION_NAMES = {BACKGROUND: "background", FOUNDATION: "foundation", EYE_SHADOW: "eye_shadow", LIP: "lip"}

# Raw parser vocabulary used by the bundled synthetic data. Real parsers use
# other codes; pass a custom mapping (see load_mapping) to adapt them.
PARSE_BACKGROUND = 0
PARSE_SKIN = 1
PARSE_NOSE = 2
PARSE_EAR = 3
PARSE_EYE = 4
PARSE_BROW = 5
PARSE_PERIOCULAR = 6
PARSE_UPPER_LIP = 7
PARSE_LOWER_LIP = 8
PARSE_HAIR = 9

DEFAULT_PARSE_MAPPING = {
    PARSE_SKIN: FOUNDATION,
    PARSE_NOSE: FOUNDATION,
    PARSE_EAR: FOUNDATION,
    PARSE_EYE: EYE_SHADOW,
    PARSE_BROW: EYE_SHADOW,
    PARSE_PERIOCULAR: EYE_SHADOW,
    PARSE_UPPER_LIP: LIP,
    PARSE_LOWER_LIP: LIP,
}


@dataclass
class RegionStats:
    """Per-channel mean/std over one region's pixels (population std)."""

    mean: np.ndarray
    std: np.ndarray
    pixel_count: int


def merge_parsing_labels(raw_parse, mapping=None) -> np.ndarray:
    """Collapse raw parser codes to region codes; unmapped codes -> background.

    Unmapped non-background codes are tolerated (parsers drift) but logged.
    """
    raw = np.asarray(raw_parse)
    if raw.ndim != 2:
        raise ValueError(f"raw parse map must be HxW, got shape {raw.shape}")
    if mapping is None:
        mapping = DEFAULT_PARSE_MAPPING
    out = np.zeros(raw.shape, dtype=np.uint8)
    unmapped = []
    for code in np.unique(raw):
        code = int(code)
        region = mapping.get(code, BACKGROUND)
        if region not in REGION_CODES:
            raise ValueError(f"mapping sends code {code} to invalid region {region}")
        if code not in mapping and code != PARSE_BACKGROUND:
            unmapped.append(code)
        if region != BACKGROUND:
            out[raw == code] = region
    if unmapped:
        logger.warning("unmapped parse codes %s treated as background", unmapped)
    return out


def resize_label_map(labels, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; never invents codes absent from the input."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError(f"label map must be HxW, got shape {lab.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = lab.shape
    rows = np.minimum(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), h - 1)
    cols = np.minimum(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), w - 1)
    return lab[np.ix_(rows, cols)]


def region_statistics(features, labels, region: int) -> RegionStats:
    """Channel mean/std of a CxHxW feature map over one region's pixels.

    Population std (divide by N). An empty region yields zero vectors and
    pixel_count 0 so parsing failures never abort training.
    """
    feats = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels)
    if feats.ndim != 3:
        raise ValueError(f"features must be CxHxW, got shape {feats.shape}")
    if lab.shape != feats.shape[1:]:
        raise ValueError(
            f"label shape {lab.shape} does not match feature spatial shape {feats.shape[1:]}"
        )
    mask = lab == region
    count = int(mask.sum())
    channels = feats.shape[0]
    if count == 0:
        return RegionStats(np.zeros(channels), np.zeros(channels), 0)
    vals = feats[:, mask]
    return RegionStats(vals.mean(axis=1), vals.std(axis=1), count)


def save_label_map(path, labels) -> None:
    """Write a label map as single-channel 8-bit PNG (pixel value = code)."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError(f"label map must be HxW, got shape {lab.shape}")
    if lab.min() < 0 or lab.max() > 255:
        raise ValueError("label codes must fit in 8 bits")
    Image.fromarray(lab.astype(np.uint8), mode="L").save(path, format="PNG")


def load_label_map(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def load_mapping(path) -> dict:
    """Read a {parser code: region code} table from JSON (string keys)."""
    with open(path) as fh:
        raw = json.load(fh)
    mapping = {}
    for key, value in raw.items():
        code, region = int(key), int(value)
        if region not in REGION_CODES:
            raise ValueError(f"{path}: code {code} maps to invalid region {region}")
        mapping[code] = region
    return mapping
