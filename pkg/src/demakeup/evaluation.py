"""Verification-via-generation metrics.

Probe images (generated de-makeup results, or the raw makeup inputs for the
baseline row) are matched against a gallery of one non-makeup embedding per
identity using cosine similarity; reported metrics are rank-1 identification
and TPR at fixed impostor FPR targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as datamod

FPR_TARGETS = (0.001, 0.01)

# Published full-scale reference numbers recorded in report metadata as
# non-reproducible context (private dataset, pretrained extractor).
REFERENCE_RANK1_BASELINE = 91.92
REFERENCE_RANK1_TARGET = 94.04

REPORT_METRIC_FIELDS = (
    "rank1",
    "tpr_at_fpr_0.1pct",
    "tpr_at_fpr_1pct",
    "baseline_rank1",
    "baseline_tpr_0.1pct",
    "baseline_tpr_1pct",
)


@dataclass
class ScoredPairSet:
    """Genuine and impostor similarity scores for ROC-style metrics."""

    genuine_scores: np.ndarray
    impostor_scores: np.ndarray

    def __post_init__(self):
        self.genuine_scores = np.asarray(self.genuine_scores, dtype=np.float64).ravel()
        self.impostor_scores = np.asarray(self.impostor_scores, dtype=np.float64).ravel()
        if self.genuine_scores.size == 0 or self.impostor_scores.size == 0:
            raise ValueError("both genuine and impostor score lists must be non-empty")
        if not (np.all(np.isfinite(self.genuine_scores)) and np.all(np.isfinite(self.impostor_scores))):
            raise ValueError("scores must be finite")


def cosine_similarity(a, b) -> float:
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    if va.shape != vb.shape:
        raise ValueError(f"embedding dimensions differ: {va.shape} vs {vb.shape}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm embedding")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def _normalize_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm embedding in {what}")
    return matrix / norms[:, None]


def rank1_accuracy(probes, gallery) -> float:
    """Percentage of probes whose most-similar gallery entry shares their
    identity; ties break toward the lowest gallery index."""
    if not probes or not gallery:
        raise ValueError("probes and gallery must be non-empty")
    gallery_ids = [identity for _, identity in gallery]
    if len(set(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery identities must be unique")
    known = set(gallery_ids)
    for _, identity in probes:
        if identity not in known:
            raise ValueError(f"probe identity {identity!r} absent from gallery")
    probe_mat = _normalize_rows(np.asarray([np.ravel(v) for v, _ in probes], dtype=np.float64), "probes")
    gallery_mat = _normalize_rows(
        np.asarray([np.ravel(v) for v, _ in gallery], dtype=np.float64), "gallery"
    )
    scores = probe_mat @ gallery_mat.T
    best = np.argmax(scores, axis=1)  # argmax returns the first (lowest) index on ties
    hits = sum(gallery_ids[best[i]] == identity for i, (_, identity) in enumerate(probes))
    return 100.0 * hits / len(probes)


def tpr_at_fpr(scores: ScoredPairSet, fpr_targets) -> list[float]:
    """TPR (percent) at each impostor-FPR target, on the step-function ROC.

    Decision rule: accept a pair when score > t. For each target f the
    threshold is the smallest observed impostor score t with
    frac(impostor > t) <= f, which maximizes TPR subject to FPR <= f; no
    interpolation.
    """
    targets = list(fpr_targets)
    if not targets:
        raise ValueError("need at least one FPR target")
    for f in targets:
        if not (0.0 < f < 1.0):
            raise ValueError(f"FPR targets must lie in (0, 1), got {f}")
    imp = np.sort(scores.impostor_scores)
    gen = scores.genuine_scores
    n_imp = imp.size
    out = []
    for f in targets:
        # frac(imp > imp[j]) = (n - right_rank(imp[j])) / n is non-increasing
        # in j; pick the smallest candidate threshold meeting the target.
        counts_above = n_imp - np.searchsorted(imp, imp, side="right")
        feasible = counts_above / n_imp <= f
        threshold = imp[int(np.argmax(feasible))]  # always feasible at the max score
        out.append(100.0 * float(np.mean(gen > threshold)))
    return out


@dataclass
class VerificationRow:
    rank1: float
    tpr_0p1: float
    tpr_1: float
    mean_genuine_cosine: float
    scores: ScoredPairSet


@dataclass
class VerificationReport:
    generated: VerificationRow
    baseline: VerificationRow
    metadata: dict = field(default_factory=dict)


def _score_probes(probe_embs, probe_ids, gallery_embs, gallery_ids):
    probe_mat = _normalize_rows(probe_embs, "probes")
    gallery_mat = _normalize_rows(gallery_embs, "gallery")
    scores = probe_mat @ gallery_mat.T
    gallery_index = {identity: i for i, identity in enumerate(gallery_ids)}
    genuine = []
    impostor = []
    for i, identity in enumerate(probe_ids):
        j = gallery_index[identity]
        genuine.append(scores[i, j])
        impostor.extend(scores[i, k] for k in range(len(gallery_ids)) if k != j)
    return ScoredPairSet(np.array(genuine), np.array(impostor))


def _row(probe_pairs, gallery_pairs, pair_set: ScoredPairSet) -> VerificationRow:
    tprs = tpr_at_fpr(pair_set, FPR_TARGETS)
    return VerificationRow(
        rank1=rank1_accuracy(probe_pairs, gallery_pairs),
        tpr_0p1=tprs[0],
        tpr_1=tprs[1],
        mean_genuine_cosine=float(np.mean(pair_set.genuine_scores)),
        scores=pair_set,
    )


def _embed_batched(extractor, images, batch_size=16):
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack([img.transpose(2, 0, 1) for img in images[start : start + batch_size]])
            chunks.append(extractor.embed(torch.from_numpy(batch)).numpy())
    return np.concatenate(chunks, axis=0).astype(np.float64)


def verification_via_generation(trainer, samples, batch_size: int = 16) -> VerificationReport:
    """Run G over every makeup image and score verification against the
    non-makeup gallery, alongside the no-generation baseline.

    `trainer` is a training.Trainer (typically loaded from a checkpoint);
    `samples` are PairedSamples whose x/y images exist. The gallery holds one
    non-makeup embedding per identity (the first occurrence).
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    extractor = trainer.extractor
    generator = trainer.generator

    x_images = [datamod.decode_image(s.x) for s in samples]
    probe_ids = [s.identity for s in samples]
    gallery_samples = []
    seen = set()
    for s in samples:
        if s.identity not in seen:
            seen.add(s.identity)
            gallery_samples.append(s)
    y_images = [datamod.decode_image(s.y) for s in gallery_samples]
    gallery_ids = [s.identity for s in gallery_samples]

    z_images = []
    with torch.no_grad():
        for start in range(0, len(x_images), batch_size):
            batch = np.stack(
                [img.transpose(2, 0, 1) for img in x_images[start : start + batch_size]]
            )
            _, z = generator(torch.from_numpy(batch))
            z_images.extend(z.numpy().transpose(0, 2, 3, 1))

    gallery_embs = _embed_batched(extractor, y_images, batch_size)
    generated_embs = _embed_batched(extractor, z_images, batch_size)
    baseline_embs = _embed_batched(extractor, x_images, batch_size)

    gallery_pairs = list(zip(gallery_embs, gallery_ids))
    generated_row = _row(
        list(zip(generated_embs, probe_ids)),
        gallery_pairs,
        _score_probes(generated_embs, probe_ids, gallery_embs, gallery_ids),
    )
    baseline_row = _row(
        list(zip(baseline_embs, probe_ids)),
        gallery_pairs,
        _score_probes(baseline_embs, probe_ids, gallery_embs, gallery_ids),
    )
    metadata = {
        "step": trainer.step,
        "fingerprint": trainer.fingerprint,
        "extractor": extractor.name,
        "num_probes": len(probe_ids),
        "num_gallery": len(gallery_ids),
        "mean_genuine_cosine": generated_row.mean_genuine_cosine,
        "baseline_mean_genuine_cosine": baseline_row.mean_genuine_cosine,
        "reference_rank1_baseline": REFERENCE_RANK1_BASELINE,
        "reference_rank1_target": REFERENCE_RANK1_TARGET,
    }
    return VerificationReport(generated=generated_row, baseline=baseline_row, metadata=metadata)


def write_report(report: VerificationReport, path) -> None:
    """Delimited key=value report; the six bare metric fields are the stable
    schema, metadata rides under a meta. prefix."""
    lines = [
        "# verification-via-generation report",
        f"rank1={report.generated.rank1!r}",
        f"tpr_at_fpr_0.1pct={report.generated.tpr_0p1!r}",
        f"tpr_at_fpr_1pct={report.generated.tpr_1!r}",
        f"baseline_rank1={report.baseline.rank1!r}",
        f"baseline_tpr_0.1pct={report.baseline.tpr_0p1!r}",
        f"baseline_tpr_1pct={report.baseline.tpr_1!r}",
    ]
    for key in sorted(report.metadata):
        lines.append(f"meta.{key}={report.metadata[key]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path):
    """Parse a report file into (metrics dict, metadata dict)."""
    metrics = {}
    meta = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, value = line.split("=", 1)
        if key.startswith("meta."):
            meta[key[len("meta.") :]] = value
        else:
            metrics[key] = float(value)
    return metrics, meta
