"""Training losses: adversarial, identity embedding, attention-gated
reconstruction with its balance regularizer, per-region texture statistics,
and the combined generator objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

PROB_EPS = 1e-7  # keeps log() finite on saturated discriminator scores
ID_NORM_FLOOR = 1e-12  # inside the sqrt of the identity norm
STAT_NORM_FLOOR = 1e-16  # inside sqrt for region std and stat norms
REG_WEIGHT = 0.2  # balance regularizer weight on |term1 - term2|

# Fixed summation order for the generator total; the reported total is the
# left-to-right sum of these components.
GENERATOR_LOSS_ORDER = ("adv_g", "id", "rec", "reg", "sat")
LOG_COLUMNS = ("step", "adv_d", "adv_g", "id", "rec", "reg", "sat", "total")

# Which config flag gates each component; reg rides with rec.
_COMPONENT_FLAG = {"adv_d": "adv", "adv_g": "adv", "id": "id", "rec": "rec", "reg": "rec", "sat": "sat"}


class NonFiniteLossError(RuntimeError):
    """A loss component came out NaN/Inf; carries the component name."""

    def __init__(self, component: str, value=None):
        self.component = component
        detail = f" = {value}" if value is not None else ""
        super().__init__(f"non-finite loss component {component!r}{detail}")


@dataclass
class LossBundle:
    """Named scalar losses for one step plus the enabled-flag record."""

    adv_d: float = 0.0
    adv_g: float = 0.0
    id: float = 0.0
    rec: float = 0.0
    reg: float = 0.0
    sat: float = 0.0
    total: float = 0.0
    enabled: dict = field(default_factory=dict)

    def as_tuple(self):
        return (self.adv_d, self.adv_g, self.id, self.rec, self.reg, self.sat, self.total)


def _as_tensor(value, like=None):
    if isinstance(value, torch.Tensor):
        return value
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(value, dtype=dtype)


def _clamp_scores(scores, name):
    s = _as_tensor(scores)
    if s.numel() == 0:
        raise ValueError(f"{name}: empty score map")
    with torch.no_grad():
        if float(s.min()) < 0.0 or float(s.max()) > 1.0:
            raise ValueError(f"{name}: discriminator scores must lie in [0, 1]")
    return s.clamp(PROB_EPS, 1.0 - PROB_EPS)


def adversarial_loss_d(real_scores, fake_scores):
    """-(mean log D(real) + mean log(1 - D(fake))).

    The discriminator minimizes this; callers must detach the generated image
    before scoring so no gradient reaches the generator.
    """
    real = _clamp_scores(real_scores, "real_scores")
    fake = _clamp_scores(fake_scores, "fake_scores")
    return -(torch.log(real).mean() + torch.log1p(-fake).mean())


def adversarial_loss_g(fake_scores, saturating: bool = False):
    """Generator adversarial term.

    Default is the non-saturating -mean log D(fake); `saturating=True`
    selects the original mean log(1 - D(fake)) form for fidelity runs.
    """
    fake = _clamp_scores(fake_scores, "fake_scores")
    if saturating:
        return torch.log1p(-fake).mean()
    return -torch.log(fake).mean()


def _safe_norm(vec, floor, dim=-1):
    return torch.sqrt(torch.clamp_min((vec * vec).sum(dim=dim), floor))


def identity_loss(emb_z, emb_y):
    """Euclidean norm ||F(Z) - F(Y)||2, un-squared, averaged over the batch.

    Gradient flows only through emb_z; a 1e-12 floor inside the sqrt keeps
    the gradient finite at zero.
    """
    ez = _as_tensor(emb_z)
    ey = _as_tensor(emb_y, like=ez)
    if ez.ndim == 1:
        ez = ez[None]
    if ey.ndim == 1:
        ey = ey[None]
    if ez.shape != ey.shape:
        raise ValueError(f"embedding shapes differ: {tuple(ez.shape)} vs {tuple(ey.shape)}")
    diff = ez - ey.detach()
    return _safe_norm(diff, ID_NORM_FLOOR).mean()


def _as_nchw(t, name):
    x = _as_tensor(t)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"{name}: expected at most NxCxHxW, got shape {tuple(x.shape)}")
    return x


def reconstruction_loss(attention, warped, original, generated):
    """Attention-gated two-term reconstruction plus balance regularizer.

    term1 = mean |A*W - A*Z|, term2 = mean |(1-A)*X - (1-A)*Z|; returns
    (rec, reg) with rec = term1 + term2 and reg = 0.2 * |term1 - term2|.
    The means run over batch, channels, and pixels, keeping magnitudes
    resolution independent.
    """
    w = _as_nchw(warped, "warped")
    x = _as_nchw(original, "original")
    z = _as_nchw(generated, "generated")
    a = _as_nchw(attention, "attention")
    if not (w.shape == x.shape == z.shape):
        raise ValueError(
            f"image shapes differ: {tuple(w.shape)} vs {tuple(x.shape)} vs {tuple(z.shape)}"
        )
    if a.shape[1] != 1 or a.shape[0] != w.shape[0] or a.shape[2:] != w.shape[2:]:
        raise ValueError(
            f"attention shape {tuple(a.shape)} does not broadcast over images {tuple(w.shape)}"
        )
    with torch.no_grad():
        if float(a.min()) < 0.0 or float(a.max()) > 1.0:
            raise ValueError("attention values must lie in [0, 1]")
    term1 = (a * w - a * z).abs().mean()
    term2 = ((1.0 - a) * x - (1.0 - a) * z).abs().mean()
    rec = term1 + term2
    reg = REG_WEIGHT * (term1 - term2).abs()
    return rec, reg


def _region_moments(feat, mask):
    vals = feat[:, mask]  # C x n
    mean = vals.mean(dim=1)
    var = ((vals - mean[:, None]) ** 2).mean(dim=1)
    std = torch.sqrt(torch.clamp_min(var, STAT_NORM_FLOOR))
    return mean, std


def sat_loss(feat_z, labels_x, feat_y, labels_y, cosmetic_regions=(1, 2, 3)):
    """Sum over cosmetic regions of ||mu_z - mu_y||2 + ||sigma_z - sigma_y||2.

    Z uses X's label map, Y its own; label maps must already be at feature
    resolution. Regions empty on either side contribute 0. Gradient flows
    only through feat_z. Averaged over the batch.
    """
    fz = _as_tensor(feat_z)
    fy = _as_tensor(feat_y, like=fz)
    if fz.ndim == 3:
        fz = fz[None]
    if fy.ndim == 3:
        fy = fy[None]
    lx = torch.as_tensor(labels_x)
    ly = torch.as_tensor(labels_y)
    if lx.ndim == 2:
        lx = lx[None]
    if ly.ndim == 2:
        ly = ly[None]
    if fz.ndim != 4 or fy.ndim != 4:
        raise ValueError("feature maps must be (N)xCxH'xW'")
    if fz.shape[1] != fy.shape[1]:
        raise ValueError(f"channel counts differ: {fz.shape[1]} vs {fy.shape[1]}")
    if fz.shape[0] != fy.shape[0] or lx.shape[0] != fz.shape[0] or ly.shape[0] != fy.shape[0]:
        raise ValueError("batch sizes of features and label maps must match")
    if tuple(lx.shape[1:]) != tuple(fz.shape[2:]):
        raise ValueError(
            f"labels_x {tuple(lx.shape[1:])} not at feat_z resolution {tuple(fz.shape[2:])}"
        )
    if tuple(ly.shape[1:]) != tuple(fy.shape[2:]):
        raise ValueError(
            f"labels_y {tuple(ly.shape[1:])} not at feat_y resolution {tuple(fy.shape[2:])}"
        )
    fy = fy.detach()
    total = fz.new_zeros(())
    batch = fz.shape[0]
    for n in range(batch):
        for region in cosmetic_regions:
            mask_z = lx[n] == region
            mask_y = ly[n] == region
            if not bool(mask_z.any()) or not bool(mask_y.any()):
                continue
            mean_z, std_z = _region_moments(fz[n], mask_z)
            mean_y, std_y = _region_moments(fy[n], mask_y)
            total = total + _safe_norm(mean_z - mean_y, STAT_NORM_FLOOR)
            total = total + _safe_norm(std_z - std_y, STAT_NORM_FLOOR)
    return total / batch


def normalize_enabled(enabled=None) -> dict:
    flags = {"adv": True, "id": True, "rec": True, "sat": True}
    if enabled:
        unknown = set(enabled) - set(flags)
        if unknown:
            raise ValueError(f"unknown loss flags: {sorted(unknown)}")
        flags.update({k: bool(v) for k, v in enabled.items()})
    return flags


def total_generator_loss(components, enabled=None, adv_d: float = 0.0) -> LossBundle:
    """Assemble the step's LossBundle from scalar components.

    `components` maps names from GENERATOR_LOSS_ORDER to scalars; disabled
    components are recorded as 0 and excluded from the total, which is the
    fixed-order left-to-right sum. Non-finite enabled components raise
    NonFiniteLossError naming the offender.
    """
    flags = normalize_enabled(enabled)
    unknown = set(components) - set(GENERATOR_LOSS_ORDER)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    adv_d = float(adv_d)
    if flags["adv"] and not math.isfinite(adv_d):
        raise NonFiniteLossError("adv_d", adv_d)
    values = {}
    for name in GENERATOR_LOSS_ORDER:
        if flags[_COMPONENT_FLAG[name]]:
            v = float(components.get(name, 0.0))
            if not math.isfinite(v):
                raise NonFiniteLossError(name, v)
            values[name] = v
        else:
            values[name] = 0.0
    total = 0.0
    for name in GENERATOR_LOSS_ORDER:
        total = total + values[name]
    return LossBundle(
        adv_d=adv_d if flags["adv"] else 0.0,
        adv_g=values["adv_g"],
        id=values["id"],
        rec=values["rec"],
        reg=values["reg"],
        sat=values["sat"],
        total=total,
        enabled=flags,
    )
