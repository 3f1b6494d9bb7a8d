"""Adversarial, reconstruction and metric-learning losses.

All losses average over the batch. Reconstruction targets and frozen
encodings are treated as constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

RECON_KINDS = ("mse", "bce", "none")
TRIPLET_KINDS = ("two_stage", "single_stage", "none")
PRIOR_FOR_RECON = {"mse": ("uniform", "gaussian"), "bce": ("bernoulli",)}


@dataclass
class LossConfig:
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 0.2
    rho: float = 0.5
    recon_kind: str = "bce"
    triplet_kind: str = "two_stage"

    def validate(self, prior_kind: str | None = None) -> None:
        for name in ("beta", "gamma", "lam", "rho"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.recon_kind not in RECON_KINDS:
            raise ValueError(f"recon_kind must be one of {RECON_KINDS}")
        if self.triplet_kind not in TRIPLET_KINDS:
            raise ValueError(f"triplet_kind must be one of {TRIPLET_KINDS}")
        if prior_kind is not None and self.recon_kind != "none":
            allowed = PRIOR_FOR_RECON[self.recon_kind]
            if prior_kind not in allowed:
                raise ValueError(
                    f"recon_kind={self.recon_kind} requires prior in {allowed}, got {prior_kind}"
                )

    def to_dict(self) -> dict:
        return asdict(self)


def _nonempty(t: Tensor, what: str) -> None:
    if t.size == 0:
        raise ValueError(f"{what} is empty")


def _const(x, like: Tensor) -> Tensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(data.astype(like.dtype, copy=False))


def adv_loss_d(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Hinge loss for the discriminator."""
    _nonempty(real_scores, "real batch")
    _nonempty(fake_scores, "fake batch")
    real_term = T.mean(T.max_with_scalar(1.0 - real_scores, 0.0))
    fake_term = T.mean(T.max_with_scalar(fake_scores + 1.0, 0.0))
    return real_term + fake_term


def adv_loss_g(fake_scores: Tensor) -> Tensor:
    _nonempty(fake_scores, "fake batch")
    return -T.mean(fake_scores)


def recon_mse(z_hat: Tensor, z_prime) -> Tensor:
    """Squared L2 distance per sample (summed over d), averaged over the batch."""
    if z_hat.shape != np.shape(getattr(z_prime, "data", z_prime)):
        raise T.ShapeError(f"recon_mse shapes differ: {z_hat.shape}")
    diff = z_hat - _const(z_prime, z_hat)
    return T.mean(T.sum(T.square(diff), axis=1))


def recon_bce(z_hat: Tensor, z_prime) -> Tensor:
    """Binary cross-entropy of logits ``z_hat`` against +-1 codes.

    Uses ``softplus(x) - t*x`` with ``t = (1 + z') / 2``, which equals the
    sigmoid form without evaluating log(sigmoid) directly.
    """
    target = np.asarray(getattr(z_prime, "data", z_prime))
    if target.shape != z_hat.shape:
        raise T.ShapeError(f"recon_bce shapes differ: {z_hat.shape} vs {target.shape}")
    if not np.all(np.minimum(np.abs(target - 1), np.abs(target + 1)) <= 1e-6):
        raise ValueError("recon_bce targets must be -1 or +1")
    t = _const((1 + target) / 2, z_hat)
    per_entry = T.softplus(z_hat) - z_hat * t
    return T.mean(per_entry)


def cosine_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``1 - cos(a_i, b_i)`` for (n, d) inputs."""
    if a.shape != b.shape:
        raise T.ShapeError(f"cosine distance shapes differ: {a.shape} vs {b.shape}")
    dots = T.sum(T.l2_normalize(a, -1) * T.l2_normalize(b, -1), axis=-1)
    return 1.0 - dots


def cosine_distance(z: Tensor, z_other: Tensor) -> Tensor:
    """``1 - z.z' / (|z| |z'|)`` for two d-vectors; lies in [0, 2]."""
    z, z_other = T.as_tensor(z), T.as_tensor(z_other)
    if z.ndim != 1:
        raise T.ShapeError("cosine_distance expects 1-d vectors")
    out = cosine_distance_rows(T.reshape(z, (1, -1)), T.reshape(z_other, (1, -1)))
    return T.reshape(out, ())


def triplet_loss(anchor: Tensor, positives: Tensor, negatives: Tensor, rho: float) -> Tensor:
    """Hardest-positive / hardest-negative cosine triplet hinge.

    Shapes are (d,), (P, d), (N, d) for one anchor, or (B, d), (B, P, d),
    (B, N, d) for a batch, in which case the per-anchor losses are averaged.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if anchor.ndim == 1:
        anchor = T.reshape(anchor, (1,) + anchor.shape)
        positives = T.reshape(positives, (1,) + positives.shape)
        negatives = T.reshape(negatives, (1,) + negatives.shape)
    b, d = anchor.shape
    if positives.ndim != 3 or negatives.ndim != 3:
        raise T.ShapeError("positives/negatives must be (B, P, d) / (B, N, d)")
    p, n = positives.shape[1], negatives.shape[1]
    if p < 1 or n < 1:
        raise ValueError("triplet loss needs at least one positive and one negative")
    if positives.shape != (b, p, d) or negatives.shape != (b, n, d):
        raise T.ShapeError("triplet inputs disagree on batch or encoding size")

    def distances(others: Tensor, k: int) -> Tensor:
        rep = T.take(anchor, np.repeat(np.arange(b), k))
        flat = T.reshape(others, (b * k, d))
        return T.reshape(cosine_distance_rows(rep, flat), (b, k))

    hardest_pos = T.reduce(distances(positives, p), "max", 1)
    hardest_neg = T.reduce(distances(negatives, n), "min", 1)
    return T.mean(T.max_with_scalar(hardest_pos - hardest_neg + rho, 0.0))


def stage2_regularizer(enc_live: Tensor, enc_frozen) -> Tensor:
    """Batch-mean squared L2 drift of live encodings from frozen ones."""
    frozen = _const(enc_frozen, enc_live)
    if frozen.shape != enc_live.shape:
        raise T.ShapeError(f"regularizer shapes differ: {enc_live.shape} vs {frozen.shape}")
    return T.mean(T.sum(T.square(enc_live - frozen), axis=1))


def _need(parts: dict, *names: str) -> None:
    missing = [n for n in names if parts.get(n) is None]
    if missing:
        raise KeyError(f"missing loss parts: {missing}")


def total_stage1_g(parts: dict, config: LossConfig) -> Tensor:
    """``adv + beta * recon``; the recon term is dropped when recon_kind is none."""
    _need(parts, "adv")
    total = parts["adv"]
    if config.recon_kind != "none":
        _need(parts, "recon")
        total = total + config.beta * parts["recon"]
    return total


def total_stage1_d(parts: dict, config: LossConfig) -> Tensor:
    """``adv + gamma * recon`` plus ``gamma * triplet`` for single-stage training."""
    _need(parts, "adv")
    total = parts["adv"]
    if config.recon_kind != "none":
        _need(parts, "recon")
        total = total + config.gamma * parts["recon"]
    if config.triplet_kind == "single_stage":
        _need(parts, "triplet")
        total = total + config.gamma * parts["triplet"]
    return total


def total_stage2_d(parts: dict, config: LossConfig) -> Tensor:
    _need(parts, "triplet", "reg")
    return parts["triplet"] + config.lam * parts["reg"]
