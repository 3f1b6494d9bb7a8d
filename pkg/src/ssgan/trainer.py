"""Two-stage adversarial + metric-learning training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .masking import MaskGrid, build_triplet_batch, make_grid
from .nn import Discriminator, Generator, NetConfig, init_params, snapshot
from .objectives import (
    LossConfig,
    adv_loss_d,
    adv_loss_g,
    recon_bce,
    recon_mse,
    stage2_regularizer,
    total_stage1_d,
    total_stage1_g,
    total_stage2_d,
    triplet_loss,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

PRIOR_KINDS = ("uniform", "bernoulli", "gaussian")
LOSS_CSV_HEADER = ["iter", "stage", "loss_g_adv", "loss_d_adv", "loss_recon",
                   "loss_triplet", "loss_reg", "total"]


@dataclass(frozen=True)
class Preset:
    name: str
    gan: bool
    prior: str
    recon_kind: str
    triplet_kind: str


def _presets() -> dict[str, Preset]:
    table = {"T": Preset("T", False, "uniform", "none", "single_stage")}
    for base, prior, recon in (("Gc", "uniform", "mse"), ("Gd", "bernoulli", "bce")):
        tag = "M" if recon == "mse" else "B"
        table[base] = Preset(base, True, prior, "none", "none")
        table[base + tag] = Preset(base + tag, True, prior, recon, "none")
        for suffix, kind in (("T1", "single_stage"), ("T2", "two_stage")):
            table[base + suffix] = Preset(base + suffix, True, prior, "none", kind)
            name = base + tag + suffix
            table[name] = Preset(name, True, prior, recon, kind)
    return table


PRESETS = _presets()


@dataclass
class LatentPrior:
    kind: str = "bernoulli"
    d: int = 128

    def validate(self) -> None:
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"prior kind must be one of {PRIOR_KINDS}")
        if self.d < 1:
            raise ValueError("latent dimension must be >= 1")


def sample_latent(prior: LatentPrior, batch: int, rng: np.random.Generator,
                  dtype=np.float32) -> np.ndarray:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    shape = (batch, prior.d)
    if prior.kind == "uniform":
        z = rng.uniform(-1.0, 1.0, shape)
    elif prior.kind == "bernoulli":
        z = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    elif prior.kind == "gaussian":
        z = rng.standard_normal(shape)
    else:
        raise ValueError(f"unknown prior kind {prior.kind!r}")
    return z.astype(dtype)


@dataclass
class HyperParams:
    T1: int = 50000
    T2: int = 10000
    T_inner: int = 3
    lr: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_stage1: int = 128
    batch_stage2: int = 32
    prior: LatentPrior = field(default_factory=LatentPrior)
    losses: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.T1 < 0 or self.T2 < 0:
            raise ValueError("T1 and T2 must be >= 0")
        if self.T_inner < 1:
            raise ValueError("T_inner must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_stage1 < 2 or self.batch_stage2 < 2:
            raise ValueError("batch sizes must be >= 2")
        self.prior.validate()
        self.losses.validate(self.prior.kind)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        data = dict(data)
        prior = LatentPrior(**data.pop("prior", {}))
        losses = LossConfig(**data.pop("losses", {}))
        known = {f.name for f in fields(cls)}
        return cls(prior=prior, losses=losses, **{k: v for k, v in data.items() if k in known})


def desk_profile(seed: int = 0, base_width: int = 16) -> tuple[NetConfig, HyperParams]:
    """32x32 images, three blocks, short schedules for a single CPU."""
    config = NetConfig(image_size=32, channels=3, base_width=base_width, d=128, blocks=3)
    hp = HyperParams(T1=3000, T2=1000, batch_stage1=64, batch_stage2=32, seed=seed)
    return config, hp


def apply_preset(hp: HyperParams, preset: str) -> HyperParams:
    """Copy of ``hp`` with prior and loss kinds set by a named ablation variant."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    out = HyperParams.from_dict(hp.to_dict())
    out.prior.kind = p.prior
    out.losses.recon_kind = p.recon_kind
    out.losses.triplet_kind = p.triplet_kind
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, beta1: float = 0.5, beta2: float = 0.999,
                eps: float = 1e-8) -> None:
    """One in-place Adam step with bias correction."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise T.ShapeError("adam_update: parameter, gradient and moments differ in shape")
    if step < 1:
        raise ValueError("step must be >= 1")
    if not np.isfinite(grad).all():
        raise T.NonFiniteError("non-finite gradient")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * (grad * grad)
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    """Adam over named parameters; only parameters holding a gradient move."""

    def __init__(self, lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.slots: dict[str, AdamSlot] = {}

    def step(self, params: dict[str, Tensor]) -> int:
        moved = 0
        for name, p in params.items():
            if p.grad is None:
                continue
            slot = self.slots.get(name)
            if slot is None:
                slot = self.slots[name] = AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data))
            slot.step += 1
            adam_update(p.data, p.grad.astype(p.dtype, copy=False), slot.m, slot.v, slot.step,
                        self.lr, self.beta1, self.beta2, self.eps)
            p.grad = None
            moved += 1
        return moved


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

class ImageBank:
    """In-memory real images (N,C,H,W) sampled without replacement per batch."""

    def __init__(self, images: np.ndarray):
        if images.ndim != 4 or len(images) == 0:
            raise ValueError("expected a non-empty (N, C, H, W) image array")
        self.images = images

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.images), n, replace=n > len(self.images))
        return self.images[idx]


@dataclass
class TrainState:
    config: NetConfig
    hp: HyperParams
    preset: str
    generator: Generator | None
    discriminator: Discriminator
    opt_g: Adam | None
    opt_d: Adam
    rng: np.random.Generator
    stage: str = "stage1"
    t1: int = 0
    t2: int = 0
    g_updates: int = 0
    d_updates: int = 0
    frozen: Discriminator | None = None

    @property
    def iteration(self) -> int:
        return self.t1 + self.t2


def new_state(config: NetConfig, hp: HyperParams, preset: str) -> TrainState:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    config.validate()
    hp.validate()
    if hp.prior.d != config.d:
        raise ValueError(f"prior dimension {hp.prior.d} != network d {config.d}")
    gen, disc = init_params(config, hp.seed)
    gan = PRESETS[preset].gan

    def adam():
        return Adam(hp.lr, hp.adam_beta1, hp.adam_beta2, hp.adam_eps)

    return TrainState(
        config=config, hp=hp, preset=preset,
        generator=gen if gan else None,
        discriminator=disc,
        opt_g=adam() if gan else None,
        opt_d=adam(),
        rng=np.random.default_rng([hp.seed, 1]),
        stage="stage1" if gan else "T",
    )


@dataclass
class LossReport:
    iter: int
    stage: str
    loss_g_adv: float | None = None
    loss_d_adv: float | None = None
    loss_recon: float | None = None
    loss_triplet: float | None = None
    loss_reg: float | None = None
    total: float | None = None

    def row(self) -> list:
        out = []
        for name in LOSS_CSV_HEADER:
            v = getattr(self, name)
            out.append("" if v is None else (repr(float(v)) if isinstance(v, float) else v))
        return out


def _recon(kind: str, z_hat: Tensor, z: np.ndarray) -> Tensor:
    return recon_bce(z_hat, z) if kind == "bce" else recon_mse(z_hat, z)


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _check_finite_loss(loss: Tensor, what: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise T.NonFiniteError(f"{what} is not finite")
    return value


def _encode_triplets(dnet: Discriminator, anchors: np.ndarray, grid: MaskGrid,
                     weights: dict[str, Tensor], anchor_enc: Tensor | None = None):
    pos, neg = build_triplet_batch(anchors, grid)
    b, p, n = len(anchors), pos.shape[1], neg.shape[1]
    masked = np.concatenate([pos, neg], axis=1).reshape((b * (p + n),) + anchors.shape[1:])
    if anchor_enc is None:
        anchor_enc = dnet.encode(Tensor(anchors), weights=weights)
    enc = T.reshape(dnet.encode(Tensor(masked), weights=weights), (b, p + n, -1))
    pos_enc = T.take(enc, np.arange(p), axis=1)
    neg_enc = T.take(enc, np.arange(p, p + n), axis=1)
    return anchor_enc, pos_enc, neg_enc


def stage1_iteration(state: TrainState, data: ImageBank, hp: HyperParams,
                     grid: MaskGrid | None = None) -> LossReport:
    """One generator update followed by ``T_inner`` discriminator updates."""
    G, D, rng = state.generator, state.discriminator, state.rng
    lc = hp.losses
    dt = state.config.np_dtype
    b = hp.batch_stage1
    if lc.triplet_kind == "single_stage" and grid is None:
        raise ValueError("single-stage triplet training needs a mask grid")

    # generator step: D participates in the graph but is not differentiated
    z = sample_latent(hp.prior, b, rng, dt)
    d_params = list(D.params.values())
    for p in d_params:
        p.requires_grad = False
    try:
        out = D(G(Tensor(z)), "train")
        parts = {"adv": adv_loss_g(out.score)}
        if lc.recon_kind != "none":
            parts["recon"] = _recon(lc.recon_kind, out.encoding, z)
        loss_g = total_stage1_g(parts, lc)
        _check_finite_loss(loss_g, "generator loss")
        for p in G.params.values():
            p.grad = None
        loss_g.backward()
    finally:
        for p in d_params:
            p.requires_grad = True
    state.opt_g.step(G.params)
    state.g_updates += 1
    g_adv = parts["adv"].item()

    d_adv, d_recon, d_trip, d_total = [], [], [], []
    for _ in range(hp.T_inner):
        z = sample_latent(hp.prior, b, rng, dt)
        with T.no_grad():
            fake = G(Tensor(z), "train").data
        real = data.sample(rng, b).astype(dt, copy=False)
        weights = D.weights("train")
        feat = D.trunk(Tensor(np.concatenate([real, fake])), weights)
        score = D.score(feat, weights)
        parts = {"adv": adv_loss_d(T.narrow(score, 0, b), T.narrow(score, b, 2 * b))}
        if lc.recon_kind != "none":
            z_hat = D.encoding(T.narrow(feat, b, 2 * b), weights)
            parts["recon"] = _recon(lc.recon_kind, z_hat, z)
            d_recon.append(parts["recon"].item())
        if lc.triplet_kind == "single_stage":
            na = min(hp.batch_stage2, b)
            anchor_enc = D.encoding(T.narrow(feat, 0, na), weights)
            a, pz, nz = _encode_triplets(D, real[:na], grid, weights, anchor_enc)
            parts["triplet"] = triplet_loss(a, pz, nz, lc.rho)
            d_trip.append(parts["triplet"].item())
        loss_d = total_stage1_d(parts, lc)
        d_total.append(_check_finite_loss(loss_d, "discriminator loss"))
        d_adv.append(parts["adv"].item())
        for p in d_params:
            p.grad = None
        loss_d.backward()
        state.opt_d.step(D.params)
        state.d_updates += 1

    return LossReport(
        iter=state.iteration + 1, stage="stage1", loss_g_adv=g_adv,
        loss_d_adv=_mean_or_none(d_adv), loss_recon=_mean_or_none(d_recon),
        loss_triplet=_mean_or_none(d_trip), total=_mean_or_none(d_total),
    )


def stage2_iteration(state: TrainState, data: ImageBank, hp: HyperParams,
                     grid: MaskGrid, regularize: bool = True) -> LossReport:
    """Triplet update of the trunk and encoding head, anchored to the frozen snapshot."""
    if regularize and state.frozen is None:
        raise RuntimeError("stage 2 requires the stage-1 discriminator snapshot")
    D, rng = state.discriminator, state.rng
    dt = state.config.np_dtype
    anchors = data.sample(rng, hp.batch_stage2).astype(dt, copy=False)
    trainable = D.parameters(("trunk", "encoding"))
    weights = D.weights("train", heads=("encoding",))
    a, pz, nz = _encode_triplets(D, anchors, grid, weights)
    parts = {"triplet": triplet_loss(a, pz, nz, hp.losses.rho)}
    if regularize:
        with T.no_grad():
            frozen_enc = state.frozen.encode(Tensor(anchors), mode="eval")
        parts["reg"] = stage2_regularizer(a, frozen_enc)
        loss = total_stage2_d(parts, hp.losses)
    else:
        loss = parts["triplet"]
    total = _check_finite_loss(loss, "stage-2 loss")
    for p in D.params.values():
        p.grad = None
    loss.backward()
    state.opt_d.step(trainable)
    state.d_updates += 1
    return LossReport(
        iter=state.iteration + 1, stage="stage2" if regularize else "T",
        loss_triplet=parts["triplet"].item(),
        loss_reg=parts["reg"].item() if regularize else None, total=total,
    )


def _advance_stage(state: TrainState) -> None:
    hp = state.hp
    if state.stage == "stage1" and state.t1 >= hp.T1:
        if hp.losses.triplet_kind == "two_stage":
            state.frozen = snapshot(state.discriminator)
            state.stage = "stage2"
        else:
            state.stage = "done"
    if state.stage == "stage2" and state.t2 >= hp.T2:
        state.stage = "done"
    if state.stage == "T" and state.t1 >= hp.T1:
        state.stage = "done"


def train_steps(state: TrainState, data: ImageBank, grid: MaskGrid, n: int | None = None,
                on_report: Callable[[LossReport], None] | None = None) -> list[LossReport]:
    """Advance up to ``n`` iterations (all remaining when None)."""
    reports = []
    _advance_stage(state)
    while state.stage != "done" and (n is None or len(reports) < n):
        if state.stage == "stage1":
            report = stage1_iteration(state, data, state.hp, grid)
            state.t1 += 1
        elif state.stage == "stage2":
            report = stage2_iteration(state, data, state.hp, grid)
            state.t2 += 1
        else:
            report = stage2_iteration(state, data, state.hp, grid, regularize=False)
            state.t1 += 1
        reports.append(report)
        if on_report is not None:
            on_report(report)
        _advance_stage(state)
    return reports


class LossLog:
    """Append-only loss CSV."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOSS_CSV_HEADER)

    def __call__(self, report: LossReport) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow(report.row())


def run_training(config: NetConfig, hp: HyperParams, images: np.ndarray, preset: str,
                 grid: MaskGrid | None = None, state: TrainState | None = None,
                 loss_csv: str | Path | None = None, checkpoint_dir: str | Path | None = None,
                 checkpoint_every: int = 0, log_every: int = 100) -> TrainState:
    """Run a named variant to completion and return the final state.

    Two-stage variants run T1 stage-1 then T2 stage-2 iterations;
    single-stage and reconstruction-only variants stop after stage 1; the
    triplet-only variant runs T1 discriminator-only iterations.
    """
    from .checkpoint import save_checkpoint

    if state is None:
        hp = apply_preset(hp, preset)
        state = new_state(config, hp, preset)
    if grid is None:
        grid = make_grid(config.image_size, config.image_size // 4)
    data = ImageBank(images)
    sink = LossLog(loss_csv) if loss_csv is not None else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def on_report(report: LossReport) -> None:
        if sink is not None:
            sink(report)
        if log_every and report.iter % log_every == 0:
            log.info("iter %d %s total=%.4f", report.iter, report.stage, report.total or 0.0)
        if ckpt_dir is not None and checkpoint_every and report.iter % checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"iter_{report.iter:07d}.ssgf", state)

    train_steps(state, data, grid, on_report=on_report)
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.ssgf", state)
    return state
