"""Finite-difference check of every differentiable op, loss and network path."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import objectives as O
from . import tensor as T
from .masking import build_triplet_batch, make_grid
from .nn import (NetConfig, SpectralNormState, init_params, spectral_normalize,
                 warm_up_spectral_norm)
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _leaf(rng: np.random.Generator, *shape: int, away_from: float | None = None,
          positive: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from is not None:
        # keep entries clear of a kink so central differences never straddle it
        x = x + np.where(x >= away_from, 0.2, -0.2)
    return Tensor(x, requires_grad=True)


def _weights(rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """A fixed random linear functional, so every output entry matters differently."""
    seed = int(rng.integers(1 << 30))

    def apply(out: Tensor) -> Tensor:
        w = np.random.default_rng(seed).standard_normal(out.shape)
        return T.sum(out * Tensor(w))
    return apply


Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _unary(kind: str, **kw) -> Case:
    kinked = kind in ("relu", "leaky_relu", "max_with_scalar")

    def build(rng):
        x = _leaf(rng, 3, 4, positive=kind == "sqrt",
                  away_from=kw.get("c", 0.0) if kinked else None)
        wt = _weights(rng)
        return (lambda: wt(T.elementwise(x, None, kind, **kw))), [x]
    return build


def _binary(kind: str, scalar: bool = False) -> Case:
    def build(rng):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 1) if scalar else _leaf(rng, 3, 4)
        if kind == "div":
            b.data = np.sign(b.data) * (np.abs(b.data) + 0.5)
        wt = _weights(rng)
        return (lambda: wt(T.elementwise(a, b, kind))), [a, b]
    return build


def _case_matmul(rng):
    a, b = _leaf(rng, 4, 5), _leaf(rng, 5, 3)
    wt = _weights(rng)
    return (lambda: wt(T.matmul(a, b))), [a, b]


def _case_conv(stride: int, pad: int, cin: int, cout: int, k: int, size: int) -> Case:
    def build(rng):
        x = _leaf(rng, 2, cin, size, size)
        w = _leaf(rng, cout, cin, k, k)
        wt = _weights(rng)
        return (lambda: wt(T.conv2d(x, w, stride, pad))), [x, w]
    return build


def _case_conv_t(stride: int, pad: int, cin: int, cout: int, k: int, size: int) -> Case:
    def build(rng):
        x = _leaf(rng, 2, cin, size, size)
        w = _leaf(rng, cin, cout, k, k)
        wt = _weights(rng)
        return (lambda: wt(T.conv2d_transpose(x, w, stride, pad))), [x, w]
    return build


def _case_batch_norm(mode: str) -> Case:
    def build(rng):
        x = _leaf(rng, 4, 3, 3, 3)
        gamma, beta = _leaf(rng, 3), _leaf(rng, 3)
        state = T.BatchNormState(3, np.float64)
        state.running_mean[:] = rng.standard_normal(3)
        state.running_var[:] = rng.uniform(0.5, 2.0, 3)
        saved = (state.running_mean.copy(), state.running_var.copy())
        wt = _weights(rng)

        def f():
            # running statistics must not drift between probes
            state.running_mean[:], state.running_var[:] = saved
            return wt(T.batch_norm(x, gamma, beta, state, mode))
        return f, [x, gamma, beta]
    return build


def _case_affine(rng):
    x = _leaf(rng, 3, 4, 2, 2)
    s, t = _leaf(rng, 3, 4), _leaf(rng, 4)
    wt = _weights(rng)
    return (lambda: wt(T.channel_affine(x, s, t))), [x, s, t]


def _case_reduce(kind: str) -> Case:
    def build(rng):
        x = _leaf(rng, 3, 4, 5)
        wt = _weights(rng)
        return (lambda: wt(T.reduce(x, kind, (0, 2)))), [x]
    return build


def _case_shape_ops(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 2, 3)
    wt = _weights(rng)

    def f():
        c = T.concat([a, b], axis=0)
        picked = T.take(c, [0, 2, 2, 5], axis=0)
        return wt(T.reshape(T.narrow(picked, 1, 4), (9,)))
    return f, [a, b]


def _case_l2_normalize(rng):
    x = _leaf(rng, 3, 5)
    wt = _weights(rng)
    return (lambda: wt(T.l2_normalize(x, -1))), [x]


def _case_spectral_norm(rng):
    w = _leaf(rng, 4, 2, 3, 3)
    u0 = rng.standard_normal(4)
    u0 /= np.linalg.norm(u0)
    # constant singular vectors give the exact derivative only once converged
    warm = SpectralNormState(u0)
    spectral_normalize(w, warm, iters=200)
    u0 = warm.u
    wt = _weights(rng)

    def f():
        return wt(spectral_normalize(w, SpectralNormState(u0.copy()), iters=3, update=False))
    return f, [w]


def _case_adv_d(rng):
    real, fake = _leaf(rng, 6, away_from=1.0), _leaf(rng, 5, away_from=-1.0)
    return (lambda: O.adv_loss_d(real, fake)), [real, fake]


def _case_adv_g(rng):
    fake = _leaf(rng, 5)
    return (lambda: O.adv_loss_g(fake)), [fake]


def _case_recon_mse(rng):
    z_hat = _leaf(rng, 4, 6)
    z = rng.uniform(-1, 1, (4, 6))
    return (lambda: O.recon_mse(z_hat, z)), [z_hat]


def _case_recon_bce(rng):
    z_hat = _leaf(rng, 4, 6)
    z = np.where(rng.random((4, 6)) < 0.5, -1.0, 1.0)
    return (lambda: O.recon_bce(z_hat, z)), [z_hat]


def _case_cosine(rng):
    a, b = _leaf(rng, 6), _leaf(rng, 6)
    return (lambda: O.cosine_distance(a, b)), [a, b]


def _case_triplet(rng):
    a, p, n = _leaf(rng, 3, 5), _leaf(rng, 3, 4, 5), _leaf(rng, 3, 6, 5)
    # a large margin keeps every hinge active
    return (lambda: O.triplet_loss(a, p, n, rho=3.0)), [a, p, n]


def _case_regularizer(rng):
    live = _leaf(rng, 4, 6)
    frozen = rng.standard_normal((4, 6))
    return (lambda: O.stage2_regularizer(live, frozen)), [live]


_TINY = NetConfig(image_size=16, channels=3, base_width=2, d=4, blocks=2, dtype="float64")


def _case_discriminator(rng):
    g, d = init_params(_TINY, int(rng.integers(1 << 30)))
    warm_up_spectral_norm(d, 200)
    x = Tensor(rng.uniform(-1, 1, (3, 3, 16, 16)))
    z = np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0)
    saved = {k: s.u.copy() for k, s in d.sn.items()}
    grid = make_grid(16, 4)
    pos, neg = build_triplet_batch(x.data[:2], grid)

    def f():
        for k, s in d.sn.items():
            s.u = saved[k].copy()
        out = d(x, "train")
        loss = O.adv_loss_d(T.narrow(out.score, 0, 2), T.narrow(out.score, 2, 3))
        loss = loss + O.recon_bce(out.encoding, z)
        w = d.weights("eval", heads=("encoding",))
        anchors = d.encode(Tensor(x.data[:2]), weights=w)
        pe = T.reshape(d.encode(Tensor(pos.reshape(-1, 3, 16, 16)), weights=w), (2, 4, 4))
        ne = T.reshape(d.encode(Tensor(neg.reshape(-1, 3, 16, 16)), weights=w), (2, 12, 4))
        return loss + O.triplet_loss(anchors, pe, ne, rho=0.5)
    return f, list(d.params.values())


def _case_generator(rng):
    cfg = NetConfig(**{**_TINY.to_dict(), "g_modulation": True})
    g, _ = init_params(cfg, int(rng.integers(1 << 30)))
    z = Tensor(rng.uniform(-1, 1, (3, 4)))
    wt = _weights(rng)
    return (lambda: wt(g(z, "train"))), list(g.params.values()) + [z]


CASES: dict[str, Case] = {
    "matmul": _case_matmul,
    "conv2d(stride=2,pad=1)": _case_conv(2, 1, 2, 3, 4, 6),
    "conv2d(stride=1,pad=1)": _case_conv(1, 1, 2, 3, 3, 5),
    "conv2d(narrow,stride=1)": _case_conv(1, 1, 4, 2, 3, 5),
    "conv2d_transpose(stride=2,pad=1)": _case_conv_t(2, 1, 3, 2, 4, 3),
    "conv2d_transpose(stride=1,pad=0)": _case_conv_t(1, 0, 2, 3, 3, 3),
    "batch_norm(train)": _case_batch_norm("train"),
    "batch_norm(eval)": _case_batch_norm("eval"),
    "channel_affine": _case_affine,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div"),
    "mul(scalar)": _binary("mul", scalar=True),
    "neg": _unary("neg"),
    "relu": _unary("relu"),
    "leaky_relu": _unary("leaky_relu", slope=0.1),
    "tanh": _unary("tanh"),
    "sigmoid": _unary("sigmoid"),
    "square": _unary("square"),
    "softplus": _unary("softplus"),
    "max_with_scalar": _unary("max_with_scalar", c=0.3),
    "sqrt": _unary("sqrt"),
    "exp": _unary("exp"),
    "reduce(sum)": _case_reduce("sum"),
    "reduce(mean)": _case_reduce("mean"),
    "reduce(max)": _case_reduce("max"),
    "reduce(min)": _case_reduce("min"),
    "take/narrow/concat/reshape": _case_shape_ops,
    "l2_normalize": _case_l2_normalize,
    "spectral_normalize": _case_spectral_norm,
    "adv_loss_d": _case_adv_d,
    "adv_loss_g": _case_adv_g,
    "recon_mse": _case_recon_mse,
    "recon_bce": _case_recon_bce,
    "cosine_distance": _case_cosine,
    "triplet_loss": _case_triplet,
    "stage2_regularizer": _case_regularizer,
    "discriminator_pipeline": _case_discriminator,
    "generator_pipeline": _case_generator,
}


def run_suite(seed: int = 0, h: float = 1e-5, names=None,
              max_elements: int | None = None) -> list[CheckResult]:
    """Run every case in float64 regardless of the ambient default dtype."""
    results = []
    with T.default_dtype(np.float64):
        for i, (name, build) in enumerate(CASES.items()):
            if names is not None and name not in names:
                continue
            rng = np.random.default_rng([seed, i])
            start = time.perf_counter()
            f, params = build(rng)
            err = T.grad_check(f, params, h=h, max_elements=max_elements, seed=seed)
            results.append(CheckResult(name, err, time.perf_counter() - start))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
