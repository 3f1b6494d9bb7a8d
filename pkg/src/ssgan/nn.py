"""Generator, dual-head discriminator and spectral normalization."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor


@dataclass
class NetConfig:
    image_size: int = 64
    channels: int = 3
    base_width: int = 64
    d: int = 128
    leaky_slope: float = 0.1
    blocks: int = 4
    g_modulation: bool = False
    sn_iters: int = 1
    dtype: str = "float32"

    def validate(self) -> None:
        n = self.image_size
        if n < 16 or n & (n - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {n}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.blocks < 1 or n // 2 ** self.blocks < 4:
            raise ValueError(
                f"image_size / 2**blocks must be >= 4 ({n} / 2**{self.blocks})"
            )
        if self.d < 1 or self.base_width < 1:
            raise ValueError("d and base_width must be >= 1")
        if self.sn_iters < 1:
            raise ValueError("sn_iters must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    @property
    def bottom(self) -> int:
        """Spatial extent of the deepest feature map."""
        return self.image_size // 2 ** self.blocks

    def generator_widths(self) -> list[int]:
        # blocks=4 -> 8w, 4w, 2w, w, w: the top width is 8 * base_width
        w = self.base_width
        return [w * 2 ** max(self.blocks - 1 - i, 0) for i in range(self.blocks + 1)]

    def discriminator_widths(self) -> list[int]:
        w = self.base_width
        return [self.channels] + [w * 2 ** i for i in range(self.blocks)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpectralNormState:
    """Persistent left singular vector estimate for one weight."""

    u: np.ndarray
    sigma: float = field(default=float("nan"))


def spectral_normalize(w: Tensor, state: SpectralNormState, iters: int = 1,
                       update: bool = True) -> Tensor:
    """Divide ``w`` by a power-iteration estimate of its top singular value.

    The weight is viewed as a matrix of shape (w.shape[0], -1). The singular
    vectors are treated as constants for differentiation. With ``update``
    false the refreshed ``u`` is discarded, so the result depends only on
    the stored state.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    wmat = w.data.reshape(w.shape[0], -1)
    u = state.u
    v = None
    for _ in range(iters):
        v = wmat.T @ u
        vn = np.linalg.norm(v)
        if vn == 0:
            raise ValueError("spectral norm of a zero weight matrix")
        v = v / vn
        u = wmat @ v
        un = np.linalg.norm(u)
        if un == 0:
            raise ValueError("spectral norm of a zero weight matrix")
        u = u / un
    u = u.astype(w.dtype)
    v = v.astype(w.dtype)
    sigma = T.sum(T.matmul(T.reshape(w, wmat.shape), Tensor(v[:, None])) * Tensor(u[:, None]))
    if sigma.item() <= 0:
        raise ValueError("spectral norm estimate is not positive")
    if update:
        state.u = u
        state.sigma = sigma.item()
    return w / sigma


def warm_up_spectral_norm(dnet: "Discriminator", iters: int = 100) -> None:
    """Run extra power iterations so every stored ``u`` is near convergence.

    Only then does treating the singular vectors as constants give the exact
    derivative of the normalized weight.
    """
    with T.no_grad():
        for name, state in dnet.sn.items():
            spectral_normalize(dnet.params[name], state, iters, update=True)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _unit(rng: np.random.Generator, n: int, dtype) -> np.ndarray:
    u = rng.standard_normal(n)
    return (u / np.linalg.norm(u)).astype(dtype)


class Generator:
    """Latent code -> image in [-1, 1]."""

    def __init__(self, config: NetConfig, params: dict[str, Tensor],
                 bn: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn

    def __call__(self, z: Tensor, mode: str = "train") -> Tensor:
        return generator_forward(self, z, mode)

    def parameters(self) -> dict[str, Tensor]:
        return self.params


class Discriminator:
    """Shared convolutional trunk with a real/fake head and an encoding head."""

    TRUNK = "down"
    SCORE_HEAD = "head_rf"
    ENCODING_HEAD = "head_z"

    def __init__(self, config: NetConfig, params: dict[str, Tensor],
                 sn: dict[str, SpectralNormState]):
        self.config = config
        self.params = params
        self.sn = sn

    def __call__(self, x: Tensor, mode: str = "train") -> "DiscriminatorOutput":
        return discriminator_forward(self, x, mode)

    def parameters(self, groups=("trunk", "score", "encoding")) -> dict[str, Tensor]:
        prefixes = {"trunk": self.TRUNK, "score": self.SCORE_HEAD,
                    "encoding": self.ENCODING_HEAD}
        wanted = tuple(prefixes[g] for g in groups)
        return {k: v for k, v in self.params.items() if k.startswith(wanted)}

    def weights(self, mode: str = "train", heads=("score", "encoding")) -> dict[str, Tensor]:
        """Spectrally normalized weights plus biases for the requested heads.

        Train mode advances each power-iteration vector; eval mode leaves the
        state untouched.
        """
        names = list(self.parameters(("trunk",) + tuple(heads)))
        out = {}
        for name in names:
            p = self.params[name]
            if name in self.sn:
                out[name] = spectral_normalize(p, self.sn[name], self.config.sn_iters,
                                               update=(mode == "train"))
            else:
                out[name] = p
        return out

    def trunk(self, x: Tensor, weights: dict[str, Tensor]) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise T.ShapeError(
                f"discriminator expects (B, {cfg.channels}, {cfg.image_size}, "
                f"{cfg.image_size}), got {x.shape}"
            )
        h = x
        for i in range(cfg.blocks):
            h = T.conv2d(h, weights[f"down{i}.weight"], stride=2, pad=1)
            h = T.channel_affine(h, None, weights[f"down{i}.bias"])
            h = T.leaky_relu(h, cfg.leaky_slope)
        return T.reduce(h, "sum", (2, 3))

    def score(self, feat: Tensor, weights: dict[str, Tensor]) -> Tensor:
        s = T.channel_affine(T.matmul(feat, weights["head_rf.weight"]), None,
                             weights["head_rf.bias"])
        return T.reshape(s, (feat.shape[0],))

    def encoding(self, feat: Tensor, weights: dict[str, Tensor]) -> Tensor:
        return T.channel_affine(T.matmul(feat, weights["head_z.weight"]), None,
                                weights["head_z.bias"])

    def encode(self, x: Tensor, mode: str = "train",
               weights: dict[str, Tensor] | None = None) -> Tensor:
        """Encoding head only; the real/fake head is never touched."""
        if weights is None:
            weights = self.weights(mode, heads=("encoding",))
        return self.encoding(self.trunk(x, weights), weights)


@dataclass
class DiscriminatorOutput:
    score: Tensor
    encoding: Tensor


def generator_forward(g: Generator, z: Tensor, mode: str = "train") -> Tensor:
    cfg = g.config
    p = g.params
    if z.ndim != 2 or z.shape[1] != cfg.d:
        raise T.ShapeError(f"generator expects (B, {cfg.d}) latents, got {z.shape}")
    widths = cfg.generator_widths()
    b = z.shape[0]
    h = T.channel_affine(T.matmul(z, p["fc.weight"]), None, p["fc.bias"])
    h = T.reshape(h, (b, widths[0], cfg.bottom, cfg.bottom))
    for i in range(cfg.blocks):
        h = T.conv2d_transpose(h, p[f"up{i}.weight"], stride=2, pad=1)
        gamma, beta = p[f"up{i}.bn_gamma"], p[f"up{i}.bn_beta"]
        if cfg.g_modulation:
            hid = T.relu(T.channel_affine(T.matmul(z, p[f"up{i}.mod_hidden.weight"]), None,
                                          p[f"up{i}.mod_hidden.bias"]))
            gamma = T.channel_affine(T.matmul(hid, p[f"up{i}.mod_gamma.weight"]), None, gamma)
            beta = T.channel_affine(T.matmul(hid, p[f"up{i}.mod_beta.weight"]), None, beta)
        h = T.batch_norm(h, gamma, beta, g.bn[f"up{i}"], mode)
        h = T.relu(h)
    h = T.conv2d(h, p["out.weight"], stride=1, pad=1)
    h = T.channel_affine(h, None, p["out.bias"])
    return T.tanh(h)


def discriminator_forward(dnet: Discriminator, x: Tensor, mode: str = "train") -> DiscriminatorOutput:
    weights = dnet.weights(mode)
    feat = dnet.trunk(x, weights)
    return DiscriminatorOutput(dnet.score(feat, weights), dnet.encoding(feat, weights))


def init_params(config: NetConfig, seed: int = 0) -> tuple[Generator, Discriminator]:
    """He-normal weights, unit batch-norm scale, zero biases, random unit u."""
    config.validate()
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d = config.d

    def leaf(arr):
        return Tensor(arr, requires_grad=True, dtype=dt)

    gp: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    gw = config.generator_widths()
    top = gw[0] * config.bottom ** 2
    gp["fc.weight"] = leaf(_he_normal(rng, (d, top), d, dt))
    gp["fc.bias"] = leaf(np.zeros(top, dt))
    for i in range(config.blocks):
        cin, cout = gw[i], gw[i + 1]
        # transposed conv: each output pixel sees cin * (k/stride)^2 inputs
        gp[f"up{i}.weight"] = leaf(_he_normal(rng, (cin, cout, 4, 4), cin * 4, dt))
        gp[f"up{i}.bn_gamma"] = leaf(np.ones(cout, dt))
        gp[f"up{i}.bn_beta"] = leaf(np.zeros(cout, dt))
        if config.g_modulation:
            gp[f"up{i}.mod_hidden.weight"] = leaf(_he_normal(rng, (d, d), d, dt))
            gp[f"up{i}.mod_hidden.bias"] = leaf(np.zeros(d, dt))
            gp[f"up{i}.mod_gamma.weight"] = leaf(_he_normal(rng, (d, cout), d, dt) * 0.1)
            gp[f"up{i}.mod_beta.weight"] = leaf(_he_normal(rng, (d, cout), d, dt) * 0.1)
        bn[f"up{i}"] = BatchNormState(cout, dt)
    gp["out.weight"] = leaf(_he_normal(rng, (config.channels, gw[-1], 3, 3), gw[-1] * 9, dt))
    gp["out.bias"] = leaf(np.zeros(config.channels, dt))

    dp: dict[str, Tensor] = {}
    sn: dict[str, SpectralNormState] = {}
    dw = config.discriminator_widths()
    for i in range(config.blocks):
        cin, cout = dw[i], dw[i + 1]
        dp[f"down{i}.weight"] = leaf(_he_normal(rng, (cout, cin, 4, 4), cin * 16, dt))
        dp[f"down{i}.bias"] = leaf(np.zeros(cout, dt))
    feat = dw[-1]
    dp["head_rf.weight"] = leaf(_he_normal(rng, (feat, 1), feat, dt))
    dp["head_rf.bias"] = leaf(np.zeros(1, dt))
    dp["head_z.weight"] = leaf(_he_normal(rng, (feat, d), feat, dt))
    dp["head_z.bias"] = leaf(np.zeros(d, dt))
    for name, p in dp.items():
        if name.endswith(".weight"):
            sn[name] = SpectralNormState(_unit(rng, p.shape[0], dt))

    return Generator(config, gp, bn), Discriminator(config, dp, sn)


def parameter_count(config: NetConfig) -> int:
    g, d = init_params(config, 0)
    return sum(p.size for p in g.params.values()) + sum(p.size for p in d.params.values())


def snapshot(dnet: Discriminator) -> Discriminator:
    """Frozen deep copy; later updates to ``dnet`` never reach it."""
    params = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in dnet.params.items()}
    sn = {k: SpectralNormState(s.u.copy(), s.sigma) for k, s in dnet.sn.items()}
    return Discriminator(copy.deepcopy(dnet.config), params, sn)


def restore(frozen: Discriminator) -> Discriminator:
    """Trainable deep copy of a snapshot."""
    live = snapshot(frozen)
    for p in live.params.values():
        p.requires_grad = True
    return live
