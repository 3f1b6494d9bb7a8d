"""Flat JSON run configuration with named variant presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .masking import NEGATIVE_MODES, MaskGrid, make_grid
from .nn import NetConfig
from .objectives import LossConfig
from .trainer import PRESETS, HyperParams, LatentPrior

PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    """Validation failure; ``problems`` maps field names to messages."""

    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        listing = "; ".join(f"{k}: {v}" for k, v in problems.items())
        super().__init__(f"invalid config ({listing})")


@dataclass
class RunConfig:
    preset: str = "GdBT2"
    profile: str = "desk"
    seed: int = 0
    # network
    image_size: int = 32
    channels: int = 3
    base_width: int = 16
    d: int = 128
    leaky_slope: float = 0.1
    blocks: int = 3
    g_modulation: bool = False
    sn_iters: int = 1
    dtype: str = "float32"
    # schedule and optimizer
    T1: int = 3000
    T2: int = 1000
    T_inner: int = 3
    lr: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_stage1: int = 64
    batch_stage2: int = 32
    # losses and latent prior
    prior: str = "bernoulli"
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 0.2
    rho: float = 0.5
    recon_kind: str = "bce"
    triplet_kind: str = "two_stage"
    # masking
    patch_size: int = 8
    negative_mode: str = "all_non_corner"
    pixel_mean: str = "channel"
    # evaluation
    eval_way: int = 5
    eval_shot: int = 1
    eval_query: int = 15
    eval_episodes: int = 1000
    # paths and logging
    manifest: str = ""
    out_dir: str = "run"
    checkpoint_every: int = 0
    log_every: int = 100

    # -- views ---------------------------------------------------------------

    def net_config(self) -> NetConfig:
        return NetConfig(image_size=self.image_size, channels=self.channels,
                         base_width=self.base_width, d=self.d, leaky_slope=self.leaky_slope,
                         blocks=self.blocks, g_modulation=self.g_modulation,
                         sn_iters=self.sn_iters, dtype=self.dtype)

    def hyper_params(self) -> HyperParams:
        return HyperParams(
            T1=self.T1, T2=self.T2, T_inner=self.T_inner, lr=self.lr,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
            batch_stage1=self.batch_stage1, batch_stage2=self.batch_stage2,
            prior=LatentPrior(self.prior, self.d),
            losses=LossConfig(self.beta, self.gamma, self.lam, self.rho, self.recon_kind,
                              self.triplet_kind),
            seed=self.seed,
        )

    def grid(self) -> MaskGrid:
        return make_grid(self.image_size, self.patch_size, self.negative_mode, self.pixel_mean)

    def to_dict(self) -> dict:
        return asdict(self)

    # -- checks --------------------------------------------------------------

    def problems(self) -> dict[str, str]:
        out: dict[str, str] = {}

        def check(name: str, fn) -> None:
            try:
                fn()
            except (ValueError, TypeError) as exc:
                out[name] = str(exc)

        if self.preset not in PRESETS:
            out["preset"] = f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}"
        else:
            p = PRESETS[self.preset]
            for name, want in (("prior", p.prior), ("recon_kind", p.recon_kind),
                               ("triplet_kind", p.triplet_kind)):
                have = getattr(self, name)
                # continuous presets accept either continuous prior
                if name == "prior" and want == "uniform" and have == "gaussian":
                    continue
                if have != want:
                    out[name] = f"preset {self.preset} requires {name}={want!r}"
        if self.profile not in PROFILES:
            out["profile"] = f"must be one of {PROFILES}"
        if self.negative_mode not in NEGATIVE_MODES:
            out["negative_mode"] = f"must be one of {NEGATIVE_MODES}"
        for name in ("eval_way", "eval_shot", "eval_query", "eval_episodes"):
            if getattr(self, name) < 1:
                out[name] = "must be >= 1"
        for name in ("checkpoint_every", "log_every"):
            if getattr(self, name) < 0:
                out[name] = "must be >= 0"
        check("network", self.net_config().validate)
        check("hyperparameters", self.hyper_params().validate)
        check("patch_size", self.grid)
        if "prior" not in out and "recon_kind" not in out:
            allowed = {"mse": ("uniform", "gaussian"), "bce": ("bernoulli",)}.get(self.recon_kind)
            if allowed and self.prior not in allowed:
                out["recon_kind"] = f"recon_kind={self.recon_kind} requires prior in {allowed}"
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value, problems: dict[str, str]):
    kind = _FIELDS[name].type
    if kind == "bool":
        if not isinstance(value, bool):
            problems[name] = f"expected true/false, got {value!r}"
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            problems[name] = f"expected an integer, got {value!r}"
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems[name] = f"expected a number, got {value!r}"
            return value
        return float(value)
    if not isinstance(value, str):
        problems[name] = f"expected a string, got {value!r}"
    return value


def profile_defaults(profile: str) -> dict:
    """Field values of a named compute profile."""
    if profile == "desk":
        return {}
    if profile == "paper":
        hp = HyperParams()
        return {"image_size": 64, "blocks": 4, "base_width": 64, "T1": hp.T1, "T2": hp.T2,
                "batch_stage1": hp.batch_stage1, "batch_stage2": hp.batch_stage2,
                "patch_size": 16}
    raise ConfigError({"profile": f"must be one of {PROFILES}"})


def expand(raw: dict) -> RunConfig:
    """Defaults, then the profile, then the preset, then explicit fields.

    Explicit fields that contradict the preset are reported, not silently
    overridden.
    """
    problems: dict[str, str] = {}
    unknown = sorted(set(raw) - set(_FIELDS))
    for name in unknown:
        problems[name] = "unknown field"
    values = {}
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        problems["profile"] = f"must be one of {PROFILES}"
    else:
        values.update(profile_defaults(profile))
    preset = raw.get("preset", RunConfig.preset)
    if preset in PRESETS:
        p = PRESETS[preset]
        values.update(prior=p.prior, recon_kind=p.recon_kind, triplet_kind=p.triplet_kind)
    for name, value in raw.items():
        if name in _FIELDS:
            values[name] = _coerce(name, value, problems)
    if problems:
        raise ConfigError(problems)
    return RunConfig(**values).validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError({"file": f"not valid JSON: {exc}"}) from None
    if not isinstance(raw, dict):
        raise ConfigError({"file": "top level must be a JSON object"})
    return expand(raw)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path
