"""DMCH model assembly, configuration and inference helpers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import AttentionDecoder, Vocabulary, init_decoder_params
from .embedding import binarize_rows, fuse_embed, margin_for
from .encoder import ConvEncoder, init_conv_params
from .errors import ConfigError
from .synth import ATTRIBUTE_TOKENS


@dataclass
class TrainConfig:
    hidden: int = 256
    embed_dim: int = 256
    conv_channels: tuple[int, ...] = (16, 32)
    image_size: int = 64
    code_bits: int = 128
    batch_size: int = 32
    momentum: float = 0.9
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_decay_every: int = 50
    eta: float = 3.0
    lam: float = 1.0
    neg_ratio: int = 10
    seed: int = 0
    use_tag_loss: bool = True
    continuation: bool = True
    phi0: float = 1.0
    phi_growth: float = 10.0
    n_stages: int = 4
    stage_epoch_cap: int = 50
    plateau_tol: float = 1e-3
    plateau_patience: int = 3
    max_epochs: int = 150
    clip_norm: float = 5.0
    max_decode_len: int = 8

    def validate(self) -> "TrainConfig":
        positive = ("hidden", "embed_dim", "image_size", "code_bits", "batch_size", "lr",
                    "neg_ratio", "phi0", "n_stages", "stage_epoch_cap", "max_epochs",
                    "lr_decay_every", "max_decode_len")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.eta < 0 or self.lam < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("eta and lambda must be >= 0 and momentum in [0, 1)")
        if self.phi_growth <= 1:
            raise ConfigError("phi_growth must exceed 1")
        margin_for(self.code_bits)
        return self

    @property
    def margin(self) -> float:
        return margin_for(self.code_bits)

    # -- plain-text key = value files ----------------------------------------

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    def updated(self, **overrides) -> "TrainConfig":
        cur = dataclasses.asdict(self)
        for key, raw in overrides.items():
            if raw is None:
                continue
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in cur:
                raise ConfigError(f"unknown config key {key!r}")
            cur[key] = _coerce(key, raw, cur[key])
        return TrainConfig(**cur).validate()


def _coerce(key: str, raw, current):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(current, tuple) else type(current)(raw)
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return type(current)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def read_config(path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return (base or TrainConfig()).updated(**pairs)


# ---------------------------------------------------------------- model


class DMCHModel:
    """Encoder, attention decoder and embedding head sharing one parameter dict."""

    def __init__(self, config: TrainConfig, vocab: Vocabulary | None = None, seed: int | None = None):
        self.config = config
        self.vocab = vocab or Vocabulary(ATTRIBUTE_TOKENS)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        channels = (3,) + tuple(config.conv_channels) + (config.hidden,)
        self.params: dict[str, Tensor] = init_conv_params(rng, channels)
        self.encoder = ConvEncoder(self.params, len(channels) - 1)
        gh, gw = self.encoder.grid_shape(config.image_size, config.image_size)
        self.grid_shape = (gh, gw)
        self.params.update(init_decoder_params(rng, len(self.vocab), config.embed_dim,
                                               config.hidden, gh * gw))
        bound = np.sqrt(3.0 / (2 * config.hidden))
        self.params["emb.W_e"] = Tensor(
            rng.uniform(-bound, bound, (2 * config.hidden, config.code_bits)), requires_grad=True)
        self.decoder = AttentionDecoder(self.params, self.vocab)
        self.phi = config.phi0

    # -- training graph --------------------------------------------------------

    def forward(self, images: np.ndarray, sequences: Sequence[Sequence[int]], weights=None, phi=None):
        """Teacher-forced pass. Returns (summed weighted tag loss, relaxed codes)."""
        grid = self.encoder.encode(images)
        trace = self.decoder.teacher_forced(grid, sequences)
        tag = self.decoder.tag_loss(grid, sequences, weights, trace=trace)
        e = fuse_embed(grid.pooled, self.decoder.mean_context(trace), self.params["emb.W_e"],
                       self.config.lam, self.phi if phi is None else phi)
        return tag, e

    # -- inference -------------------------------------------------------------

    def infer(self, images: np.ndarray, batch: int = 64, phi: float | None = None):
        """Greedy-decode and embed images.

        Returns (relaxed codes (N, C), packed codes (N, ceil(C/8)), token
        sequences, attention records per image).
        """
        images = np.asarray(images, dtype=np.float64)
        phi = self.phi if phi is None else phi
        codes, seqs, recs = [], [], []
        with ad.no_grad():
            for i in range(0, len(images), batch):
                grid = self.encoder.encode(images[i:i + batch])
                s, r, ctx = self.decoder.decode_greedy(grid, self.config.max_decode_len)
                e = fuse_embed(grid.pooled, Tensor(ctx), self.params["emb.W_e"], self.config.lam, phi)
                codes.append(e.data)
                seqs += s
                recs += r
        relaxed = np.concatenate(codes) if codes else np.zeros((0, self.config.code_bits))
        return relaxed, binarize_rows(relaxed), seqs, recs

    # -- persistence -----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out["schedule.phi"] = np.array([self.phi])
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise ConfigError(f"checkpoint lacks parameter {name}")
            if state[name].shape != p.shape:
                raise ConfigError(
                    f"parameter {name}: checkpoint shape {state[name].shape} vs config shape {p.shape}")
            p.data = state[name].copy()
        extra = set(state) - set(self.params) - {"schedule.phi"}
        if extra:
            raise ConfigError(f"checkpoint has parameters unknown to this config: {sorted(extra)}")
        if "schedule.phi" in state:
            self.phi = float(state["schedule.phi"][0])

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.state())

    @classmethod
    def load(cls, path, config: TrainConfig) -> "DMCHModel":
        model = cls(config)
        model.load_state(ad.load_checkpoint(path))
        return model
