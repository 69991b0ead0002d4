"""ResNet speaker-embedding network with per-block attention and ASP."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .attention import AttentionConfig, attention_param_count, build_attention
from .autograd import functional as F
from .autograd.nn import BatchNorm2d, Conv2d, InstanceNormFreq, Linear, Module
from .autograd.tensor import Tensor, no_grad

STAGE_BLOCKS = {34: (3, 4, 6, 3), 52: (5, 6, 9, 5)}
STAGE_STRIDES = (1, 2, 2, 2)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 34
    width: int = 32
    n_mels: int = 64
    embed_dim: int = 256
    asp_bottleneck: int = 128
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def errors(self) -> list[str]:
        errs = []
        if self.depth not in STAGE_BLOCKS:
            errs.append(f"depth must be one of {sorted(STAGE_BLOCKS)}")
        if self.width < 1:
            errs.append("width must be >= 1")
        if self.n_mels < 8 or self.n_mels % 8:
            errs.append("n_mels must be a positive multiple of 8")
        if self.embed_dim < 1 or self.asp_bottleneck < 1:
            errs.append("embed_dim and asp_bottleneck must be >= 1")
        errs.extend(self.attention.errors())
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @property
    def blocks(self) -> tuple[int, ...]:
        return STAGE_BLOCKS[self.depth]

    def to_mapping(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "attention"}
        att = self.attention
        out.update(attention=att.variant, pooling=att.pooling, se_reduction=att.se_reduction,
                   fwse_bottleneck=att.fwse_bottleneck, c2d_kernel=att.c2d_kernel,
                   c2d_channels=att.c2d_channels)
        return out

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        values = dict(values)
        att_keys = {"attention": "variant", "pooling": "pooling", "se_reduction": "se_reduction",
                    "fwse_bottleneck": "fwse_bottleneck", "c2d_kernel": "c2d_kernel",
                    "c2d_channels": "c2d_channels"}
        att = {}
        for key, name in att_keys.items():
            if key in values:
                raw = values.pop(key)
                att[name] = raw if name in ("variant", "pooling") else int(raw)
        known = {f.name for f in fields(cls)} - {"attention"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown model keys: {', '.join(unknown)}")
        return cls(attention=AttentionConfig(**att), **{k: int(v) for k, v in values.items()})

    def with_attention(self, **kwargs) -> "ModelConfig":
        return replace(self, attention=replace(self.attention, **kwargs))


class ResBlock(Module):
    """conv-BN-ReLU-conv-BN-attention, plus shortcut, then ReLU."""

    def __init__(self, cin: int, cout: int, stride: int, bins: int, att_cfg: AttentionConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        self.att = build_attention(att_cfg, cout, bins, rng)
        if stride != 1 or cin != cout:
            self.short_conv = Conv2d(cin, cout, 1, stride=stride, padding=0, rng=rng)
            self.short_bn = BatchNorm2d(cout)
        else:
            self.short_conv = self.short_bn = None
        self.last_weights: Tensor | None = None     # attention weights of the latest forward
        self.last_shape: tuple[int, ...] | None = None

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        self.last_shape = h.shape
        if self.att is not None:
            h, self.last_weights = self.att(h)
        shortcut = x if self.short_conv is None else self.short_bn(self.short_conv(x))
        if shortcut.shape != h.shape:
            raise ValueError(f"residual shape mismatch: {shortcut.shape} vs {h.shape}")
        return F.relu(h + shortcut)


class ASP(Module):
    """Attentive statistics pooling with per-dimension attention over time.

    Scores ``e = V tanh(W h_t + b) + c`` for each dimension and frame; the
    softmax over time weights a mean and a standard deviation that are
    concatenated into a (N, 2D) output.
    """

    eps = 1e-8

    def __init__(self, dim: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        self.attn_in = Linear(dim, bottleneck, rng=rng)
        self.attn_out = Linear(bottleneck, dim, rng=rng)

    def forward(self, h: Tensor) -> Tensor:
        n, d, t = h.shape
        if t < 2:
            raise ValueError("attentive statistics pooling needs at least two frames")
        frames = h.transpose(0, 2, 1).reshape(n * t, d)
        scores = self.attn_out(F.tanh(self.attn_in(frames))).reshape(n, t, d).transpose(0, 2, 1)
        alpha = F.softmax(scores, axis=2)
        mu = (alpha * h).sum(axis=2)
        var = (alpha * h * h).sum(axis=2) - mu * mu
        sigma = (var.clamp_min(0.0) + self.eps).sqrt()
        return F.concat([mu, sigma], axis=1)


class SpeakerNet(Module):
    """IN -> Conv1 -> Res1..Res4 -> flatten -> ASP -> FC embedding."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        c, f = cfg.width, cfg.n_mels
        self.input_norm = InstanceNormFreq(f)
        self.conv1 = Conv2d(1, c, 7, stride=1, padding=3, rng=rng)
        self.bn1 = BatchNorm2d(c)
        stages = []
        cin, bins = c, f
        for k, (count, stride) in enumerate(zip(cfg.blocks, STAGE_STRIDES)):
            cout = c * 2 ** k
            bins = (bins + 2 - 3) // stride + 1
            blocks = [ResBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1, bins,
                               cfg.attention, rng) for i in range(count)]
            stages.append(blocks)
            cin = cout
        self.res1, self.res2, self.res3, self.res4 = stages
        flat = c * f
        self.pool = ASP(flat, cfg.asp_bottleneck, rng)
        self.fc = Linear(2 * flat, cfg.embed_dim, rng=rng)

    @property
    def stages(self) -> list[list[ResBlock]]:
        return [self.res1, self.res2, self.res3, self.res4]

    def forward(self, feats: Tensor, trace: dict | None = None) -> Tensor:
        """Embed a (N, F, T) batch of log-Fbanks to (N, E).

        ``trace`` (optional dict) collects the output shape of every stage.
        """
        if feats.ndim != 3 or feats.shape[1] != self.config.n_mels:
            raise ValueError(f"expected (N, {self.config.n_mels}, T) features, got {feats.shape}")
        if feats.shape[2] < 16:
            raise ValueError(f"need at least 16 frames, got {feats.shape[2]}")
        n, f, t = feats.shape
        x = self.input_norm(feats)
        _record(trace, "IN", x)
        x = F.relu(self.bn1(self.conv1(x.reshape(n, 1, f, t))))
        _record(trace, "Conv1", x)
        for k, stage in enumerate(self.stages, start=1):
            for block in stage:
                x = block(x)
            _record(trace, f"Res{k}", x)
        n, c, fb, tb = x.shape
        x = x.reshape(n, c * fb, tb)
        _record(trace, "Flatten", x)
        x = self.pool(x)
        _record(trace, "ASP", x)
        x = self.fc(x)
        _record(trace, "FC", x)
        return x

    def embed(self, feats: np.ndarray) -> np.ndarray:
        """Eval-mode embedding of one (F, T) feature matrix."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward(Tensor(np.asarray(feats)[None]))
        finally:
            self.train(was_training)
        return out.data[0].copy()

    def block(self, block_id: str) -> ResBlock:
        """Look up a residual block by id such as ``res2.last`` or ``res3.0``."""
        try:
            stage_name, index = block_id.split(".")
            stage = {"res1": self.res1, "res2": self.res2, "res3": self.res3, "res4": self.res4}[stage_name]
            return stage[-1] if index == "last" else stage[int(index)]
        except (ValueError, KeyError, IndexError):
            raise KeyError(f"unknown block id {block_id!r}") from None


def _record(trace: dict | None, name: str, x: Tensor) -> None:
    if trace is not None:
        trace[name] = x.shape[1:]


def build_model(cfg: ModelConfig, seed: int = 0) -> SpeakerNet:
    return SpeakerNet(cfg, seed)


# ---------------------------------------------------------------------------
# closed-form parameter inventory
# ---------------------------------------------------------------------------

def layer_param_counts(cfg: ModelConfig) -> list[tuple[str, int]]:
    """Per-layer trainable parameter counts derived from the config alone.

    Attention conv/FC weights are listed separately from their BN affine
    so that the weight-only subtotal can be read off directly.
    """
    cfg.validate()
    c, f = cfg.width, cfg.n_mels
    rows = [("input_norm", 2 * f), ("conv1", 49 * c), ("bn1", 2 * c)]
    cin, bins = c, f
    att = cfg.attention
    for k, (count, stride) in enumerate(zip(cfg.blocks, STAGE_STRIDES)):
        cout = c * 2 ** k
        bins = (bins - 1) // stride + 1
        for i in range(count):
            first_in = cin if i == 0 else cout
            name = f"res{k + 1}.{i}"
            rows += [(f"{name}.conv1", 9 * first_in * cout), (f"{name}.bn1", 2 * cout),
                     (f"{name}.conv2", 9 * cout * cout), (f"{name}.bn2", 2 * cout)]
            if att.variant != "none":
                rows.append((f"{name}.att", attention_param_count(att, cout, bins)))
                if att.variant == "c2d":
                    rows.append((f"{name}.att.bn", 2 * att.c2d_channels))
            if i == 0 and (stride != 1 or first_in != cout):
                rows += [(f"{name}.short_conv", first_in * cout), (f"{name}.short_bn", 2 * cout)]
        cin = cout
    flat = c * f
    b = cfg.asp_bottleneck
    rows += [("pool.attn_in", flat * b + b), ("pool.attn_out", b * flat + flat),
             ("fc", 2 * flat * cfg.embed_dim + cfg.embed_dim)]
    return rows
