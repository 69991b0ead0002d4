"""AAM-softmax training: loss, schedule, cropping, augmentation and the loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .autograd import functional as F
from .autograd.nn import Module, Parameter
from .autograd.optim import Adam
from .autograd.tensor import Tensor
from .checkpoint import save_checkpoint
from .frontend import AudioError, FeatureConfig, Waveform, log_fbanks, read_wav
from .model import SpeakerNet

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "lr", "loss", "acc")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    scale: float = 30.0
    lr_peak: float = 0.001
    warmup_steps: int = 20000
    decay_epochs: tuple[int, ...] = (20, 32)
    decay_ratio: float = 0.1
    total_epochs: int = 40
    weight_decay: float = 2e-5
    crop_seconds: float = 2.0
    batch_size: int = 64
    seed: int = 0
    p_noise: float = 0.6
    p_reverb: float = 0.5
    snr_noise: tuple[float, float] = (0.0, 15.0)
    snr_music: tuple[float, float] = (5.0, 15.0)

    def errors(self) -> list[str]:
        errs = []
        if not 0.0 <= self.margin < math.pi / 2:
            errs.append("margin must lie in [0, pi/2)")
        if self.scale <= 0:
            errs.append("scale must be positive")
        if self.lr_peak < 0:
            errs.append("lr_peak must be non-negative")
        if self.warmup_steps < 1:
            errs.append("warmup_steps must be >= 1")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            errs.append("decay_epochs must be strictly increasing")
        if any(e >= self.total_epochs for e in self.decay_epochs):
            errs.append("decay_epochs must be smaller than total_epochs")
        if self.total_epochs < 1:
            errs.append("total_epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.crop_seconds <= 0:
            errs.append("crop_seconds must be positive")
        for name in ("p_noise", "p_reverb"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in [0, 1]")
        for name in ("snr_noise", "snr_music"):
            lo, hi = getattr(self, name)
            if lo > hi:
                errs.append(f"{name} range is inverted")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(kinds))
        if unknown:
            raise ValueError(f"unknown train keys: {', '.join(unknown)}")
        out = {}
        for key, raw in values.items():
            default = kinds[key].default
            if isinstance(default, tuple):
                items = [s for s in str(raw).replace(",", " ").split() if s]
                cast = int if key == "decay_epochs" else float
                out[key] = tuple(cast(s) for s in items)
            elif isinstance(default, int):
                out[key] = int(raw)
            else:
                out[key] = float(raw)
        return cls(**out)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# loss and schedule
# ---------------------------------------------------------------------------

SIN_FLOOR = 1e-12


def aam_logits(embeddings: Tensor, weights: Tensor, labels: np.ndarray, margin: float,
               scale: float) -> tuple[Tensor, np.ndarray]:
    """Scaled cosine logits with the angular margin added to each target class.

    Returns the logits and the raw cosine matrix (for accuracy).
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = weights.shape[0]
    if labels.ndim != 1 or labels.shape[0] != embeddings.shape[0]:
        raise ValueError("need one label per embedding")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    cos = F.l2_normalize(embeddings, axis=1) @ F.l2_normalize(weights, axis=1).T
    cos = cos.clamp(-1.0, 1.0)
    sin = (1.0 - cos * cos).clamp_min(SIN_FLOOR).sqrt()
    phi = cos * math.cos(margin) - sin * math.sin(margin)
    # past theta = pi - m the margin would wrap around; fall back to a linear penalty
    phi = F.where(cos.data > math.cos(math.pi - margin), phi, cos - margin * math.sin(margin))
    target = F.one_hot(labels, k, bool)
    return F.where(target, phi, cos) * scale, cos.data


def aam_softmax_loss(embeddings: Tensor, weights: Tensor, labels: np.ndarray,
                     margin: float = 0.2, scale: float = 30.0) -> Tensor:
    logits, _ = aam_logits(embeddings, weights, labels, margin, scale)
    return F.cross_entropy(logits, labels)


class AAMHead(Module):
    def __init__(self, embed_dim: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        std = math.sqrt(2.0 / (embed_dim + n_classes))
        self.weight = Parameter(rng.standard_normal((n_classes, embed_dim)) * std)


def lr_at(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up over ``warmup_steps``, then step decay at each of ``decay_epochs``.

    ``epoch`` counts completed epochs (0 during the first), so a decay epoch
    of 20 takes effect once 20 epochs have finished.
    """
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    passed = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr_peak * cfg.decay_ratio ** passed


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------

def wrap_pad(samples: np.ndarray, length: int) -> np.ndarray:
    """Repeat ``samples`` cyclically to exactly ``length`` values."""
    if samples.size == 0:
        raise AudioError("cannot pad an empty waveform")
    return np.resize(samples, length)


def crop_segment(wav: Waveform, seconds: float, rng: np.random.Generator) -> Waveform:
    if len(wav) == 0:
        raise AudioError("cannot crop an empty waveform")
    n = int(round(seconds * wav.sample_rate))
    if len(wav) <= n:
        return Waveform(wrap_pad(wav.samples, n), wav.sample_rate)
    start = int(rng.integers(0, len(wav) - n + 1))
    return Waveform(wav.samples[start:start + n], wav.sample_rate)


@dataclass
class AugmentPools:
    """Background sounds tagged by category and room impulse responses."""
    noise: list[tuple[str, Waveform]] = field(default_factory=list)
    impulse: list[Waveform] = field(default_factory=list)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def augment(wav: Waveform, pools: AugmentPools | None, rng: np.random.Generator,
            cfg: TrainConfig = TrainConfig()) -> Waveform:
    """Optionally reverberate, then optionally add background sound at a random SNR."""
    if pools is None or (not pools.noise and not pools.impulse):
        return wav
    x = wav.samples
    if pools.impulse and rng.random() < cfg.p_reverb:
        ir = pools.impulse[int(rng.integers(len(pools.impulse)))]
        if len(ir) == 0 or ir.sample_rate != wav.sample_rate or not np.any(ir.samples):
            raise AudioError("impulse response is empty, silent or at the wrong sample rate")
        target = _rms(x)
        y = fftconvolve(x, ir.samples)[: len(x)]
        level = _rms(y)
        x = y * (target / level) if level > 0 else y
    if pools.noise and rng.random() < cfg.p_noise:
        category, clip = pools.noise[int(rng.integers(len(pools.noise)))]
        if len(clip) == 0 or clip.sample_rate != wav.sample_rate:
            raise AudioError("noise clip is empty or at the wrong sample rate")
        lo, hi = cfg.snr_music if category == "music" else cfg.snr_noise
        snr = float(rng.uniform(lo, hi))
        noise = crop_segment(clip, len(x) / wav.sample_rate, rng).samples[: len(x)]
        p_noise = float(np.mean(noise * noise))
        if p_noise <= 0:
            raise AudioError("noise clip is silent")
        p_speech = float(np.mean(x * x))
        x = x + noise * math.sqrt(p_speech / (p_noise * 10.0 ** (snr / 10.0)))
    return Waveform(x, wav.sample_rate)


class SpeakerDataset:
    """Utterances with dense integer speaker labels; audio is loaded lazily and cached."""

    def __init__(self, utterances: Sequence[tuple[str | Path | Waveform, int]], n_speakers: int | None = None):
        self.utterances = list(utterances)
        labels = [int(s) for _, s in self.utterances]
        self.n_speakers = n_speakers if n_speakers is not None else (max(labels) + 1 if labels else 0)
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        self._cache: dict[int, Waveform] = {}

    def problems(self) -> list[str]:
        labels = {int(s) for _, s in self.utterances}
        errs = []
        if not self.utterances:
            errs.append("dataset is empty")
        bad = sorted(s for s in labels if not 0 <= s < self.n_speakers)
        if bad:
            errs.append(f"speaker ids out of range [0, {self.n_speakers}): {bad[:10]}")
        missing = sorted(set(range(self.n_speakers)) - labels)
        if missing:
            errs.append(f"speaker ids are not dense; no utterances for {missing[:10]}")
        return errs

    @classmethod
    def from_manifest(cls, path: str | Path) -> "SpeakerDataset":
        path = Path(path)
        if not path.is_file():
            raise ValueError(f"manifest not found: {path}")
        rows, errs = [], []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                errs.append(f"{path}:{lineno}: expected 'speaker_id<TAB>wav_path'")
                continue
            try:
                spk = int(parts[0])
            except ValueError:
                errs.append(f"{path}:{lineno}: speaker id {parts[0]!r} is not an integer")
                continue
            wav_path = Path(parts[1].strip())
            if not wav_path.is_absolute():
                wav_path = path.parent / wav_path
            if not wav_path.is_file():
                errs.append(f"{path}:{lineno}: audio file not found: {wav_path}")
            rows.append((wav_path, spk))
        try:
            dataset = cls(rows)
        except ValueError as exc:
            errs.append(str(exc))
            dataset = None
        if errs:
            raise ValueError("\n".join(errs))
        return dataset

    def __len__(self) -> int:
        return len(self.utterances)

    def label(self, i: int) -> int:
        return int(self.utterances[i][1])

    def load(self, i: int) -> Waveform:
        wav = self._cache.get(i)
        if wav is None:
            src = self.utterances[i][0]
            wav = src if isinstance(src, Waveform) else read_wav(src)
            self._cache[i] = wav
        return wav


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    head: AAMHead
    final_accuracy: float
    checkpoints: list[Path] = field(default_factory=list)


def prepare_batch(dataset: SpeakerDataset, indices: Sequence[int], cfg: TrainConfig,
                  feat_cfg: FeatureConfig, pools: AugmentPools | None,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    feats = []
    for i in indices:
        wav = crop_segment(dataset.load(i), cfg.crop_seconds, rng)
        wav = augment(wav, pools, rng, cfg)
        feats.append(log_fbanks(wav, feat_cfg))
    return np.stack(feats), np.array([dataset.label(i) for i in indices])


def train(model: SpeakerNet, dataset: SpeakerDataset, cfg: TrainConfig,
          feat_cfg: FeatureConfig = FeatureConfig(), pools: AugmentPools | None = None,
          out_dir: str | Path | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the full schedule; write metrics.csv and per-epoch checkpoints to ``out_dir``.

    The reported ``final_accuracy`` is the margin-free training accuracy over
    the last epoch.
    """
    cfg.validate()
    if dataset.n_speakers < 2:
        raise TrainingError("training needs at least two speakers")
    rng = np.random.default_rng(cfg.seed)
    head = AAMHead(model.config.embed_dim, dataset.n_speakers, rng)
    params = model.parameters() + head.parameters()
    opt = Adam(params, weight_decay=cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    writer = metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(metrics_file, fieldnames=METRIC_FIELDS)
        writer.writeheader()

    history: list[dict] = []
    checkpoints: list[Path] = []
    step = 0
    epoch_acc = 0.0
    model.train()
    try:
        for epoch in range(cfg.total_epochs):
            order = rng.permutation(len(dataset))
            correct = seen = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                feats, labels = prepare_batch(dataset, idx, cfg, feat_cfg, pools, rng)
                emb = model(Tensor(feats))
                logits, cos = aam_logits(emb, head.weight, labels, cfg.margin, cfg.scale)
                loss = F.cross_entropy(logits, labels)
                if not np.isfinite(loss.data).all():
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
                opt.zero_grad()
                loss.backward()
                lr = lr_at(step, epoch, cfg)
                opt.step(lr)
                hits = int((cos.argmax(axis=1) == labels).sum())
                correct += hits
                seen += len(labels)
                row = {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.data),
                       "acc": hits / len(labels)}
                history.append(row)
                if writer is not None:
                    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
                    metrics_file.flush()
                if on_step is not None:
                    on_step(row)
                step += 1
            epoch_acc = correct / max(seen, 1)
            log.info("epoch %d done: step=%d acc=%.4f", epoch, step, epoch_acc)
            if out is not None:
                path = out / f"epoch_{epoch + 1:03d}.c2da"
                save_checkpoint(model, path, feat_cfg, step=step, epoch=epoch + 1)
                checkpoints.append(path)
    except FloatingPointError as exc:
        raise TrainingError(f"numerical failure at step {step} (epoch {epoch}): {exc}") from exc
    finally:
        if metrics_file is not None:
            metrics_file.close()
        model.eval()
    return TrainResult(history, head, epoch_acc, checkpoints)
