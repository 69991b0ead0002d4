"""Synthetic speaker corpus and augmentation sources for desk-scale runs.

Each speaker is a pitch-pulse source (own pitch range and spectral roll-off)
shaped by its own set of formant-like resonances.  Utterances vary the
pitch contour, the syllable rhythm and small per-syllable formant shifts,
plus a low noise floor.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len
from scipy.signal import fftconvolve

from .frontend import FeatureConfig, Waveform, log_fbanks, write_wav
from .training import AugmentPools


@dataclass(frozen=True)
class SpeakerProfile:
    f0: float                       # mean pitch, Hz
    formants: tuple[float, ...]     # resonance centres, Hz
    bandwidths: tuple[float, ...]
    gains: tuple[float, ...]        # resonance heights, log amplitude
    tilt: float                     # spectral roll-off exponent


def random_speaker(rng: np.random.Generator) -> SpeakerProfile:
    vtl = rng.uniform(0.8, 1.25)     # vocal-tract scale
    base = np.array([600.0, 1500.0, 2600.0, 3600.0, 4700.0]) * vtl
    formants = base * rng.uniform(0.85, 1.15, size=base.size)
    return SpeakerProfile(
        f0=float(rng.uniform(85.0, 260.0)),
        formants=tuple(np.sort(formants)),
        bandwidths=tuple(rng.uniform(80.0, 300.0, size=base.size)),
        gains=tuple(rng.uniform(1.0, 3.0, size=base.size)),
        tilt=float(rng.uniform(0.6, 1.6)),
    )


def _envelope(freqs: np.ndarray, spk: SpeakerProfile, shift: float) -> np.ndarray:
    """Log amplitude of the speaker's filter at ``freqs`` with formants scaled by ``shift``."""
    out = -spk.tilt * np.log1p(freqs / 300.0)
    for fc, bw, g in zip(spk.formants, spk.bandwidths, spk.gains):
        out = out + g * np.exp(-0.5 * ((freqs - fc * shift) / bw) ** 2)
    return out


def synth_utterance(spk: SpeakerProfile, seconds: float, rng: np.random.Generator,
                    sample_rate: int = 16000) -> Waveform:
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    # pitch contour: slow drift plus vibrato-like wobble
    f0 = spk.f0 * (1.0 + rng.uniform(-0.08, 0.08)
                   + 0.06 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * t + rng.uniform(0, 2 * np.pi))
                   + 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    # syllables: random durations, each with its own formant shift and loudness
    bounds = [0]
    while bounds[-1] < n:
        bounds.append(bounds[-1] + int(sample_rate * rng.uniform(0.12, 0.35)))
    bounds[-1] = n
    n_syll = len(bounds) - 1
    shifts = rng.uniform(0.92, 1.08, size=n_syll)
    loud = rng.uniform(0.4, 1.0, size=n_syll) * (rng.random(n_syll) > 0.12)
    seg_index = np.searchsorted(np.array(bounds[1:]), np.arange(n), side="right")
    # short raised-cosine ramps at syllable edges
    amp = loud[seg_index]
    ramp = int(0.02 * sample_rate)
    kernel = np.hanning(2 * ramp + 1)
    amp = fftconvolve(amp, kernel / kernel.sum(), mode="same")

    # glottal pulse train: one impulse per pitch period
    excitation = np.diff(np.floor(phase / (2 * np.pi)), prepend=0.0)
    x = np.zeros(n)
    pad = int(0.03 * sample_rate)
    for k in range(n_syll):
        lo, hi = max(bounds[k] - pad, 0), min(bounds[k + 1] + pad, n)
        seg = excitation[lo:hi]
        size = next_fast_len(seg.size, real=True)
        freqs = np.fft.rfftfreq(size, 1.0 / sample_rate)
        shaped = np.fft.irfft(np.fft.rfft(seg, size) * np.exp(_envelope(freqs, spk, shifts[k])), size)
        x[bounds[k]:bounds[k + 1]] = shaped[bounds[k] - lo: bounds[k + 1] - lo]
    x *= amp
    x += 0.02 * np.std(x) * rng.standard_normal(n)
    x *= 0.3 / max(np.abs(x).max(), 1e-9)
    return Waveform(x, sample_rate)


@dataclass
class ToyCorpus:
    speakers: list[SpeakerProfile]
    train: list[tuple[Waveform, int]]
    heldout: list[tuple[Waveform, int]]


def make_corpus(n_speakers: int = 20, utts_per_speaker: int = 50, heldout_per_speaker: int = 10,
                min_seconds: float = 3.0, max_seconds: float = 6.0, seed: int = 0,
                sample_rate: int = 16000) -> ToyCorpus:
    rng = np.random.default_rng(seed)
    speakers = [random_speaker(rng) for _ in range(n_speakers)]
    train, heldout = [], []
    for sid, spk in enumerate(speakers):
        for i in range(utts_per_speaker + heldout_per_speaker):
            wav = synth_utterance(spk, rng.uniform(min_seconds, max_seconds), rng, sample_rate)
            (train if i < utts_per_speaker else heldout).append((wav, sid))
    return ToyCorpus(speakers, train, heldout)


def make_pools(seed: int = 0, sample_rate: int = 16000, seconds: float = 3.0) -> AugmentPools:
    """Synthetic stand-ins for background-sound and impulse-response corpora."""
    rng = np.random.default_rng(seed)
    n = int(seconds * sample_rate)
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    spectrum /= np.sqrt(np.maximum(np.arange(spectrum.size), 1))
    pink = np.fft.irfft(spectrum, n)
    babble = sum(synth_utterance(random_speaker(rng), seconds, rng, sample_rate).samples for _ in range(5))
    t = np.arange(n) / sample_rate
    music = sum(np.sin(2 * np.pi * f * t) * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t))
                for f in rng.uniform(110, 880, size=4))
    noise = [("noise", Waveform(white, sample_rate)), ("noise", Waveform(pink, sample_rate)),
             ("babble", Waveform(babble, sample_rate)), ("music", Waveform(music, sample_rate))]
    impulse = []
    for rt60 in (0.2, 0.4, 0.7):
        m = int(0.5 * sample_rate)
        decay = np.exp(-6.9 * np.arange(m) / (rt60 * sample_rate))
        ir = rng.standard_normal(m) * decay * 0.3
        ir[0] = 1.0
        impulse.append(Waveform(ir, sample_rate))
    return AugmentPools(noise, impulse)


def nearest_centroid_accuracy(train_feats: list[np.ndarray], train_labels: list[int],
                              test_feats: list[np.ndarray], test_labels: list[int]) -> float:
    """Classify utterance-mean Fbank vectors by the nearest speaker centroid."""
    tr = np.stack([f.mean(axis=1) for f in train_feats])
    te = np.stack([f.mean(axis=1) for f in test_feats])
    tl, el = np.asarray(train_labels), np.asarray(test_labels)
    classes = np.unique(tl)
    centroids = np.stack([tr[tl == c].mean(axis=0) for c in classes])
    dist = ((te[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float((classes[dist.argmin(axis=1)] == el).mean())


def toy_trials(labels: list[int], n_target: int = 200, n_nontarget: int = 200,
               seed: int = 0) -> list[tuple[int, int, int]]:
    """Distinct (label, i, j) utterance pairs, i < j, drawn without replacement."""
    labels = np.asarray(labels)
    i, j = np.triu_indices(labels.size, k=1)
    same = labels[i] == labels[j]
    rng = np.random.default_rng(seed)
    out = []
    for flag, count in ((True, n_target), (False, n_nontarget)):
        pool = np.flatnonzero(same == flag)
        if pool.size < count:
            raise ValueError(f"only {pool.size} {'target' if flag else 'nontarget'} pairs available, need {count}")
        out += [(int(flag), int(i[k]), int(j[k])) for k in rng.choice(pool, count, replace=False)]
    return out


def write_corpus(corpus: ToyCorpus, out_dir: str | Path) -> tuple[Path, Path]:
    """Write WAVs plus ``train.lst`` (manifest) and ``heldout.lst`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    manifests = []
    for split, items in (("train", corpus.train), ("heldout", corpus.heldout)):
        lines = []
        for i, (wav, sid) in enumerate(items):
            path = out / "wav" / f"{split}_spk{sid:03d}_{i:05d}.wav"
            write_wav(path, wav)
            lines.append(f"{sid}\t{path.relative_to(out)}")
        manifest = out / f"{split}.lst"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifests.append(manifest)
    return manifests[0], manifests[1]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write a synthetic toy speaker corpus as WAV files.")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--speakers", type=int, default=20)
    parser.add_argument("--utts", type=int, default=50)
    parser.add_argument("--heldout", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    corpus = make_corpus(args.speakers, args.utts, args.heldout, seed=args.seed)
    train_lst, heldout_lst = write_corpus(corpus, args.out_dir)
    cfg = FeatureConfig()
    acc = nearest_centroid_accuracy([log_fbanks(w, cfg) for w, _ in corpus.train], [s for _, s in corpus.train],
                                    [log_fbanks(w, cfg) for w, _ in corpus.heldout], [s for _, s in corpus.heldout])
    print(f"wrote {train_lst} and {heldout_lst}; nearest-centroid accuracy {acc:.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
