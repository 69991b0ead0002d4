"""Command-line entry points: feats, train, embed, score, eval, attmap, params.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_io
from .checkpoint import (CheckpointError, is_container, load_checkpoint, read_entries,
                         write_entries)
from .frontend import AudioError, FeatureConfig, log_fbanks, read_wav, write_matrix
from .model import SpeakerNet, layer_param_counts
from .scoring import (ScoreSet, ScoringError, as_norm, cohort_scores, eer, min_dcf, read_trials,
                      segment_utterance, trial_score, write_det_csv, write_scores)
from .training import AugmentPools, SpeakerDataset, TrainConfig, TrainingError, train

log = logging.getLogger("c2datt")

MEAN_SUFFIX = "#mean"


class UsageError(Exception):
    """Invalid input detected before any work started (exit code 2)."""


def _workers() -> int:
    raw = os.environ.get("C2DATT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"C2DATT_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _load_model(path: str) -> tuple[SpeakerNet, FeatureConfig]:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, info = load_checkpoint(path)
    return model, info.features


# ---------------------------------------------------------------------------
# feats
# ---------------------------------------------------------------------------

def cmd_feats(args) -> int:
    cfg = FeatureConfig()
    if args.config:
        cfg = config_io.feature_config(config_io.read_file(args.config))
    feats = log_fbanks(read_wav(args.wav, cfg.sample_rate), cfg)
    write_matrix(args.out, feats)
    print(f"{feats.shape[0]} x {feats.shape[1]}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _read_pool_list(path: str, with_category: bool) -> list:
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if with_category:
            category, wav = line.split("\t")
            items.append((category, read_wav(wav)))
        else:
            items.append(read_wav(line.strip()))
    return items


def cmd_train(args) -> int:
    problems: list[str] = []
    model_cfg = train_cfg = dataset = None
    feat_cfg = FeatureConfig()
    try:
        parser = config_io.read_file(args.model_config)
        model_cfg = config_io.model_config(parser)
        feat_cfg = config_io.feature_config(parser)
    except config_io.ConfigError as exc:
        problems.extend(exc.problems)
    try:
        parser = config_io.read_file(args.train_config)
        values = dict(parser.items("train")) if parser.has_section("train") else None
        if values is None:
            problems.append(f"{args.train_config}: missing [train] section")
        else:
            train_cfg = TrainConfig.from_mapping(values)
            if args.seed is not None:
                train_cfg = replace(train_cfg, seed=args.seed)
            problems.extend(f"[train] {e}" for e in train_cfg.errors())
    except config_io.ConfigError as exc:
        problems.extend(exc.problems)
    except ValueError as exc:
        problems.append(f"[train] {exc}")
    try:
        dataset = SpeakerDataset.from_manifest(args.manifest)
    except ValueError as exc:
        problems.extend(str(exc).splitlines())
    if model_cfg is not None and feat_cfg.n_mels != model_cfg.n_mels:
        problems.append(f"[features] n_mels={feat_cfg.n_mels} disagrees with [model] n_mels={model_cfg.n_mels}")
    if dataset is not None and dataset.n_speakers < 2:
        problems.append("training needs at least two speakers")
    if problems:
        raise config_io.ConfigError(problems)

    pools = None
    if args.noise_list or args.rir_list:
        pools = AugmentPools(_read_pool_list(args.noise_list, True) if args.noise_list else [],
                             _read_pool_list(args.rir_list, False) if args.rir_list else [])
    elif args.synthetic_aug:
        from .synthetic import make_pools
        pools = make_pools(seed=train_cfg.seed)

    model = SpeakerNet(model_cfg, seed=train_cfg.seed)
    result = train(model, dataset, train_cfg, feat_cfg, pools, args.out_dir,
                   on_step=lambda row: log.info("step %(step)d epoch %(epoch)d lr %(lr).6g "
                                                "loss %(loss).4f acc %(acc).3f", row))
    print(f"trained {len(result.history)} steps; final epoch accuracy {result.final_accuracy:.4f}")
    print(f"checkpoints: {', '.join(str(p) for p in result.checkpoints)}")
    return 0


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------

def embed_utterance(model: SpeakerNet, feat_cfg: FeatureConfig, path: str) -> np.ndarray:
    """Segment embeddings of one WAV file, shape (n_segments, E)."""
    wav = read_wav(path, feat_cfg.sample_rate)
    return np.stack([model.embed(log_fbanks(seg, feat_cfg)) for seg in segment_utterance(wav)])


def embed_many(model: SpeakerNet, feat_cfg: FeatureConfig, paths: list[str]) -> dict[str, np.ndarray]:
    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        results = list(pool.map(lambda p: embed_utterance(model, feat_cfg, p), paths))
    return dict(zip(paths, results))


def store_embeddings(path: str, embs: dict[str, np.ndarray]) -> None:
    entries = []
    for utt, segs in embs.items():
        entries += [(f"{utt}#seg{i}", seg) for i, seg in enumerate(segs)]
        entries.append((utt + MEAN_SUFFIX, segs.mean(axis=0)))
    dim = next(iter(embs.values())).shape[1] if embs else 0
    write_entries(path, entries, config_io.dump_sections({"store": {"kind": "embeddings", "embed_dim": dim}}))


def load_embeddings(path: str) -> dict[str, np.ndarray]:
    """Embedding store -> {utterance: (n_segments, E) segment embeddings}."""
    _, entries = read_entries(path)
    segs: dict[str, list[tuple[int, np.ndarray]]] = {}
    for name, arr in entries.items():
        utt, _, tag = name.rpartition("#")
        if tag.startswith("seg"):
            segs.setdefault(utt, []).append((int(tag[3:]), arr))
    return {utt: np.stack([a for _, a in sorted(items, key=lambda p: p[0])]) for utt, items in segs.items()}


def _list_file(path: str) -> list[str]:
    if not Path(path).is_file():
        raise UsageError(f"list file not found: {path}")
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_embed(args) -> int:
    model, feat_cfg = _load_model(args.ckpt)
    paths = [args.wav] if args.wav else _list_file(args.list)
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise UsageError("missing utterances:\n  " + "\n  ".join(missing))
    embs = embed_many(model, feat_cfg, paths)
    store_embeddings(args.out, embs)
    n_segs = sum(len(v) for v in embs.values())
    print(f"embedded {len(paths)} utterance(s), {n_segs} segment(s), dim {model.config.embed_dim}")
    return 0


# ---------------------------------------------------------------------------
# score / eval
# ---------------------------------------------------------------------------

def _resolve(model: SpeakerNet | None, feat_cfg: FeatureConfig | None, utts: list[str],
             store: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    todo = [u for u in dict.fromkeys(utts) if u not in store]
    missing = [u for u in todo if model is None or not Path(u).is_file()]
    if missing:
        raise UsageError("missing utterances:\n  " + "\n  ".join(missing))
    out = {u: store[u] for u in utts if u in store}
    if todo:
        out.update(embed_many(model, feat_cfg, todo))
    return out


def _cohort(args, model, feat_cfg) -> np.ndarray:
    if is_container(args.cohort):
        store = load_embeddings(args.cohort)
        embs = list(store.values())
    else:
        paths = _list_file(args.cohort)
        embs = list(_resolve(model, feat_cfg, paths, {}).values())
    if len(embs) < args.topk:
        raise UsageError(f"cohort has {len(embs)} utterances, fewer than --topk {args.topk}")
    return np.stack([e.mean(axis=0) for e in embs])


def score_trials(args) -> ScoreSet:
    if not Path(args.trials).is_file():
        raise UsageError(f"trial list not found: {args.trials}")
    trials = read_trials(args.trials)
    model = feat_cfg = None
    if args.ckpt:
        model, feat_cfg = _load_model(args.ckpt)
    store = load_embeddings(args.embeddings) if args.embeddings else {}
    utts = [u for t in trials for u in (t.enroll, t.test)]
    embs = _resolve(model, feat_cfg, utts, store)
    cohort = None
    if not args.no_asnorm:
        if not args.cohort:
            raise UsageError("--cohort is required unless --no-asnorm is given")
        cohort = _cohort(args, model, feat_cfg)
        cohort_cache = {u: cohort_scores(embs[u], cohort) for u in dict.fromkeys(utts)}
    scores = ScoreSet()
    for t in trials:
        raw = trial_score(embs[t.enroll], embs[t.test])
        norm = raw if cohort is None else as_norm(raw, cohort_cache[t.enroll], cohort_cache[t.test], args.topk)
        scores.add(t, raw, norm)
    return scores


def cmd_score(args) -> int:
    scores = score_trials(args)
    write_scores(args.out, scores)
    print(f"scored {len(scores.trials)} trials -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    labels = {t.label for t in read_trials(args.trials)} if Path(args.trials).is_file() else {0, 1}
    if len(labels) < 2:
        raise UsageError("trial list contains a single class; EER and minDCF need both")
    scores = score_trials(args)
    write_scores(args.out, scores)
    s = scores.scores(normalized=not args.no_asnorm)
    e = eer(s, scores.labels)
    d = min_dcf(s, scores.labels, p_target=0.01, c_miss=1.0, c_fa=1.0)
    if args.det:
        write_det_csv(args.det, s, scores.labels)
    kind = "raw" if args.no_asnorm else "as-norm"
    print(f"scores: {kind}")
    print(f"EER: {100 * e:.2f}%")
    print(f"minDCF(p_target=0.01, c_miss=1, c_fa=1): {d:.4f}")
    return 0


# ---------------------------------------------------------------------------
# attmap
# ---------------------------------------------------------------------------

def attention_map(model: SpeakerNet, feats: np.ndarray, block_id: str) -> np.ndarray:
    """Attention weights of one block as a (frequency, channel) matrix.

    SE and fwSE weights are broadcast over the axis they ignore.
    """
    block = model.block(block_id)
    if block.att is None:
        raise UsageError("model has no attention modules")
    model.embed(feats)
    w = block.last_weights.data[0]
    _, c, f, _ = block.last_shape
    variant = model.config.attention.variant
    if variant == "c2d":
        return w.T.copy()
    if variant == "se":
        return np.broadcast_to(w[None, :], (f, c)).copy()
    return np.broadcast_to(w[:, None], (f, c)).copy()


def write_map_csv(path: str, matrix: np.ndarray) -> None:
    f, c = matrix.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("freq\\channel," + ",".join(f"c{j}" for j in range(c)) + "\n")
        for i in range(f):
            fh.write(f"f{i}," + ",".join(f"{v:.6g}" for v in matrix[i]) + "\n")


def write_pgm(path: str, matrix: np.ndarray) -> None:
    """8-bit grayscale PGM, low frequencies at the bottom like a spectrogram."""
    img = np.clip(np.round(matrix[::-1] * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_attmap(args) -> int:
    model, feat_cfg = _load_model(args.ckpt)
    try:
        model.block(args.block)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    feats = log_fbanks(read_wav(args.wav, feat_cfg.sample_rate), feat_cfg)
    matrix = attention_map(model, feats, args.block)
    write_map_csv(args.out, matrix)
    if args.pgm:
        write_pgm(args.pgm, matrix)
    if args.bin:
        write_matrix(args.bin, matrix.T)
    print(f"attention map {matrix.shape[0]} (freq) x {matrix.shape[1]} (channel) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# params
# ---------------------------------------------------------------------------

def params_report(rows: list[tuple[str, int]]) -> list[str]:
    att = sum(n for name, n in rows if name.endswith(".att"))
    att_bn = sum(n for name, n in rows if name.endswith(".att.bn"))
    total = sum(n for _, n in rows)
    lines = [f"{name:<28s}{n:>12d}" for name, n in rows]
    per_block = sorted({n for name, n in rows if name.endswith(".att")})
    lines += [
        "-" * 40,
        f"{'attention weights per block':<28s}{','.join(map(str, per_block)) or '0':>12s}",
        f"{'attention weights':<28s}{att:>12d}",
        f"{'attention BN affine':<28s}{att_bn:>12d}",
        f"{'total':<28s}{total:>12d}  ({total / 1e6:.2f}M)",
    ]
    return lines


def cmd_params(args) -> int:
    cfg = config_io.model_config(config_io.read_file(args.model_config))
    for line in params_report(layer_param_counts(cfg)):
        print(line)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2datt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("feats", help="extract log mel-filterbank features")
    p.add_argument("--wav", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_feats)

    p = sub.add_parser("train", help="train an embedding network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-list", help="lines 'category<TAB>wav' (noise, babble or music)")
    p.add_argument("--rir-list", help="lines with one impulse-response wav each")
    p.add_argument("--synthetic-aug", action="store_true", help="use generated noise and reverb sources")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="segment and embed utterances")
    p.add_argument("--ckpt", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--wav")
    g.add_argument("--list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    for name, func in (("score", cmd_score), ("eval", cmd_eval)):
        p = sub.add_parser(name, help="score a trial list" + (" and report EER/minDCF" if name == "eval" else ""))
        p.add_argument("--ckpt")
        p.add_argument("--trials", required=True)
        p.add_argument("--cohort")
        p.add_argument("--embeddings", help="embedding store from 'embed' to reuse")
        p.add_argument("--topk", type=int, default=1000)
        p.add_argument("--no-asnorm", action="store_true")
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--det", help="write (threshold, p_miss, p_fa) CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("attmap", help="export one block's attention weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--block", default="res2.last")
    p.add_argument("--out", required=True)
    p.add_argument("--pgm")
    p.add_argument("--bin", help="float32 matrix with (channel, frequency) header")
    p.set_defaults(func=cmd_attmap)

    p = sub.add_parser("params", help="count trainable parameters")
    p.add_argument("--model-config", required=True)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command in ("score", "eval") and not args.ckpt and not args.embeddings:
        parser.error("either --ckpt or --embeddings is required")
    try:
        return args.func(args)
    except (UsageError, config_io.ConfigError, AudioError, CheckpointError, ScoringError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
