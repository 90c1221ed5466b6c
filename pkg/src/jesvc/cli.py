"""Command-line entry point: ``jesvc <command> [options]``.

Work directory layout (``data.workdir``)::

    cache/features/<utt>.npz   vocoder features     (JES_CACHE_DIR overrides cache/)
    cache/mel/<utt>.npz        mel spectrograms
    cache/index.json           freshness stamps for idempotent extraction
    cache/errors.jsonl         per-file extraction failures
    checkpoints/ser.pt, styles.npz, references.json
    checkpoints/stargan/{latest,final}.pt, train_log.jsonl, f0_stats.json
    converted/<utt>__<target>.wav/.npz, converted/index.json
    reports/mcd_table.{json,txt}, distances.json, embeddings.csv

Exit codes: 0 success, 1 input or validation error, 2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigurationError, ConversionError, InvariantViolation, JesError, TrainingError

log = logging.getLogger("jesvc")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class UsageError(JesError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config)
    if getattr(args, "workdir", None):
        cfg.data.workdir = args.workdir
    if getattr(args, "manifest", None):
        cfg.data.manifest = args.manifest
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _manifest(cfg):
    from .data import load_manifest

    if not cfg.data.manifest:
        raise UsageError("no manifest given (use --manifest or data.manifest in the config)")
    path = Path(cfg.data.manifest)
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    return load_manifest(path)


def _feature_path(cfg, uid: str) -> Path:
    return cfg.cache_dir / "features" / f"{uid}.npz"


def _mel_path(cfg, uid: str) -> Path:
    return cfg.cache_dir / "mel" / f"{uid}.npz"


def _require(path: Path, stage: str, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found at {path}; run `jesvc {stage}` first")
    return path


def _load_features_for(cfg, entries):
    from .features import load_features

    out = {}
    for e in entries:
        p = _require(_feature_path(cfg, e.utterance_id), "extract", f"features for {e.utterance_id}")
        out[e.utterance_id] = load_features(p)
    return out


def _pool(workers: int, processes: bool = False):
    if workers <= 1:
        return None
    return ProcessPoolExecutor(workers) if processes else ThreadPoolExecutor(workers)


def _map(workers: int, fn, items, processes: bool = False):
    pool = _pool(workers, processes)
    if pool is None:
        return [fn(x) for x in items]
    with pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# synth-data


def cmd_synth_data(args) -> int:
    from .data.synthetic import generate_synthetic_corpus

    _, manifest = generate_synthetic_corpus(args.speakers, args.emotions, args.utterances, seed=args.seed or 0,
                                            out_dir=args.out)
    log.info("wrote %d utterances and %s", len(manifest), Path(args.out) / "manifest.tsv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def _stamp(path: Path, cfg) -> str:
    st = path.stat()
    h = hashlib.sha256()
    h.update(json.dumps(asdict(cfg.features), sort_keys=True).encode())
    h.update(f"{st.st_size}:{st.st_mtime_ns}".encode())
    return h.hexdigest()[:20]


def _extract_one(job):
    uid, wav_path, feat_path, mel_path, features_section = job
    from .features import analyze_waveform, compute_mel_spectrogram, read_wav, save_features, save_mel

    fs = config_mod.FeaturesSection(**features_section)
    try:
        wav, sr = read_wav(wav_path)
        feats = analyze_waveform(wav, sr, fs.frame_shift_ms, fs.backend)
        mel = compute_mel_spectrogram(wav, fs.mel_config())
        save_features(feat_path, feats)
        save_mel(mel_path, mel)
        return uid, None
    except (JesError, ValueError, OSError) as exc:
        return uid, f"{type(exc).__name__}: {exc}"


def cmd_extract(args) -> int:
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    index_path = cfg.cache_dir / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    jobs, stamps, errors, fresh_count = [], {}, [], 0
    for e in manifest:
        wav = manifest.resolve(e)
        if not wav.exists():
            errors.append({"utterance_id": e.utterance_id, "path": str(wav), "error": "file not found"})
            continue
        stamp = _stamp(wav, cfg)
        stamps[e.utterance_id] = stamp
        fresh = (index.get(e.utterance_id) == stamp and _feature_path(cfg, e.utterance_id).exists()
                 and _mel_path(cfg, e.utterance_id).exists())
        fresh_count += fresh
        if not fresh:
            jobs.append((e.utterance_id, str(wav), _feature_path(cfg, e.utterance_id),
                         _mel_path(cfg, e.utterance_id), asdict(cfg.features)))
    log.info("extract: %d of %d utterances need processing", len(jobs), len(manifest))
    for uid, err in _map(args.workers, _extract_one, jobs, processes=True):
        if err is None:
            index[uid] = stamps[uid]
        else:
            index.pop(uid, None)
            errors.append({"utterance_id": uid, "path": str(manifest.resolve(manifest[uid])), "error": err})
    _write_json(index_path, index)
    err_path = cfg.cache_dir / "errors.jsonl"
    err_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in errors))
    summary = {"total": len(manifest), "processed": len(jobs), "skipped": fresh_count, "failed": len(errors)}
    _write_json(cfg.cache_dir / "extract_summary.json", summary)
    for r in errors:
        log.error("extract failed for %s (%s): %s", r["utterance_id"], r["path"], r["error"])
    return EXIT_INPUT if errors else EXIT_OK


# ---------------------------------------------------------------------------
# train-ser


def cmd_train_ser(args) -> int:
    from .conversion import ReferenceRegistry
    from .features import load_mel
    from .ser import extract_style, save_ser, save_style_cache, train_ser

    cfg = _resolve_config(args)
    if args.steps is not None:
        cfg.ser.steps = args.steps
    manifest = _manifest(cfg)
    emotions = tuple(manifest.emotions())
    mels = {}
    for e in manifest:
        p = _require(_mel_path(cfg, e.utterance_id), "extract", f"mel features for {e.utterance_id}")
        mels[e.utterance_id] = load_mel(p)
    train_set = [(mels[e.utterance_id], emotions.index(e.emotion)) for e in manifest.select(split="train")]
    model_cfg = cfg.ser.model_config(emotions, cfg.features.n_mels)
    result = train_ser(train_set, model_cfg, cfg.ser.train_config(cfg.seed))
    ckpt = cfg.checkpoint_dir / "ser.pt"
    save_ser(result.model, ckpt, extra={"history": result.history, "best_step": result.best_step})
    styles = {uid: extract_style(m, result.model) for uid, m in sorted(mels.items())}
    save_style_cache(cfg.checkpoint_dir / "styles.npz", styles, model_cfg.digest())
    cells = {c: [e.utterance_id for e in es] for c, es in manifest.cells(split=cfg.data.reference_split).items()}
    registry = ReferenceRegistry.from_styles(styles, cells, cfg.data.reference_split)
    (cfg.checkpoint_dir / "references.json").write_text(registry.to_json() + "\n")
    log.info("SER checkpoint %s; %d style vectors; %d reference cells", ckpt, len(styles), len(registry.means))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-vc


def _training_set(cfg, manifest):
    from .ser import load_style_cache
    from .stargan.training import TrainingSet, Utterance

    _require(cfg.checkpoint_dir / "ser.pt", "train-ser", "SER checkpoint (stage I)")
    styles, _ = load_style_cache(_require(cfg.checkpoint_dir / "styles.npz", "train-ser", "style cache"))
    entries = manifest.select(split="train")
    feats = _load_features_for(cfg, entries)
    missing = [e.utterance_id for e in entries if e.utterance_id not in styles]
    if missing:
        raise TrainingError(f"style cache lacks {len(missing)} training utterances (e.g. {missing[0]}); "
                            "re-run `jesvc train-ser`")
    utts = [Utterance(e.utterance_id, e.speaker_id, e.emotion, feats[e.utterance_id].mceps,
                      np.asarray(styles[e.utterance_id], dtype=np.float32)) for e in entries]
    return TrainingSet(utts, speakers=manifest.speakers()), feats, entries


def cmd_train_vc(args) -> int:
    from .conversion import F0Registry
    from .stargan.training import train

    cfg = _resolve_config(args)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    manifest = _manifest(cfg)
    data, feats, entries = _training_set(cfg, manifest)
    out = cfg.checkpoint_dir / "stargan"
    contours: dict = {}
    for e in entries:
        contours.setdefault(e.cell, []).append(feats[e.utterance_id].f0)
    f0 = F0Registry.from_contours(contours, cfg.data.f0_stats)
    out.mkdir(parents=True, exist_ok=True)
    (out / "f0_stats.json").write_text(f0.to_json() + "\n")
    result = train(data, cfg.train.train_config(cfg.seed), cfg.gan_config(data.speakers), checkpoint_dir=out,
                   log_path=out / "train_log.jsonl", resume=args.resume)
    log.info("trained %d steps; checkpoint %s", result.step, out / "final.pt")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convert


def _load_runtime(cfg):
    from .conversion import F0Registry, ReferenceRegistry
    from .features import make_backend
    from .stargan.training import load_bundle

    ck = cfg.checkpoint_dir
    bundle = load_bundle(_require(ck / "stargan" / "final.pt", "train-vc", "generator checkpoint (stage II)"))
    refs = ReferenceRegistry.from_json(_require(ck / "references.json", "train-ser", "reference registry").read_text())
    f0 = F0Registry.from_json(_require(ck / "stargan" / "f0_stats.json", "train-vc", "F0 statistics").read_text())
    backend = make_backend(cfg.features.backend, sample_rate=cfg.features.sample_rate,
                           frame_shift_ms=cfg.features.frame_shift_ms)
    return bundle, refs, f0, backend


def _request_from(spec: dict, cfg, manifest, default_out: Path, allow_emotion_change: bool):
    from .conversion import ConversionRequest
    from .features import load_features

    src = spec.get("source")
    if not src:
        raise ConversionError("request has no source")
    src_spk, src_emo = spec.get("source_speaker"), spec.get("source_emotion")
    if manifest is not None and src in manifest:
        e = manifest[src]
        src_spk, src_emo = src_spk or e.speaker_id, src_emo or e.emotion
        fp = _feature_path(cfg, src)
        source = load_features(fp) if fp.exists() else manifest.resolve(e)
        stem = src
    else:
        source = Path(src)
        if not source.exists():
            raise ConversionError(f"source {src!r} is neither a manifest utterance nor an existing file")
        stem = source.stem
    if not src_spk or not src_emo:
        raise ConversionError(f"source speaker and emotion are required for {src!r}")
    tgt = spec.get("target_speaker")
    if not tgt:
        raise ConversionError("request has no target_speaker")
    out = spec.get("output") or str(default_out / f"{stem}__{tgt}.wav")
    return ConversionRequest(source, src_spk, src_emo, tgt, spec.get("target_emotion"), out,
                             spec.get("reference_set", cfg.data.reference_split), spec.get("id") or f"{stem}__{tgt}",
                             allow_emotion_change or bool(spec.get("allow_emotion_change")), save_features=True)


def _eval_set_requests(cfg, manifest, bundle, refs):
    specs = []
    for e in manifest.select(split="eval"):
        for tgt in bundle.speakers:
            if tgt != e.speaker_id and (tgt, e.emotion) in refs.means:
                specs.append({"source": e.utterance_id, "target_speaker": tgt})
    return specs


def cmd_convert(args) -> int:
    from .conversion import convert_utterance

    cfg = _resolve_config(args)
    manifest = _manifest(cfg) if cfg.data.manifest else None
    bundle, refs, f0, backend = _load_runtime(cfg)
    out_dir = Path(args.output_dir) if args.output_dir else cfg.converted_dir

    if args.eval_set:
        if manifest is None:
            raise UsageError("--eval-set needs a manifest")
        specs = _eval_set_requests(cfg, manifest, bundle, refs)
    elif args.batch:
        specs = []
        for n, line in enumerate(Path(args.batch).read_text().splitlines(), 1):
            if line.strip() and not line.lstrip().startswith("#"):
                try:
                    specs.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    specs.append({"id": f"line{n}", "_error": f"bad JSON on line {n}: {exc}"})
    else:
        if not args.source or not args.target_speaker:
            raise UsageError("a single conversion needs --source and --target-speaker")
        # fail fast on unknown speakers so the message lists the valid ones
        bundle.speaker_index(args.target_speaker)
        specs = [{"source": args.source, "source_speaker": args.source_speaker, "source_emotion": args.source_emotion,
                  "target_speaker": args.target_speaker, "target_emotion": args.target_emotion,
                  "output": args.output}]
    single = not (args.eval_set or args.batch)

    def run(spec):
        rid = spec.get("id") or f"{spec.get('source')}__{spec.get('target_speaker')}"
        try:
            if "_error" in spec:
                raise ConversionError(spec["_error"])
            req = _request_from(spec, cfg, manifest, out_dir, args.allow_emotion_change)
            res = convert_utterance(req, bundle, refs, f0, backend, window=cfg.train.crop)
            return {"id": req.request_id, "status": "ok", "source": str(spec["source"]),
                    "source_speaker": req.source_speaker, "emotion": req.source_emotion,
                    "target_speaker": req.target_speaker, "target_emotion": req.target_emotion or req.source_emotion,
                    "wav": res.output_path, "features": str(Path(res.output_path).with_suffix(".npz")),
                    "n_frames": res.features.n_frames}
        except InvariantViolation:
            raise
        except (JesError, ValueError, OSError) as exc:
            if single:
                raise
            log.error("conversion %s failed: %s", rid, exc)
            return {"id": rid, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    records = _map(args.workers, run, specs)
    failed = [r for r in records if r["status"] != "ok"]
    index_name = "index.json" if args.eval_set else "last_batch.json"
    _write_json(out_dir / index_name, {"records": records,
                                      "summary": {"requested": len(records), "succeeded": len(records) - len(failed),
                                                  "failed": len(failed)}})
    log.info("converted %d of %d requests", len(records) - len(failed), len(records))
    return EXIT_INPUT if failed else EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_system
    from .features import load_features

    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    conv_dir = Path(args.converted) if args.converted else cfg.converted_dir
    index = json.loads(_require(conv_dir / "index.json", "convert --eval-set", "converted evaluation set").read_text())
    eval_entries = manifest.select(split="eval")
    refs = {uid: f.mceps for uid, f in _load_features_for(cfg, eval_entries).items()}
    records = [r for r in index["records"] if r["status"] == "ok"]

    def load(r):
        return (r["source"], r["target_speaker"]), load_features(r["features"]).mceps

    converted = dict(_map(args.workers, load, records))
    table = evaluate_system(eval_entries, converted, refs, manifest.genders(), use_dtw=not args.no_dtw,
                            include_c0=args.include_c0)
    if not table.records:
        raise UsageError("no evaluable (source, target, emotion) cells")
    out = Path(args.out) if args.out else cfg.reports_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "mcd_table.json").write_text(table.to_json())
    (out / "mcd_table.txt").write_text(table.render())
    sys.stdout.write(table.render())
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    from .ser import load_style_cache
    from .style_analysis import export_embeddings, speaker_pair_distances, within_vs_cross

    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    styles, _ = load_style_cache(_require(cfg.checkpoint_dir / "styles.npz", "train-ser", "style cache"))
    split = None if args.split == "all" else args.split
    sets: dict = {}
    for e in manifest.select(split=split):
        if e.utterance_id in styles:
            sets.setdefault(e.cell, {})[e.utterance_id] = styles[e.utterance_id]
    if not sets:
        raise UsageError(f"no cached styles for split {args.split!r}")
    anchors = [args.anchor] if args.anchor else sorted({s for s, _ in sets})
    emotions = [args.emotion] if args.emotion else sorted({e for _, e in sets})
    reports = []
    for emo in emotions:
        for spk in anchors:
            if (spk, emo) not in sets:
                if args.anchor:
                    raise UsageError(f"no styles for anchor cell ({spk}, {emo})")
                continue
            reports.append(speaker_pair_distances(sets, spk, emo).to_dict())
    out = Path(args.out) if args.out else cfg.reports_dir
    _write_json(out / "distances.json", {"split": args.split, "reports": reports,
                                         "within_vs_cross": within_vs_cross(sets, emotions)})
    export_embeddings(sets, out / "embeddings.csv")
    log.info("wrote %d distance reports and %s", len(reports), out / "embeddings.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jesvc", description="Joint speaker-identity and emotional-style voice conversion")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--workdir", help="work directory (overrides data.workdir)")
        if manifest:
            sp.add_argument("--manifest", help="corpus manifest (overrides data.manifest)")
        sp.add_argument("--seed", type=int, help="global seed (overrides seed)")

    sp = sub.add_parser("synth-data", help="render the synthetic parallel corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=4)
    sp.add_argument("--emotions", type=int, default=3)
    sp.add_argument("--utterances", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("extract", help="analyze audio into the feature cache")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train-ser", help="train the emotion recognizer and cache style vectors")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train_ser)

    sp = sub.add_parser("train-vc", help="train the conditioned generator")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train_vc)

    sp = sub.add_parser("convert", help="convert utterances")
    common(sp)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--batch", help="JSON-lines file of requests")
    g.add_argument("--eval-set", action="store_true", help="convert every eval utterance to every other speaker")
    sp.add_argument("--source", help="manifest utterance id or wav path")
    sp.add_argument("--source-speaker")
    sp.add_argument("--source-emotion")
    sp.add_argument("--target-speaker")
    sp.add_argument("--target-emotion")
    sp.add_argument("--allow-emotion-change", action="store_true")
    sp.add_argument("--output", help="output wav path (single request)")
    sp.add_argument("--output-dir", help="directory for outputs (default workdir/converted)")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("evaluate", help="MCD tables over the converted evaluation set")
    common(sp)
    sp.add_argument("--converted", help="directory holding index.json (default workdir/converted)")
    sp.add_argument("--out", help="report directory (default workdir/reports)")
    sp.add_argument("--no-dtw", action="store_true")
    sp.add_argument("--include-c0", action="store_true")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="style distance reports and embedding export")
    common(sp)
    sp.add_argument("--split", default="eval", choices=["train", "eval", "reference", "all"])
    sp.add_argument("--anchor")
    sp.add_argument("--emotion")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        log.error("internal invariant violated: %s", exc)
        return EXIT_INTERNAL
    except (JesError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
