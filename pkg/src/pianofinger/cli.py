"""Command line entry points.

Every subcommand writes its outputs atomically and prints a one-line JSON
summary on stdout. Exit status: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import (
    DEFAULT_ONSET_THRESHOLD,
    DEFAULT_WINDOW_S,
    initial_offset,
    parse_wav,
    search_offset,
)
from .errors import PianoFingerError
from .keyboard import (
    KeyboardGeometry,
    detect_keyboard,
    load_calibration,
    read_pgm,
)
from .midi_io import parse_smf
from .pose import normalize_stream, parse_pose_stream
from .press import (
    DEFAULT_GAMMA,
    DEFAULT_MAX_SIGMAS,
    DEFAULT_Y_GATE,
    dump_dataset,
    evaluate_extraction,
    extract_piece,
    finger_label,
    match_gold,
    parse_gold_tsv,
    result_from_json,
)
from .simulator import (
    SimConfig,
    default_geometry,
    generate_piece,
    gold_tsv,
    manifest,
    render_audio,
    render_pose_stream,
)
from .tagger import (
    DEFAULT_ALPHA,
    DEFAULT_CLAMP,
    DEFAULT_LAMBDA,
    HandPiece,
    corpus_match_rate,
    dump_corpus,
    dump_models,
    finetune_hmm,
    load_models,
    match_rate,
    parse_corpus,
    pieces_from_extraction,
    train_hmm,
    viterbi_decode,
)

log = logging.getLogger("pianofinger")


class DataError(PianoFingerError):
    pass


def write_atomic(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError("must be in [0, 1]")
    return v


def _gamma(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("gamma must be in (0, 1]")
    return v


def _threads(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------

def _load_inputs(args):
    notes = parse_smf(Path(args.midi).read_bytes())
    stream = normalize_stream(parse_pose_stream(Path(args.poses).read_text()))
    geometry = load_calibration(args.geometry)
    clip = parse_wav(Path(args.wav).read_bytes()) if args.wav else None
    return notes, stream, geometry, clip


def _align(args, notes, stream, geometry, clip):
    start = initial_offset(clip, notes.notes, args.onset_threshold)
    return search_offset(notes.notes, stream, geometry, start, args.window, args.gamma,
                         args.y_gate, args.max_sigmas, args.threads)


def _load_corpus(args) -> list[HandPiece]:
    pieces = []
    for path in args.corpus or ():
        pieces += parse_corpus(Path(path).read_text())
    for path in getattr(args, "dataset", None) or ():
        result = result_from_json(json.loads(Path(path).read_text()))
        pieces += pieces_from_extraction(result, Path(path).stem)
    if not pieces:
        raise DataError("no corpus pieces given (use --corpus and/or --dataset)")
    return pieces


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> dict:
    if args.frames:
        geometry = detect_keyboard([read_pgm(p) for p in args.frames], args.black_width_ratio,
                                   args.black_height_ratio, args.sigma_scale)
    elif args.band:
        if len(args.band) != 4 or not args.frame_size or len(args.frame_size) != 2:
            raise DataError("--band needs x_left,x_right,y_top,y_bottom and --frame-size W,H")
        geometry = KeyboardGeometry.from_band(*args.band, *args.frame_size,
                                              args.black_width_ratio, args.black_height_ratio,
                                              args.sigma_scale)
    else:
        raise DataError("calibrate needs --frames or --band")
    write_atomic(args.out, json.dumps(geometry.to_calibration(), indent=1) + "\n")
    return {"out": str(args.out), "band": geometry.to_calibration()["band"],
            "white_key_width": geometry.white_width}


def cmd_align(args) -> dict:
    notes, stream, geometry, clip = _load_inputs(args)
    report = _align(args, notes, stream, geometry, clip)
    out = Path(args.out)
    write_atomic(out, report.to_json())
    write_atomic(_sidecar(out, ".csv"), report.to_csv())
    return {"out": str(out), "initial_offset_s": report.initial_offset_s,
            "best_offset_s": report.best_offset_s, "best_log_confidence": report.best_score}


def _annotations(result, stream, geometry) -> str:
    """Per-frame overlay data: which notes sound and which finger plays them."""
    frames = []
    for fr in stream.frames:
        t = fr.time_s - result.offset_s
        playing = [
            {"pitch": e.note.pitch, "key_index": e.note.key_index,
             "key_x": geometry.key(e.note.key_index).x_center,
             "finger": finger_label(e.best), "confidence": e.confidence}
            for e in result.events if e.note.onset_s <= t < e.note.offset_s and not e.no_pose
        ]
        frames.append({"frame": fr.frame_index, "time_s": fr.time_s, "notes": playing})
    return json.dumps({"fps": stream.fps, "frames": frames}) + "\n"


def cmd_extract(args) -> dict:
    notes, stream, geometry, clip = _load_inputs(args)
    out = Path(args.out)
    summary = {"out": str(out)}
    if args.offset is not None:
        offset = args.offset
    else:
        report = _align(args, notes, stream, geometry, clip)
        offset = report.best_offset_s
        write_atomic(_sidecar(out, ".alignment.json"), report.to_json())
        write_atomic(_sidecar(out, ".alignment.csv"), report.to_csv())
        summary["alignment"] = str(_sidecar(out, ".alignment.json"))
    result = extract_piece(notes.notes, stream, geometry, offset, args.gamma, args.y_gate,
                           args.max_sigmas, args.exclusive, args.piece_id or Path(args.midi).stem)
    write_atomic(out, dump_dataset(result))
    if args.annotations:
        write_atomic(args.annotations, _annotations(result, stream, geometry))
    summary.update({"n_notes": len(result), "offset_s": offset,
                    "log_confidence": result.log_confidence,
                    "n_no_pose": sum(e.no_pose for e in result.events)})
    return summary


def cmd_eval_extraction(args) -> dict:
    result = result_from_json(json.loads(Path(args.dataset).read_text()))
    gold = parse_gold_tsv(Path(args.gold).read_text())
    labels = match_gold([e.note for e in result.events], gold, args.match_tolerance)
    report = evaluate_extraction(result, labels, args.thresholds)
    out = Path(args.out) if args.out else None
    table = [{"threshold": r.threshold, "precision": r.precision, "recall": r.recall,
              "f1": r.f1} for r in report.rows]
    if out:
        write_atomic(out, json.dumps(report.to_dict(), indent=1) + "\n")
        lines = ["threshold,kept,correct,precision,recall,f1"]
        lines += [f"{p.threshold:.6f},{p.kept},{p.correct},{p.precision:.6f},{p.recall:.6f},"
                  f"{p.f1:.6f}" for p in report.curve]
        write_atomic(args.curve or _sidecar(out, ".curve.csv"), "\n".join(lines) + "\n")
    return {"out": str(out) if out else None, "n_total": report.n_total,
            "n_no_pose": report.n_no_pose, "n_unlabeled": report.n_unlabeled,
            "table": [{k: (None if isinstance(v, float) and np.isnan(v) else v)
                       for k, v in row.items()} for row in table]}


def cmd_train(args) -> dict:
    corpus = _load_corpus(args)
    models = {h: train_hmm(corpus, args.alpha, args.clamp, hand=h)
              for h in sorted({p.hand for p in corpus})}
    write_atomic(args.out, dump_models(models))
    return {"out": str(args.out), "hands": sorted(models), "n_pieces": len(corpus),
            "n_notes": sum(len(p) for p in corpus)}


def cmd_finetune(args) -> dict:
    base = load_models(Path(args.model).read_text())
    corpus = _load_corpus(args)
    models = dict(base)
    for hand in sorted({p.hand for p in corpus}):
        pieces = [p for p in corpus if p.hand == hand]
        if hand in base:
            models[hand] = finetune_hmm(base[hand], pieces, args.lam)
        else:
            models[hand] = train_hmm(pieces, hand=hand)
    write_atomic(args.out, dump_models(models))
    return {"out": str(args.out), "hands": sorted(models), "lambda": args.lam}


def _model_for(models, hand):
    if hand not in models:
        raise DataError(f"model file has no {hand}-hand model")
    return models[hand]


def cmd_predict(args) -> dict:
    models = load_models(Path(args.model).read_text())
    corpus = _load_corpus(args)
    out = []
    for p in corpus:
        pred = viterbi_decode(_model_for(models, p.hand), p.notes)
        out.append(HandPiece(p.hand, p.notes, [pred], p.piece_id, p.onsets, p.offsets))
    write_atomic(args.out, dump_corpus(out))
    return {"out": str(args.out), "n_pieces": len(out), "n_notes": sum(len(p) for p in out)}


def cmd_eval_tagger(args) -> dict:
    models = load_models(Path(args.model).read_text())
    corpus = [p for p in _load_corpus(args) if p.labels]
    if not corpus:
        raise DataError("corpus has no gold labels")
    per_piece = []
    for p in corpus:
        pred = viterbi_decode(_model_for(models, p.hand), p.notes)
        per_piece.append({"piece_id": p.piece_id, "hand": p.hand, "n_notes": len(p),
                          "match_rate": match_rate(pred, p)})
    overall = corpus_match_rate(models, corpus)
    summary = {"match_rate": overall, "n_pieces": len(corpus),
               "n_notes": sum(len(p) for p in corpus)}
    if args.out:
        write_atomic(args.out, json.dumps({**summary, "pieces": per_piece}, indent=1) + "\n")
        summary["out"] = str(args.out)
    return summary


def cmd_simulate(args) -> dict:
    cfg = SimConfig(seed=args.seed, n_notes=args.notes, fps=args.fps,
                    keypoint_noise=args.noise, drop_prob=args.drop,
                    true_offset_s=args.offset, hand_span_keys=args.hand_span,
                    lead_in_s=max(1.0, abs(args.offset) + 0.5))
    geometry = load_calibration(args.geometry) if args.geometry else default_geometry()
    piece = generate_piece(cfg, geometry)
    stream = render_pose_stream(piece, geometry)
    out = Path(args.out)
    from .alignment import write_wav
    from .midi_io import write_smf
    from .pose import dump_pose_stream

    files = {"midi": "piece.mid", "poses": "poses.jsonl", "wav": "audio.wav",
             "gold": "gold.tsv", "corpus": "corpus.tsv", "geometry": "geometry.json"}
    write_atomic(out / files["midi"], write_smf(piece.notes))
    write_atomic(out / files["poses"], dump_pose_stream(stream))
    write_atomic(out / files["wav"],
                 write_wav(render_audio(piece, len(stream.frames) / cfg.fps)))
    write_atomic(out / files["gold"], gold_tsv(piece))
    write_atomic(out / files["corpus"], dump_corpus(piece.hand_pieces(f"sim{args.seed}")))
    write_atomic(out / files["geometry"], json.dumps(geometry.to_calibration(), indent=1) + "\n")
    write_atomic(out / "manifest.json", json.dumps(manifest(piece, geometry, files), indent=1)
                 + "\n")
    return {"out": str(out), "n_notes": len(piece.notes), "n_frames": len(stream.frames),
            "files": sorted(files.values()) + ["manifest.json"]}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_inference_flags(p):
    p.add_argument("--midi", required=True)
    p.add_argument("--poses", required=True, help="pose stream (JSON lines)")
    p.add_argument("--geometry", required=True, help="calibration JSON")
    p.add_argument("--wav", help="audio track for the initial offset (optional)")
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW_S,
                   help="offset search half-width in seconds (default 1.0)")
    p.add_argument("--onset-threshold", type=_positive, default=DEFAULT_ONSET_THRESHOLD)
    p.add_argument("--gamma", type=_gamma, default=DEFAULT_GAMMA,
                   help="per-frame weight decay (default 0.5)")
    p.add_argument("--y-gate", type=float, default=DEFAULT_Y_GATE)
    p.add_argument("--max-sigmas", type=_positive, default=DEFAULT_MAX_SIGMAS)


def _add_corpus_flags(p):
    p.add_argument("--corpus", nargs="+", help="TSV corpus file(s)")
    p.add_argument("--dataset", nargs="+", help="extraction dataset JSON file(s), silver labels")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_threads, default=1, help="worker threads (default 1)")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    parser = argparse.ArgumentParser(prog="pianofinger", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="keyboard geometry from frames or a band")
    p.add_argument("--frames", nargs="+", help="grayscale PGM frames")
    p.add_argument("--band", type=_floats, help="x_left,x_right,y_top,y_bottom in pixels")
    p.add_argument("--frame-size", type=_floats, help="W,H in pixels (with --band)")
    p.add_argument("--black-width-ratio", type=_unit_interval, default=0.6)
    p.add_argument("--black-height-ratio", type=_unit_interval, default=0.6)
    p.add_argument("--sigma-scale", type=_positive, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("align", parents=[common], help="find the MIDI/video offset")
    _add_inference_flags(p)
    p.add_argument("--out", required=True, help="alignment report JSON (CSV written alongside)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("extract", parents=[common], help="per-note finger distributions")
    _add_inference_flags(p)
    p.add_argument("--offset", type=float, help="use this offset instead of searching")
    p.add_argument("--exclusive", action="store_true",
                   help="stop simultaneous notes from sharing a finger")
    p.add_argument("--piece-id")
    p.add_argument("--annotations", help="write per-frame overlay annotations JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval-extraction", parents=[common], help="precision/recall vs gold")
    p.add_argument("--dataset", required=True)
    p.add_argument("--gold", required=True, help="TSV onset_s, pitch, finger label")
    p.add_argument("--thresholds", type=_floats, default=[0.9, 0.5, 0.0])
    p.add_argument("--match-tolerance", type=_positive, default=0.02)
    p.add_argument("--out")
    p.add_argument("--curve", help="PR curve CSV (default: <out>.curve.csv)")
    p.set_defaults(func=cmd_eval_extraction)

    p = sub.add_parser("train", parents=[common], help="train per-hand HMM taggers")
    _add_corpus_flags(p)
    p.add_argument("--alpha", type=_positive, default=DEFAULT_ALPHA)
    p.add_argument("--clamp", type=int, default=DEFAULT_CLAMP)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="adapt a trained model to a corpus")
    p.add_argument("--model", required=True)
    _add_corpus_flags(p)
    p.add_argument("--lambda", dest="lam", type=_unit_interval, default=DEFAULT_LAMBDA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", parents=[common], help="decode fingerings for a corpus")
    p.add_argument("--model", required=True)
    _add_corpus_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval-tagger", parents=[common], help="match rate against gold labels")
    p.add_argument("--model", required=True)
    _add_corpus_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_tagger)

    p = sub.add_parser("simulate", parents=[common], help="synthetic performance with gold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--notes", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.0,
                   help="pressing-fingertip noise, in white-key widths")
    p.add_argument("--offset", type=float, default=0.0, help="video minus MIDI time, seconds")
    p.add_argument("--drop", type=_unit_interval, default=0.0, help="keypoint drop probability")
    p.add_argument("--fps", type=_positive, default=25.0)
    p.add_argument("--hand-span", type=int, default=8)
    p.add_argument("--geometry", help="calibration JSON (default: built-in 1280x360 layout)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except (PianoFingerError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        err = {"status": "error", "command": args.command, "error": type(exc).__name__,
               "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **summary}))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
