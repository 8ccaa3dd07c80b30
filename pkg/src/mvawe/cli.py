"""Command-line entry point: ``mvawe <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure (training aborted on a non-finite value).
"""

import argparse
import csv
import json
import logging
import sys
import wave
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from mvawe.data import SynthConfig, load_dataset, read_segments_file, write_split, write_synthetic_corpus
from mvawe.errors import ConfigurationError, DataError, MvaweError, NumericalError, UsageError
from mvawe.evaluation import (acoustic_discrimination_from_embeddings, cer_report, cross_view_from_embeddings,
                              pr_curve)
from mvawe.features import N_MELS, mel_filterbank, normalize_text
from mvawe.model import embed_segments, embed_words, load_model, recognize_segments
from mvawe.training import TrainConfig, sweep, train

log = logging.getLogger("mvawe")

EXIT_OK, EXIT_NUMERICAL = 0, 4


# -- helpers -------------------------------------------------------------------

def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path} is not valid JSON: {exc}") from exc


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_override(text):
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _open_dataset(path, split):
    path = Path(path)
    if path.is_dir():
        return load_dataset(path, split)
    return load_dataset(path)


def _train_vocabulary(args, dataset):
    if args.train_vocab:
        return set(load_dataset(args.train_vocab).words)
    sibling = dataset.blob_path.parent / "train.json"
    if sibling.exists():
        return set(load_dataset(sibling).words)
    raise UsageError("no training vocabulary: pass --train-vocab <train manifest>")


def _check_compatible(params):
    if params.config.input_dim != N_MELS:
        raise ConfigurationError(f"model expects {params.config.input_dim}-dim features, datasets hold {N_MELS}")


def _pr_sidecar(report_path):
    report_path = Path(report_path)
    return report_path.with_name(report_path.stem + ".pr.csv")


def _write_pr_csv(path, scores, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for p in pr_curve(scores, labels):
            w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall)])


def _resolve_train_config(args):
    """Effective TrainConfig plus where each value came from."""
    preset = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    values = asdict(preset)
    source = {k: ("preset:" + args.preset if getattr(preset, k) != getattr(TrainConfig(), k) else "default")
              for k in values}
    if args.config:
        for k, v in _read_json(args.config, "config").items():
            values[k] = v
            source[k] = f"file:{args.config}"
    for text in args.set or []:
        k, v = _parse_override(text)
        values[k] = v
        source[k] = "flag:--set"
    if args.seed is not None:
        values["seed"] = args.seed
        source["seed"] = "flag:--seed"
    cfg = TrainConfig.from_dict(values)
    cfg.validate()
    provenance = {k: {"value": getattr(cfg, k), "source": source[k]} for k in values}
    return cfg, provenance


# -- subcommands -------------------------------------------------------------------

def cmd_featurize(args):
    rows = read_segments_file(args.align)
    wav_dir = Path(args.wav_dir)
    cache = {}
    items = []
    skipped = 0
    for k, (utt, word, start, end) in enumerate(rows):
        tokens = normalize_text(word)
        if len(tokens) != 1:
            log.warning("segment %d (%s %r): normalizes to %r, skipped", k, utt, word, tokens)
            skipped += 1
            continue
        if utt not in cache:
            cache.clear()
            cache[utt] = _read_wav(wav_dir / f"{utt}.wav")
        samples, sr = cache[utt]
        lo, hi = int(round(start * sr)), int(round(end * sr))
        if hi > samples.size:
            raise DataError(f"segment {k} ({utt} {start}-{end}s) runs past the end of the audio")
        source_id = f"{utt}-{k:06d}"
        seg = mel_filterbank(samples[lo:hi], sr, source_id=source_id)
        items.append((tokens[0], source_id, seg.frames))
    if not items:
        raise DataError("no usable segments")
    manifest = write_split(args.out, args.split, items)
    print(f"wrote {len(manifest.records)} segments to {Path(args.out) / (args.split + '.json')}"
          f" ({skipped} skipped)")
    return EXIT_OK


def _read_wav(path):
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit mono PCM, got {w.getnchannels()} channel(s) "
                                f"of {8 * w.getsampwidth()} bit")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (OSError, wave.Error, EOFError) as exc:
        raise DataError(f"{path}: cannot read WAV ({exc})") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64), sr


def cmd_gen_data(args):
    values = _read_json(args.config, "config") if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown synthetic-corpus keys: {sorted(unknown)}")
    manifests = write_synthetic_corpus(SynthConfig(**values), args.out)
    print(" ".join(f"{s}={len(m.records)}" for s, m in manifests.items()))
    return EXIT_OK


def cmd_train(args):
    cfg, provenance = _resolve_train_config(args)
    data = Path(args.data)
    train_set, dev_set = load_dataset(data, "train"), load_dataset(data, "dev")
    out = Path(args.out)
    _write_json(out / "run.json", {"command": "train", "data": str(data), "options": provenance})
    _, report = train(train_set, dev_set, cfg, out, workers=args.workers)
    best = report.best
    print(f"best epoch {report.best_epoch}: dev acoustic AP {best.dev_acoustic_ap:.4f}, "
          f"cross-view AP {best.dev_cross_ap:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    grid = _read_json(args.grid, "grid")
    if not isinstance(grid, dict):
        raise ConfigurationError("grid file must hold an object of name -> list of values")
    mode = grid.pop("mode", args.mode)
    base, provenance = _resolve_train_config(args)
    data = Path(args.data)
    train_set, dev_set = load_dataset(data, "train"), load_dataset(data, "dev")
    rows = sweep(grid, base, train_set, dev_set, mode=mode, workers=args.workers,
                 progress=lambda r: log.info("sweep row %s", r))
    out = Path(args.out)
    _write_json(out / "sweep.json", {"mode": mode, "grid": grid, "base": provenance, "rows": rows})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    best = rows[0]
    print("best:", {k: best[k] for k in grid}, "dev AP", best["dev_ap"])
    return EXIT_OK


def _load_embeddings(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            return [str(k) for k in z["keys"]], np.asarray(z["vectors"], dtype=np.float64), str(z["view"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: not an embeddings file ({exc})") from exc


def cmd_eval(args):
    dataset = _open_dataset(args.data, args.split)
    words = dataset.words
    params = None
    if args.model:
        params = load_model(args.model)
        _check_compatible(params)
    report = {"task": args.task, "data": str(args.data), "records": len(dataset)}

    if args.task in ("acoustic", "cross"):
        if args.embeddings:
            keys, emb, view = _load_embeddings(args.embeddings)
            if view != "acoustic" or keys != [r.source_id for r in dataset.manifest.records]:
                raise DataError(f"{args.embeddings} does not hold acoustic embeddings of this dataset")
        elif params is not None:
            emb = embed_segments(dataset.segments(), params, workers=args.workers)
        else:
            raise UsageError("eval needs --model or --embeddings")
        if args.task == "acoustic":
            res = acoustic_discrimination_from_embeddings(emb, words)
        else:
            vocab = sorted(set(words))
            if args.text_embeddings:
                keys, word_emb, view = _load_embeddings(args.text_embeddings)
                if view != "text" or keys != vocab:
                    raise DataError(f"{args.text_embeddings} does not hold text embeddings of this vocabulary")
            elif params is not None:
                word_emb = embed_words(vocab, params, workers=args.workers)
            else:
                raise UsageError("cross-view eval needs --model or --text-embeddings")
            res = cross_view_from_embeddings(emb, words, word_emb, vocab)
        report.update(ap=res["ap"], pairs=res["pairs"], matched=res["matched"], unmatched=res["unmatched"])
        sidecar = _pr_sidecar(args.out)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_pr_csv(sidecar, res["scores"], res["labels"])
        report["pr_curve_csv"] = sidecar.name
        print(f"{args.task} AP {res['ap']:.4f} over {res['pairs']} pairs ({res['matched']} matched)")
    else:
        if params is None:
            raise UsageError("recognition eval needs --model")
        rec = _recognize(args, params, dataset)
        report.update({k: v for k, v in rec.items() if k != "table"})
        print(_cer_summary(rec))
    _write_json(args.out, report)
    return EXIT_OK


def _recognize(args, params, dataset):
    lengths = [len(w) for w in dataset.words] if args.oracle_lengths else None
    hyps = recognize_segments(dataset.segments(), params, lengths=lengths, max_len=args.max_len)
    return cer_report(hyps, dataset.words, _train_vocabulary(args, dataset))


def _fmt_rate(x):
    return "n/a" if x is None else f"{100 * x:.1f}%"


def _cer_summary(rec):
    return (f"CER {_fmt_rate(rec['cer'])} (in-vocabulary {_fmt_rate(rec['iv_cer'])} over {rec['iv_words']} words, "
            f"out-of-vocabulary {_fmt_rate(rec['oov_cer'])} over {rec['oov_words']} words)")


def cmd_embed(args):
    params = load_model(args.model)
    _check_compatible(params)
    dataset = _open_dataset(args.data, args.split)
    if args.view == "acoustic":
        keys = [r.source_id for r in dataset.manifest.records]
        vectors = embed_segments(dataset.segments(), params, workers=args.workers)
    else:
        keys = sorted(set(dataset.words))
        vectors = embed_words(keys, params, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        np.savez(fh, keys=np.array(keys), vectors=vectors, view=np.array(args.view))
    print(f"wrote {len(keys)} {args.view} embeddings of dimension {vectors.shape[1]} to {out}")
    return EXIT_OK


def cmd_decode(args):
    params = load_model(args.model)
    _check_compatible(params)
    dataset = _open_dataset(args.data, args.split)
    rec = _recognize(args, params, dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["decoded", "reference", "in_vocabulary", "edits"])
        for row in rec["table"]:
            w.writerow([row["decoded"], row["reference"], int(row["in_vocabulary"]), row["edits"]])
    _write_json(out, rec)
    print(_cer_summary(rec))
    if args.show:
        width = max(len("decoded"), *(len(r["decoded"]) for r in rec["table"]))
        print(f"{'decoded':<{width}}  reference")
        for row in rec["table"][:args.show]:
            print(f"{row['decoded']:<{width}}  {row['reference']}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_train_options(p):
    p.add_argument("--config", help="JSON file of training hyperparameters (overrides the preset)")
    p.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="starting hyperparameters: 'desk' is a small single-CPU model, "
                        "'full' the full-size defaults (default: desk)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one hyperparameter; VALUE is parsed as JSON when possible (repeatable)")
    p.add_argument("--seed", type=int, help="root seed for initialization, dropout and sampling")
    p.add_argument("--data", required=True, help="corpus directory holding train.json and dev.json")
    p.add_argument("--out", required=True, help="output directory")


def _add_dataset_options(p):
    p.add_argument("--data", required=True, help="dataset manifest, or a corpus directory (see --split)")
    p.add_argument("--split", default="test", help="split to use when --data is a directory (default: test)")


def _add_recognition_options(p):
    p.add_argument("--train-vocab", help="training manifest defining in-vocabulary words "
                                         "(default: train.json next to the dataset)")
    p.add_argument("--max-len", type=int, default=20, help="longest decoded word (default: 20)")
    p.add_argument("--oracle-lengths", action="store_true",
                   help="decode exactly as many characters as each reference word; "
                        "required for models without an end-of-word class")


def build_parser():
    parser = argparse.ArgumentParser(prog="mvawe", description="Multi-view acoustic word embeddings "
                                     "with a shared spelling decoder.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("--workers", type=int, default=1,
                        help="threads for batched embedding work; results do not depend on it (default: 1)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("featurize", help="turn WAV files plus word alignments into a dataset split")
    p.add_argument("--in", dest="wav_dir", required=True, help="directory of <utt_id>.wav (16-bit mono PCM)")
    p.add_argument("--align", required=True, help="segments file: 'utt_id word start_sec end_sec' per line")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--split", default="train", help="split name to write (default: train)")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("gen-data", help="write a deterministic synthetic corpus")
    p.add_argument("--config", help="JSON file of synthetic-corpus settings (defaults otherwise)")
    p.add_argument("--seed", type=int, help="override the corpus seed")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, keeping the best dev-AP checkpoint")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="coarse hyperparameter search")
    p.add_argument("--grid", required=True, help="JSON object of hyperparameter -> list of values "
                                                 "(optional key 'mode')")
    p.add_argument("--mode", choices=("coordinate", "cartesian"), default="coordinate",
                   help="one hyperparameter at a time, or the full product (default: coordinate)")
    _add_train_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="word discrimination AP or recognition CER")
    p.add_argument("--task", required=True, choices=("acoustic", "cross", "recognition"),
                   help="segment-vs-segment AP, segment-vs-word AP, or decoded-word CER")
    p.add_argument("--model", help="checkpoint path")
    _add_dataset_options(p)
    p.add_argument("--embeddings", help="precomputed acoustic embeddings (from 'embed') instead of --model")
    p.add_argument("--text-embeddings", help="precomputed text embeddings for --task cross")
    _add_recognition_options(p)
    p.add_argument("--out", required=True, help="report JSON; the PR curve goes to <stem>.pr.csv beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="write embeddings for a dataset")
    p.add_argument("--model", required=True, help="checkpoint path")
    _add_dataset_options(p)
    p.add_argument("--view", choices=("acoustic", "text"), default="acoustic",
                   help="one vector per record (acoustic) or per unique word (text)")
    p.add_argument("--out", required=True, help="output .npz with arrays keys, vectors, view")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("decode", help="spell out acoustic embeddings and score CER")
    p.add_argument("--model", required=True, help="checkpoint path")
    _add_dataset_options(p)
    _add_recognition_options(p)
    p.add_argument("--out", required=True, help="report JSON; the decoded/reference table goes to <stem>.csv")
    p.add_argument("--show", type=int, default=0, metavar="N", help="print the first N table rows")
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_NUMERICAL
    except MvaweError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
