"""waftm command line: train, caption, eval, gen-synth, tokenize, report.

Every command is deterministic given its inputs and the seed in the config.
Results go to stdout as UTF-8 JSON or JSON lines; anything diagnostic goes
to stderr. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

WAFTM_THREADS caps the numeric backend's worker threads. It must be read
before numpy is imported, which is why the cap is applied at the top of
this module rather than inside main().
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys


def _thread_cap() -> int | None:
    raw = os.environ.get("WAFTM_THREADS")
    if raw is None or raw == "":
        return None
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap < 1:
        raise ValueError(f"WAFTM_THREADS must be a positive integer, got {raw!r}")
    return cap


def _apply_thread_cap() -> None:
    try:
        cap = _thread_cap()
    except ValueError:
        return  # re-raised with a proper exit code inside main()
    if cap is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(cap)


_apply_thread_cap()

import numpy as np  # noqa: E402

from . import data as D  # noqa: E402
from . import metrics as Me  # noqa: E402
from . import model as Mo  # noqa: E402
from . import tokenizer as tok  # noqa: E402
from . import training as Tr  # noqa: E402
from .config import (ConfigError, load_run_config, resolve_model_config,  # noqa: E402
                     resolved_dict)
from .decoding import (DecodeError, beam_search, greedy_decode,  # noqa: E402
                       sequence_log_prob)
from .report import ReportError, load_log, write_report  # noqa: E402


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    model_cfg, vocab, train_man = resolve_model_config(run)
    if args.print_config:
        print(json.dumps(resolved_dict(run, model_cfg), indent=1, sort_keys=True))
        return 0
    val_man = D.load_manifest(run.val_manifest) if run.val_manifest else None

    opt = state = None
    if args.resume:
        ck = Tr.load_checkpoint(args.resume, expected_config=model_cfg)
        model, opt, state = ck.model, ck.opt, ck.train_state
    elif run.init_checkpoint:
        ck = Tr.load_checkpoint(run.init_checkpoint, expected_config=model_cfg)
        model = ck.model
    else:
        rng = np.random.default_rng(np.random.SeedSequence([run.train.seed, 0x1717]))
        model = Mo.init_model(model_cfg, rng)

    result = Tr.train_loop(model, vocab, train_man, run.train, run.output_dir,
                           val_manifest=val_man, opt=opt, state=state)
    _emit({
        "final_checkpoint": result["final_checkpoint"],
        "log_path": result["log_path"],
        "epochs_run": len(result["epoch_losses"]),
        "final_val_metrics": result["val_history"][-1] if result["val_history"] else None,
    })
    return 0


def _check_modalities(model_cfg: Mo.ModelConfig, manifest: D.Manifest) -> None:
    names = manifest.modality_names()
    expected = model_cfg.modality_input_dims
    if len(names) != len(expected):
        extra = names[len(expected):] or ["(missing)"]
        raise D.DataError(
            f"manifest has {len(names)} modalities but the model expects "
            f"{len(expected)}; unknown modality {extra[0]!r}")
    for mod, dim in zip(manifest.modalities, expected):
        if mod.dim != dim:
            raise D.DataError(
                f"modality {mod.name!r} has dim {mod.dim}, model expects {dim}")


def cmd_caption(args) -> int:
    if args.beam < 1:
        raise DecodeError(f"beam size must be >= 1, got {args.beam}")
    ck = Tr.load_checkpoint(args.checkpoint)
    if ck.vocab is None:
        raise Tr.TrainError(
            f"checkpoint {args.checkpoint!r} carries no vocabulary; "
            "caption needs one saved at training time")
    manifest = D.load_manifest(args.manifest)
    _check_modalities(ck.model.config, manifest)

    for video in manifest.videos:
        rec, _ = D.load_video(manifest, video)
        feats = list(rec.features)
        if args.beam == 1:
            seq = greedy_decode(ck.model, feats, max_len=args.max_len)
            if seq.length < 2:
                log_prob = 0.0
            else:
                log_prob = float(sequence_log_prob(ck.model, feats, seq.ids).data)
        else:
            seq, log_prob = beam_search(ck.model, feats, args.beam,
                                        max_len=args.max_len)[0]
        _emit({"video_id": video.video_id,
               "caption": tok.decode(seq.ids, ck.vocab),
               "log_prob": log_prob})
    return 0


def _load_candidates(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise Me.MetricError(f"candidates file {path!r} is empty")
    records = []
    for ln in lines:
        try:
            obj = json.loads(ln)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and {"video_id", "caption"} <= set(obj):
            records.append((str(obj["video_id"]), str(obj["caption"])))
        else:
            records = None
            break
    if records is not None:  # caption-command JSONL
        return dict(records)
    obj = json.loads(text)  # plain {video_id: caption} object
    if not isinstance(obj, dict) or not all(isinstance(v, str) for v in obj.values()):
        raise Me.MetricError(
            f"candidates file {path!r} must be caption JSONL or a "
            "{video_id: caption} object")
    return {str(k): v for k, v in obj.items()}


def _load_references(path) -> dict[str, list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if isinstance(obj, dict) and "videos" in obj and "modalities" in obj:
        return D.reference_map(D.load_manifest(path))
    if isinstance(obj, dict) and all(
            isinstance(v, list) and v and all(isinstance(c, str) for c in v)
            for v in obj.values()):
        return {str(k): list(v) for k, v in obj.items()}
    raise Me.MetricError(
        f"references file {path!r} must be a manifest or a "
        "{video_id: [caption, ...]} object")


def cmd_eval(args) -> int:
    candidates = _load_candidates(args.candidates)
    references = _load_references(args.references)
    _emit(Me.score_all(candidates, references))
    return 0


def cmd_gen_synth(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read spec {args.spec!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec {args.spec!r} is not valid JSON: line "
                          f"{exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("synthetic spec must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(D.SyntheticTaskSpec)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"spec: unknown key {key!r} "
                              f"(allowed: {', '.join(sorted(allowed))})")
    if "modality_dims" in raw:
        raw["modality_dims"] = tuple(raw["modality_dims"])
    try:
        spec = D.SyntheticTaskSpec(**raw)
    except D.DataError as exc:
        raise ConfigError(f"spec: {exc}") from exc

    train_man, val_man = D.generate_synthetic(spec, args.out)
    _emit({"train_manifest": train_man, "val_manifest": val_man,
           "vocab": os.path.join(str(args.out), "vocab.txt")})
    return 0


def cmd_tokenize(args) -> int:
    vocab = tok.load_vocab(args.vocab)
    for line in sys.stdin:
        line = line.rstrip("\n")
        if args.decode:
            try:
                ids = [int(t) for t in line.split()]
            except ValueError as exc:
                raise tok.VocabError(f"not a token-id line: {line!r}") from exc
            print(tok.decode(ids, vocab))
        else:
            pieces = [p for w in tok.normalize(line)
                      for p in tok.wordpiece_split(w, vocab)]
            seq = tok.encode(line, vocab, max_len=len(pieces) + 2)
            print(" ".join(str(i) for i in seq.unpadded()))
    return 0


def cmd_report(args) -> int:
    entries = load_log(args.log)
    produced = write_report(entries, args.out)
    _emit(produced)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="waftm",
        description="Multimodal video captioning: train, decode, score.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run XE or SCST training from a config")
    p.add_argument("--config", required=True, help="run-config JSON path")
    p.add_argument("--resume", metavar="CKPT",
                   help="checkpoint to continue from (keeps optimizer state)")
    p.add_argument("--print-config", action="store_true",
                   help="print the fully resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="decode captions for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=1,
                   help="beam size; 1 means greedy (default)")
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score candidate captions against references")
    p.add_argument("--candidates", required=True,
                   help="caption-command JSONL or {video_id: caption} JSON")
    p.add_argument("--references", required=True,
                   help="manifest JSON or {video_id: [captions]} JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synth", help="materialize a synthetic corpus")
    p.add_argument("--spec", required=True, help="synthetic task spec JSON")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("tokenize", help="stdin lines to token ids (or back)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--decode", action="store_true",
                   help="read id lines and print text instead")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("report", help="render a training log to figures + CSV")
    p.add_argument("--log", required=True, help="train_log.jsonl path")
    p.add_argument("--out", required=True, help="directory for figures and CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        _thread_cap()
    except ValueError as exc:
        print(f"waftm: {exc}", file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"waftm: config error: {exc}", file=sys.stderr)
        return 2
    except (D.DataError, Tr.TrainError, Mo.ModelError, DecodeError,
            Me.MetricError, tok.VocabError, ReportError, OSError) as exc:
        print(f"waftm: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("waftm: interrupted", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
