"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .errors import ConfigError, DataError, Decoar2Error, NumericalError

log = logging.getLogger("decoar2")


def _load_synth_config(path, seed):
    from .features import SyntheticCorpusConfig

    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        known = {f.name for f in dataclasses.fields(SyntheticCorpusConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
    data["seed"] = seed
    return SyntheticCorpusConfig(**data)


def _normalized_corpus(directory):
    from .features import cmvn_per_speaker, read_corpus

    return cmvn_per_speaker(read_corpus(directory))


def cmd_synth_data(args):
    from .features import generate_synthetic_corpus, write_corpus

    config = _load_synth_config(args.config, args.seed)
    corpus = generate_synthetic_corpus(config)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances to {args.out}")


def cmd_featurize(args):
    from .features import load_wav, logmel, write_corpus

    wavs = sorted(Path(args.wav).glob("*.wav"))
    if not wavs:
        raise DataError(f"{args.wav}: no .wav files")
    seqs = [logmel(load_wav(p), num_filters=args.num_filters) for p in wavs]
    write_corpus(seqs, args.out)
    print(f"wrote {len(seqs)} feature files to {args.out}")


def cmd_pretrain(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .config import load_config
    from .training import pretrain, write_trace

    config = load_config(args.config)
    if args.no_vq:
        config = dataclasses.replace(config, use_vq=False)
    corpus = _normalized_corpus(args.data)
    state = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)

    def on_checkpoint(st):
        save_checkpoint(st, out.with_name(f"{out.stem}.step{st.step}{out.suffix}"))

    result = pretrain(config, corpus, state=state, on_checkpoint=on_checkpoint)
    save_checkpoint(result.state, out)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    write_trace(result.trace, trace_path)
    last = result.trace[-1] if result.trace else {}
    print(f"saved {out} at step {result.state.step}; trace {trace_path}; last loss {last.get('total')}")


def cmd_extract(args):
    from .checkpoint import load_checkpoint
    from .features import write_corpus
    from .training import extract

    state = load_checkpoint(args.ckpt)
    latents = extract(state.model, _normalized_corpus(args.inp))
    write_corpus(latents, args.out)
    print(f"wrote {len(latents)} latent sequences (dim {latents[0].dim}) to {args.out}")


def cmd_probe(args):
    from .features import read_corpus
    from .probe import train_probe, write_probe_report

    labelled = read_corpus(args.labels)
    labels = {s.utterance_id: s.labels for s in labelled}
    if any(v is None for v in labels.values()):
        raise DataError(f"{args.labels}: some utterances carry no frame labels")
    seqs = _normalized_corpus(args.features) if args.raw else read_corpus(args.features)
    features = {s.utterance_id: s.frames for s in seqs}
    report = train_probe(features, labels, num_units=args.num_units, seed=args.seed)
    report.notes["features"] = "raw CMVN filterbank" if args.raw else "frozen encoder"
    csv_path, txt_path = write_probe_report(report, args.report)
    print(f"held-out accuracy {report.accuracy:.4f}; report {csv_path}, summary {txt_path}")


def cmd_ablate(args):
    from .ablation import run_ablation
    from .config import load_config

    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers: {args.seeds!r}") from exc
    config = load_config(args.config)
    report = run_ablation(config, _normalized_corpus(args.data), seeds)
    csv_path, txt_path = report.write(args.report)
    print(txt_path.read_text(encoding="utf-8"), end="")


def cmd_grad_check(args):
    from .gradcheck import CASES, run_check

    ops = [args.op] if args.op else list(CASES)
    if args.op and args.op not in CASES:
        raise ConfigError(f"unknown op {args.op!r}; choose from {', '.join(CASES)}")
    failed = False
    for op in ops:
        res = run_check(op, instances=args.instances)
        status = "PASS" if res.passed else "FAIL"
        failed |= not res.passed
        print(f"{status} {op:20s} max rel err {res.max_error:.2e} over {res.instances} instances ({res.worst_tensor})")
    if failed:
        raise NumericalError("gradient check failed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoar2", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write the seeded synthetic labeled corpus")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON with SyntheticCorpusConfig fields")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("featurize", help="log-mel features from a directory of WAV files")
    s.add_argument("--wav", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--num-filters", type=int, default=80)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-vq", action="store_true", help="bypass the quantizer (ablation condition)")
    s.add_argument("--resume", help="continue from this checkpoint")
    s.add_argument("--trace", help="loss trace CSV (default: next to the checkpoint)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("extract", help="frozen-encoder representations")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("probe", help="framewise linear probe")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--raw", action="store_true", help="features are raw filterbanks; apply per-speaker CMVN")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-units", type=int)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("ablate", help="with/without VQ ablation")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--seeds", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("grad-check", help="finite-difference gradient checks")
    s.add_argument("--op")
    s.add_argument("--instances", type=int, default=5)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except Decoar2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
