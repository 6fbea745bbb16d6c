"""``distill`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..datamodel import CotaRecord, read_jsonl, write_jsonl
from ..pipeline import client_from_spec, gen_synthetic, synthetic_vocab, textualize
from .config import SamplingConfig, load_config
from .evaluation import evaluate
from .trainer import load_student, run_experiment


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.out:
        config = config.model_copy(update={"out_dir": args.out})
    result = run_experiment(config)
    print(json.dumps(result.final, indent=2, sort_keys=True))
    return 0


def cmd_textualize(args) -> int:
    records = read_jsonl(args.inp)
    bad = [i for i, r in enumerate(records) if not isinstance(r, CotaRecord)]
    if bad:
        print(f"error: record {bad[0] + 1} is not an audio record", file=sys.stderr)
        return 2
    result = textualize(records, client_from_spec(args.client, args.seed), max_workers=args.workers)
    write_jsonl(result.records, args.out)
    for i, err in result.failures:
        print(f"record {i + 1}: {err}", file=sys.stderr)
    print(f"wrote {len(result.records)} records, {len(result.failures)} failed", file=sys.stderr)
    return 1 if result.failures else 0


def cmd_gen_synth(args) -> int:
    data = gen_synthetic(args.n + args.n_eval, synthetic_vocab(), seed=args.seed)
    out = Path(args.out)
    n = args.n
    write_jsonl(data.audio_records[:n], out / "train_audio.jsonl")
    write_jsonl(data.text_records[:n], out / "train_text.jsonl")
    if args.n_eval:
        write_jsonl(data.audio_records[n:], out / "eval_audio.jsonl")
        write_jsonl(data.text_records[n:], out / "eval_text.jsonl")
    (out / "answer_key.json").write_text(json.dumps(data.answer_key) + "\n", encoding="utf-8")
    (out / "vocab.json").write_text(json.dumps(list(data.vocab.tokens)) + "\n", encoding="utf-8")
    return 0


def cmd_eval(args) -> int:
    student, vocab, _ = load_student(args.ckpt)
    records = [r for r in read_jsonl(args.data) if isinstance(r, CotaRecord)]
    sampling = SamplingConfig(temperature=args.temperature, top_k=args.top_k, top_p=args.top_p,
                              max_new=args.max_new)
    res = evaluate(student, records, vocab, sampling, seed=args.seed)
    print(json.dumps(res.summary(), indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from ..service import create_app

    uvicorn.run(create_app(args.seed), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment preset from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("textualize", help="attach descriptions to audio records")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--client", default="mock", help="mock | http:<url>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_textualize)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--n-eval", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("eval", help="sample answers from a student checkpoint and score them")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--top-p", type=float, default=0.5)
    p.add_argument("--max-new", type=int, default=48)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP description service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
