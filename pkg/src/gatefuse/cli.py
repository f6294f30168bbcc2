"""Command-line entry points.

Exit codes: 0 success, 1 bad arguments or usage, 2 malformed data or missing
files, 3 numeric failure (non-finite loss or gradients). Verbosity comes from
the GATEFUSE_LOG environment variable (debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .analysis import analysis_report, load_lexicon, load_tag_map, trace_gates
from .config import load_config, RunConfig
from .data import load_caption_dataset, load_tokenizer
from .errors import DataFormatError, InvalidArgument, NumericError
from .evaluation import (forced_choice_accuracy, load_forced_choice,
                         load_minimal_pairs, minimal_pair_accuracy)
from .formats import read_embeddings
from .model import count_parameters
from .synthetic import make_synthetic
from .trainer import Trainer, load_model_from_checkpoint

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; we reserve 2 for data problems."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out-dir", help="output directory")

    p = _Parser(prog="gatefuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("count-params", parents=[common],
                   help="print the model parameter count")

    t = sub.add_parser("train", parents=[common], help="run training")
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", parents=[common],
                       help="score minimal-pair and forced-choice suites")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--minimal-pairs", help="JSONL pair suite")
    e.add_argument("--forced-choice", help="JSONL choice suite")
    e.add_argument("--embeddings", help="embeddings file (default: checkpoint config)")
    e.add_argument("--vocab", help="vocabulary override (default: checkpoint config)")

    a = sub.add_parser("analyze", parents=[common],
                       help="trace gate values and write the analysis report")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--captions", help="captions override (default: checkpoint config)")
    a.add_argument("--embeddings", help="embeddings override (default: checkpoint config)")
    a.add_argument("--vocab", help="vocabulary override (default: checkpoint config)")
    a.add_argument("--tag-map", required=True, help="token,label CSV")
    a.add_argument("--lexicon", action="append", default=[], metavar="PATH",
                   help="word-rating CSV (word,<score>,... header); repeatable")
    a.add_argument("--casefold", action="store_true",
                   help="match surfaces to tags/lexicons case-insensitively")

    m = sub.add_parser("make-synthetic", parents=[common],
                       help="generate the synthetic dataset")
    m.add_argument("--n-text", type=int, default=512)
    m.add_argument("--n-captions", type=int, default=128)
    m.add_argument("--dim", type=int, default=16)
    return p


def _require(value, flag: str):
    if value is None:
        raise InvalidArgument(f"this command requires {flag}")
    return value


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.training.seed = args.seed
    return cfg


def _cmd_count_params(args) -> int:
    cfg = _load_run_config(args)
    print(f"parameters: {count_parameters(cfg.model)}")
    return 0


def _cmd_train(args) -> int:
    _require(args.config, "--config")
    out_dir = _require(args.out_dir, "--out-dir")
    trainer = Trainer(_load_run_config(args), out_dir)
    trainer.train(resume_from=args.resume)
    print(f"training finished at step {trainer.global_step}; outputs in {out_dir}")
    return 0


def _checkpoint_context(args):
    model, cfg, manifest = load_model_from_checkpoint(args.checkpoint)
    vocab = args.vocab if args.vocab is not None else cfg.data.vocab
    return model, cfg, load_tokenizer(vocab)


def _cmd_eval(args) -> int:
    out_dir = _require(args.out_dir, "--out-dir")
    if not (args.minimal_pairs or args.forced_choice):
        raise InvalidArgument("give --minimal-pairs and/or --forced-choice")
    model, cfg, tokenizer = _checkpoint_context(args)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    if args.minimal_pairs:
        res = minimal_pair_accuracy(model, load_minimal_pairs(args.minimal_pairs),
                                    tokenizer)
        rows.append(("minimal_pairs", "all", res.accuracy, res.n_items))
        rows.extend(("minimal_pairs", task, acc, n)
                    for task, (acc, n) in res.per_subtask.items())
    if args.forced_choice:
        emb_path = args.embeddings if args.embeddings is not None else cfg.data.embeddings
        if emb_path is None:
            raise InvalidArgument("forced choice needs --embeddings")
        embeddings = read_embeddings(emb_path)
        res = forced_choice_accuracy(model, load_forced_choice(args.forced_choice),
                                     embeddings, tokenizer)
        rows.append(("forced_choice", "all", res.accuracy, res.n_items))
    with open(os.path.join(out_dir, "eval.csv"), "w", encoding="utf-8") as f:
        f.write("suite,subtask,accuracy,n\n")
        for suite, task, acc, n in rows:
            f.write(f"{suite},{task},{repr(acc)},{n}\n")
    for suite, task, acc, n in rows:
        print(f"{suite}/{task}: accuracy {acc:.4f} over {n} items")
    return 0


def _cmd_analyze(args) -> int:
    out_dir = _require(args.out_dir, "--out-dir")
    model, cfg, manifest = load_model_from_checkpoint(args.checkpoint)
    vocab = args.vocab if args.vocab is not None else cfg.data.vocab
    tokenizer = load_tokenizer(vocab)
    captions = args.captions if args.captions is not None else cfg.data.captions
    emb_path = args.embeddings if args.embeddings is not None else cfg.data.embeddings
    if captions is None or emb_path is None:
        raise InvalidArgument("analyze needs caption and embedding paths")
    embeddings = read_embeddings(emb_path)
    ds = load_caption_dataset(captions, embeddings, tokenizer, cfg.model.max_seq_len)
    records = trace_gates(model, ds.token_seqs,
                          ds.embeddings[ds.image_indices].astype(np.float32),
                          tokenizer)
    lexicons: dict[str, dict[str, float]] = {}
    for path in args.lexicon:
        for name, column in load_lexicon(path).items():
            if name in lexicons:
                raise InvalidArgument(f"duplicate lexicon score column {name!r}")
            lexicons[name] = column
    manifest_bytes = json.dumps(manifest, sort_keys=True,
                                separators=(",", ":")).encode("utf-8")
    analysis_report(out_dir, records, load_tag_map(args.tag_map), lexicons,
                    casefold=args.casefold,
                    manifest_hash=hashlib.sha256(manifest_bytes).hexdigest())
    print(f"analysis report written to {out_dir}")
    return 0


def _cmd_make_synthetic(args) -> int:
    out_dir = _require(args.out_dir, "--out-dir")
    seed = args.seed if args.seed is not None else 0
    paths = make_synthetic(out_dir, seed, n_text=args.n_text,
                           n_captions=args.n_captions, dim=args.dim)
    print(f"synthetic dataset ({len(paths)} files) written to {out_dir}")
    return 0


_COMMANDS = {
    "count-params": _cmd_count_params,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "make-synthetic": _cmd_make_synthetic,
}


def main(argv=None) -> int:
    level = os.environ.get("GATEFUSE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except InvalidArgument as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
