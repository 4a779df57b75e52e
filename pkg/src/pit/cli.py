"""Command-line entry point: ``pit {train,diagnose,canonicalize,export,trace}``."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import checkpoint, diagnostics, linalg
from .config import load_config
from .errors import ConfigError, DimensionMismatch, NonFiniteLoss, PitError
from .interface import PitHead, init_teacher


def _overrides(extra: list[str]) -> dict:
    out = {}
    it = iter(extra)
    for flag in it:
        if not flag.startswith("--"):
            raise ConfigError(f"unexpected argument {flag!r}")
        key = flag[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise ConfigError(f"flag {flag} needs a value")
        out[key] = val
    return out


def cmd_train(args, extra) -> int:
    from .train import run_training
    cfg = load_config(args.config, _overrides(extra))
    try:
        result = run_training(cfg, verbose=not args.quiet)
    except NonFiniteLoss as exc:
        print(f"non-finite loss at step {exc.step}", file=sys.stderr)
        return 3
    print(json.dumps(result["report"].to_dict()))
    return 0


def _load_head(path):
    ckpt = checkpoint.read_checkpoint(path)
    return checkpoint.head_from_checkpoint(ckpt)


def cmd_diagnose(args, extra) -> int:
    if args.checkpoint:
        head = _load_head(args.checkpoint)
        report = diagnostics.diagnose_head(head, checkpoint_id=args.id or str(args.checkpoint))
    else:
        if not (args.embedding and args.unembedding):
            raise ConfigError("diagnose needs a checkpoint or both --embedding and --unembedding")
        e = checkpoint.read_matrix(args.embedding).astype(np.float64)
        w = checkpoint.read_matrix(args.unembedding).astype(np.float64)
        # accept either W_out^T (V x d) or W_out (d x V)
        if w.shape == e.shape:
            w = w.T
        elif w.shape != e.shape[::-1]:
            raise DimensionMismatch(f"embedding {e.shape} and unembedding {w.shape} do not pair")
        report = diagnostics.diagnose_matrices(e, w, checkpoint_id=args.id or str(args.embedding))
    print(report.to_json())
    if args.csv:
        report.append_csv(args.csv)
    return 0


def cmd_canonicalize(args, extra) -> int:
    e0 = checkpoint.read_matrix(args.embedding).astype(np.float64)
    _, h = linalg.thin_polar(e0)
    head = init_teacher(e0, match_teacher_scale=args.match_teacher_scale, dtype=np.dtype(args.dtype))
    checkpoint.save_head(args.output, head, meta={"source": str(args.embedding)})
    summary = {"cond_h": float(np.linalg.cond(h)),
               "drift": float(np.linalg.norm(e0 - head.memory.z))}
    print(json.dumps(summary))
    return 0


def cmd_export(args, extra) -> int:
    head = _load_head(args.checkpoint)
    if args.which == "embedding":
        m = head.materialize_embedding(np.float64)
    else:
        m = head.materialize_unembedding(np.float64)
    checkpoint.write_matrix(args.output, m, dtype=args.dtype)
    return 0


def cmd_trace(args, extra) -> int:
    model = checkpoint.model_from_checkpoint(checkpoint.read_checkpoint(args.checkpoint))
    prompt = np.frombuffer(args.prompt.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    if prompt.size == 0:
        raise ConfigError("prompt must not be empty")
    prompt = prompt[-model.config.context:]
    inject = None
    if args.inject_token is not None:
        head = model.head
        t = args.inject_token
        if not 0 <= t < head.vocab_size:
            raise ConfigError(f"inject token {t} outside the vocabulary")
        vec = head.memory.z[t] if isinstance(head, PitHead) else head.e.data[t]
        inject = (args.inject_layer, vec)
    trace = diagnostics.transition_trace(model, prompt, k=args.k, inject=inject)
    print(json.dumps(trace))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pit", description="Pseudo-inverse tied token interfaces: train and audit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a toy LM; extra --key value flags override the config")
    t.add_argument("config", nargs="?", help="flat key = value config file")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("diagnose", help="token-interface diagnostics as JSON")
    d.add_argument("checkpoint", nargs="?")
    d.add_argument("--embedding", help="PITM file holding E (V x d)")
    d.add_argument("--unembedding", help="PITM file holding W_out^T (V x d) or W_out (d x V)")
    d.add_argument("--csv", help="append the report as a CSV row")
    d.add_argument("--id", default="", help="checkpoint id for the report")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("canonicalize", help="teacher embedding -> head-only PIT checkpoint")
    c.add_argument("embedding")
    c.add_argument("output")
    c.add_argument("--match-teacher-scale", action="store_true")
    c.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    c.set_defaults(func=cmd_canonicalize)

    e = sub.add_parser("export", help="materialize E or W_out from a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--which", choices=("embedding", "unembedding"), required=True)
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--dtype", default="float64", choices=("float32", "float64"))
    e.set_defaults(func=cmd_export)

    r = sub.add_parser("trace", help="layerwise top-k readout at the last prompt position")
    r.add_argument("checkpoint")
    r.add_argument("--prompt", required=True)
    r.add_argument("-k", type=int, default=5)
    r.add_argument("--inject-layer", type=int, default=0)
    r.add_argument("--inject-token", type=int, default=None,
                   help="replace the hidden state at --inject-layer with this token's memory row")
    r.set_defaults(func=cmd_trace)
    return p


def _split_train(argv: list[str]) -> tuple[argparse.Namespace, list[str]]:
    # argparse would bind the value of an unknown --key to the optional positional
    rest = list(argv[1:])
    config = rest.pop(0) if rest and not rest[0].startswith("-") else None
    quiet = "--quiet" in rest
    rest = [a for a in rest if a != "--quiet"]
    return argparse.Namespace(command="train", config=config, quiet=quiet, func=cmd_train), rest


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv and argv[0] == "train" and not {"-h", "--help"} & set(argv):
        args, extra = _split_train(argv)
    else:
        args = parser.parse_args(argv)
        extra = []
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PitError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
