"""Command-line front end for the whole pipeline.

    notegen synth --patients 100 --seed 7 --out cohort/
    notegen train-vocab --cohort cohort/ --size 2048 --out vocab.json
    notegen build --cohort cohort/ --vocab vocab.json --out dataset/
    notegen train --dataset dataset/ --vocab vocab.json --arch ted --out m.ckpt
    notegen eval --checkpoint m.ckpt --dataset dataset/ --vocab vocab.json
    notegen generate --checkpoint m.ckpt --vocab vocab.json --cohort cohort/ \
        --subject 3 --note-index 1
    notegen detect --checkpoint m.ckpt --vocab vocab.json --cohort cohort/ \
        --subject 3 --note-index 1 --note-file draft.txt
    notegen serve --checkpoint m.ckpt --vocab vocab.json --port 8765

Exit codes: 0 success, 1 runtime failure, 2 usage error. Results go to the
paths or stdout named by flags; all logging goes to stderr. A JSON config
file (--config) may supply any flag's default; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .context import RecordContext, truncate_context
from .dataset import (
    ALL_PARTS,
    build_examples,
    read_dataset,
    serialize_ablated,
    split_patients,
    write_dataset,
)
from .ehr import CohortSpec, generate_synthetic_cohort, load_cohort, save_cohort
from .generation import DecodeConfig, beam_decode
from .model import ARCH_DECODER_ONLY, ARCH_ENCODER_DECODER, ModelConfig, init_params
from .tokenizer import Vocab, load_vocab, save_vocab, train_vocab
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("notegen")

ARCH_FLAGS = {"ted": ARCH_ENCODER_DECODER, "tdmca": ARCH_DECODER_ONLY}


def _add_synth(sub) -> None:
    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, help="(required)")
    p.add_argument("--min-notes", type=int, default=2)
    p.add_argument("--max-notes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="(required) cohort directory to write")


def _add_build(sub) -> None:
    p = sub.add_parser("build", help="split a cohort and write JSONL datasets")
    p.add_argument("--cohort", help="(required)")
    p.add_argument("--out", help="(required) dataset directory to write")
    p.add_argument("--vocab", help="vocab file; omit for raw byte tokens")
    p.add_argument("--parts", default=ALL_PARTS,
                   help="context parts to keep (subset of 'dmln')")
    p.add_argument("--seed", type=int, default=0, help="split assignment seed")


def _add_train_vocab(sub) -> None:
    p = sub.add_parser("train-vocab", help="learn a subword vocab from notes")
    p.add_argument("--cohort", help="(required)")
    p.add_argument("--size", type=int, default=2048, help="target vocab size")
    p.add_argument("--out", help="(required) vocab file to write")


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="train a model on a built dataset")
    p.add_argument("--dataset", help="(required)")
    p.add_argument("--vocab", help="(required)")
    p.add_argument("--out", help="(required) checkpoint file to write")
    p.add_argument("--arch", choices=sorted(ARCH_FLAGS), default="ted")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-len", type=int, default=1024)
    p.add_argument("--compression", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr-scale", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also checkpoint every N steps (0: only at the end)")
    p.add_argument("--resume", help="checkpoint to continue from")


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", help="(required)")
    p.add_argument("--dataset", help="(required)")
    p.add_argument("--vocab", help="(required)")
    p.add_argument("--split", default="test")
    p.add_argument("--sample", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--max-len", type=int, default=500)
    p.add_argument("--baseline", help="second checkpoint whose generations "
                                      "define boilerplate to strip")
    p.add_argument("--out", help="also write the JSON report here")


def _context_args(p) -> None:
    p.add_argument("--cohort", help="cohort directory to pull the context from")
    p.add_argument("--subject", type=int)
    p.add_argument("--note-index", type=int, default=0)
    p.add_argument("--context-json", help="RecordContext JSON file (alternative "
                                          "to --cohort/--subject)")
    p.add_argument("--parts", default=ALL_PARTS)


def _add_generate(sub) -> None:
    p = sub.add_parser("generate", help="decode a note from a context")
    p.add_argument("--checkpoint", help="(required)")
    p.add_argument("--vocab", help="(required)")
    _context_args(p)
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--max-len", type=int, default=500)


def _add_detect(sub) -> None:
    p = sub.add_parser("detect", help="flag low-likelihood words in a note")
    p.add_argument("--checkpoint", help="(required)")
    p.add_argument("--vocab", help="(required)")
    _context_args(p)
    p.add_argument("--note-file", help="note text to check; default is the "
                                       "cohort note itself")
    p.add_argument("--k-sigma", type=float, default=2.0)
    p.add_argument("--max-suggestions", type=int, default=5)


def _add_serve(sub) -> None:
    p = sub.add_parser("serve", help="serve the model over HTTP")
    p.add_argument("--checkpoint", help="(required)")
    p.add_argument("--vocab", help="(required)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="default: $NOTEGEN_PORT or 8765")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="notegen",
        description="synthetic-EHR note modeling: cohorts, vocab, training, "
                    "evaluation, decoding, error detection, serving",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file of flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_synth, _add_build, _add_train_vocab, _add_train,
                _add_eval, _add_generate, _add_detect, _add_serve):
        add(sub)
    return parser


def _load_vocab_or_bytes(path: str | None) -> Vocab:
    return load_vocab(path) if path else Vocab(merges=[])


def _pairs(examples):
    return [(ex.input_tokens, ex.target_tokens) for ex in examples]


def cmd_synth(args) -> int:
    spec = CohortSpec(
        n_patients=args.patients,
        notes_per_patient=(args.min_notes, args.max_notes),
        seed=args.seed,
    )
    store = generate_synthetic_cohort(spec)
    save_cohort(store, args.out)
    log.info("wrote %d patients to %s", len(store.patients), args.out)
    return 0


def cmd_build(args) -> int:
    store = load_cohort(args.cohort)
    splits = split_patients(store.subject_ids(), seed=args.seed)
    vocab = _load_vocab_or_bytes(args.vocab)
    examples = build_examples(store, splits, vocab, context_parts=args.parts)
    counts = write_dataset(examples, args.out)
    log.info("wrote %s to %s", counts, args.out)
    return 0


def cmd_train_vocab(args) -> int:
    store = load_cohort(args.cohort)
    corpus = [n.text for sid in store.subject_ids()
              for n in store.notes_for(sid) if n.text]
    vocab = train_vocab(corpus, args.size)
    save_vocab(vocab, args.out)
    log.info("trained %d-token vocab from %d notes -> %s",
             vocab.size, len(corpus), args.out)
    return 0


def cmd_train(args) -> int:
    vocab = load_vocab(args.vocab)
    train_ex = _pairs(read_dataset(args.dataset, "train"))
    val_ex = _pairs(read_dataset(args.dataset, "validation"))
    if not train_ex:
        raise ValueError("train split is empty")

    if args.resume:
        cfg, params, start_step, opt = load_checkpoint(args.resume)
    else:
        cfg = ModelConfig(
            arch=ARCH_FLAGS[args.arch],
            d_model=args.d_model,
            n_heads=args.n_heads,
            n_layers=args.n_layers,
            d_ff=args.d_ff,
            vocab_size=vocab.size,
            max_len=args.max_len,
            compression_factor=args.compression,
            dropout=args.dropout,
            seed=args.seed,
            dtype=args.dtype,
        )
        params, start_step, opt = init_params(cfg), 0, None
    tcfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr_scale=args.lr_scale,
        warmup_steps=args.warmup,
        seed=args.seed,
        log_every=args.log_every,
    )
    _, history = train(
        params, cfg, train_ex, tcfg,
        opt_state=opt,
        start_step=start_step,
        val_examples=val_ex or None,
        checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
    )
    if history:
        log.info("final loss %.4f at step %d",
                 history[-1]["loss"], history[-1]["step"])
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    cfg, params, _, _ = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    examples = list(read_dataset(args.dataset, args.split))
    base_params = base_cfg = base_examples = None
    if args.baseline:
        base_cfg, base_params, _, _ = load_checkpoint(args.baseline)
        base_examples = examples
    report = evaluate(
        params, cfg, vocab, examples,
        baseline_params=base_params,
        baseline_cfg=base_cfg,
        baseline_examples=base_examples,
        sample_size=args.sample,
        seed=args.seed,
        beam_size=args.beam,
        decode_max_len=args.max_len,
    )
    blob = json.dumps(report.to_dict(), indent=2)
    print(blob)
    if args.out:
        Path(args.out).write_text(blob + "\n", encoding="utf-8")
    log.info(
        "n=%d | log-ppl %.3f | acc %.1f%% | R1 %.1f | R2 %.1f | B-R1 %.1f | "
        "sex %.1f%% | age %.1f%%",
        report.n_examples, report.log_ppl, report.acc, report.r1, report.r2,
        report.b_r1, report.sex_acc, report.age_acc,
    )
    return 0


def _resolve_context(args, vocab: Vocab) -> tuple[list[int], str]:
    """Returns (context tokens, the cohort note's text or '')."""
    if args.context_json:
        raw = json.loads(Path(args.context_json).read_text(encoding="utf-8"))
        ctx, note_text = RecordContext.from_dict(raw), ""
    elif args.cohort and args.subject is not None:
        from .context import extract_context

        store = load_cohort(args.cohort)
        ctx = extract_context(store, args.subject, args.note_index, vocab)
        note_text = store.notes_for(args.subject)[args.note_index].text
    else:
        raise UsageError("need --context-json or --cohort with --subject")
    tokens = truncate_context(vocab.encode(serialize_ablated(ctx, args.parts)))
    return tokens, note_text


def cmd_generate(args) -> int:
    cfg, params, _, _ = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    ctx_tokens, _ = _resolve_context(args, vocab)
    tokens, logprob = beam_decode(
        params, cfg, ctx_tokens,
        DecodeConfig(beam_size=args.beam, max_len=args.max_len),
    )
    log.info("decoded %d tokens, log-prob %.3f", len(tokens), logprob)
    print(vocab.decode_text(tokens))
    return 0


def cmd_detect(args) -> int:
    from .assist import detect_anomalies

    cfg, params, _, _ = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    ctx_tokens, cohort_note = _resolve_context(args, vocab)
    if args.note_file:
        note_text = Path(args.note_file).read_text(encoding="utf-8")
    elif cohort_note:
        note_text = cohort_note
    else:
        raise UsageError("need --note-file when the context is not a cohort note")
    flags = detect_anomalies(
        params, cfg, vocab, ctx_tokens, vocab.encode(note_text),
        k_sigma=args.k_sigma, max_suggestions=args.max_suggestions,
    )
    print(json.dumps([
        {
            "word": f.word,
            "char_start": f.char_start,
            "char_end": f.char_end,
            "logprob": f.logprob,
            "suggestions": [{"text": s, "prob": p} for s, p in f.suggestions],
        }
        for f in flags
    ], indent=2))
    log.info("%d flags at k_sigma=%.2f", len(flags), args.k_sigma)
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.checkpoint, args.vocab, host=args.host, port=args.port)
    return 0


class UsageError(ValueError):
    pass


_COMMANDS = {
    "synth": cmd_synth,
    "build": cmd_build,
    "train-vocab": cmd_train_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "detect": cmd_detect,
    "serve": cmd_serve,
}

# flags every subcommand cannot run without; a --config file may supply them
_REQUIRED = {
    "synth": ("patients", "out"),
    "build": ("cohort", "out"),
    "train-vocab": ("cohort", "out"),
    "train": ("dataset", "vocab", "out"),
    "eval": ("checkpoint", "dataset", "vocab"),
    "generate": ("checkpoint", "vocab"),
    "detect": ("checkpoint", "vocab"),
    "serve": ("checkpoint", "vocab"),
}


def _subparser(parser: argparse.ArgumentParser, command: str):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise AssertionError("parser has no subcommands")


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"notegen: --config: {exc}", file=sys.stderr)
            return 2
        # defaults must land on the subparser: it reparses its own flags and
        # would otherwise overwrite anything set on the top-level parser
        _subparser(parser, args.command).set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [f for f in _REQUIRED[args.command]
               if getattr(args, f.replace("-", "_"), None) is None]
    if missing:
        flags = ", ".join("--" + f for f in missing)
        print(f"notegen {args.command}: missing {flags}", file=sys.stderr)
        return 2

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        log.error("%s", exc)
        if args.verbose:
            log.exception("traceback")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
