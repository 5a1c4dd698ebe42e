#!/usr/bin/env python3
"""
Affordance Engine - Command Line Entry Point

Subcommands:

1. score:     Score tagged responses against ground-truth records
2. train-toy: GRPO-train the toy policy and write stats, theta and config
3. eval:      Evaluate predicted masks against ground truth from a manifest
4. convert:   Turn a directory of masks and sidecars into a record file
5. ablate:    Reward-toggle ablation on hard multi-target toy scenes

Exit codes:
    0  success
    1  domain error (error class name and message on stderr)
    2  usage error

Usage:
    python -m src.main score --responses r.jsonl --records d.jsonl --lexicon l.vec
    python -m src.main train-toy --difficulty easy --seed 7 --steps 2000 --out runs/easy
    python -m src.main eval --manifest preds.tsv --out runs/eval
    python -m src.main convert --input masks/ --out records.jsonl --stats
    python -m src.main ablate --seeds 1,2,3 --steps 300 --out runs/ablation.jsonl

Environment Variables:
    LOG_LEVEL, SCORING_WORKERS, DEFAULT_SEED, OUTPUT_DIR (see src/config.py)
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import ujson

from .config import DIFFICULTIES, load_run_config, settings
from .dataset_io import (
    RecordParseError,
    convert_directory,
    describe_records,
    read_lines,
    read_records,
    write_records,
)
from .errors import EngineError
from .logger_setup import get_logger, set_level
from .metrics import evaluate_pairs, load_pairs
from .reward_engine import load_lexicon, score_responses
from .trainer import ABLATION_VARIANTS, ToyTrainer, reward_config_from_run, run_ablation

logger = get_logger("main", settings.LOG_LEVEL)


def _dump(row: dict) -> str:
    return ujson.dumps(row, ensure_ascii=False) + "\n"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(lines: Sequence[str], out: Optional[str]) -> None:
    text = "".join(lines)
    if out:
        _write_text(Path(out), text)
    else:
        sys.stdout.write(text)


def _run_overrides(args: argparse.Namespace, *keys: str) -> dict:
    return {key: getattr(args, key, None) for key in keys}


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def _response_row(path: str, line_no: int, text: str) -> dict:
    try:
        row = ujson.loads(text)
    except ValueError as e:
        raise RecordParseError(f"{path}: {e}", line_number=line_no) from None
    if (
        not isinstance(row, dict)
        or not isinstance(row.get("record_id"), str)
        or not isinstance(row.get("response"), str)
    ):
        raise RecordParseError(f"{path}: expected string fields record_id and response", line_number=line_no)
    return {"line": line_no, "record_id": row["record_id"], "response": row["response"]}


def _looks_like_jsonl(path: str, first_line: Optional[str]) -> bool:
    if path.endswith(".jsonl"):
        return True
    if first_line is None:
        return False
    try:
        return isinstance(ujson.loads(first_line), dict)
    except ValueError:
        return False


def read_responses(path: str, record_ids: Sequence[str]) -> List[dict]:
    """
    Read a responses file in one of two forms.

    JSONL (a .jsonl file, or any file whose first non-blank line is a JSON
    object): one {record_id, response} object per line. Plain text: one
    response per line, matched to record_ids by position.

    Blank lines are skipped in both forms.

    Raises:
        RecordParseError: With the 1-based line number of a bad line, or
            when a plain file's response count differs from the record count
    """
    lines = [(line_no, text) for line_no, text in read_lines(path) if text.strip()]
    first = lines[0][1] if lines else None
    if _looks_like_jsonl(path, first):
        return [_response_row(path, line_no, text) for line_no, text in lines]

    if len(lines) != len(record_ids):
        raise RecordParseError(f"{path}: {len(lines)} responses for {len(record_ids)} records")
    return [
        {"line": line_no, "record_id": record_id, "response": text}
        for (line_no, text), record_id in zip(lines, record_ids)
    ]


def cmd_score(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    reward_config = reward_config_from_run(run)
    lexicon = load_lexicon(args.lexicon)
    ordered = read_records(args.records, strict=args.strict)
    records = {r.id: r for r in ordered}
    responses = read_responses(args.responses, [r.id for r in ordered])

    by_record: Dict[str, List[int]] = {}
    for index, row in enumerate(responses):
        if row["record_id"] not in records:
            raise RecordParseError(f"{args.responses}: unknown record_id '{row['record_id']}'", line_number=row["line"])
        by_record.setdefault(row["record_id"], []).append(index)

    breakdowns = [None] * len(responses)
    pool = ThreadPoolExecutor(max_workers=settings.SCORING_WORKERS) if settings.SCORING_WORKERS > 1 else nullcontext()
    with pool as executor:
        for record_id, indices in by_record.items():
            texts = [responses[i]["response"] for i in indices]
            scored = score_responses(texts, records[record_id], lexicon, reward_config, workers=1, executor=executor)
            for i, breakdown in zip(indices, scored):
                breakdowns[i] = breakdown

    output = [
        _dump({"line": row["line"], "record_id": row["record_id"], **breakdown.to_dict()})
        for row, breakdown in zip(responses, breakdowns)
    ]
    _emit(output, args.out)
    logger.info(f"Scored {len(output)} responses")
    return 0


def cmd_train_toy(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, _run_overrides(args, "seed", "steps", "difficulty"))
    out_dir = Path(args.out or settings.OUTPUT_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "config.env", "".join(f"{line}\n" for line in run.to_lines()))

    trainer = ToyTrainer(run)
    with open(out_dir / "stats.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        def on_step(stats, train_reward, eval_reward):
            row = stats.to_dict()
            row["expected_reward"] = train_reward
            row["eval_reward"] = eval_reward
            fh.write(_dump(row))

        result = trainer.run(on_step=on_step)

    _write_text(out_dir / "theta.txt", "".join(f"{float(v)!r}\n" for v in result.theta))
    logger.info(f"Wrote stats, theta and config snapshot to {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pairs = load_pairs(args.manifest)
    summary, details = evaluate_pairs(pairs)
    out_dir = Path(args.out or settings.OUTPUT_DIR)
    _write_text(out_dir / "eval_report.txt", "".join(f"{line}\n" for line in summary.to_lines()))
    _write_text(out_dir / "eval_details.jsonl", "".join(_dump(row) for row in details))
    logger.info(f"Evaluated {summary.n} pairs: gIoU {summary.giou:.4f}, cIoU {summary.ciou:.4f}")
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    records = convert_directory(args.input)
    count = write_records(args.out, records)
    logger.info(f"Wrote {count} records to {args.out}")
    if args.stats:
        stats = describe_records(records)
        logger.info("Dataset statistics:")
        for key, value in stats.items():
            if isinstance(value, dict):
                logger.info(f"  {key}:")
                for k, v in value.items():
                    logger.info(f"    {k}: {v}")
            else:
                logger.info(f"  {key}: {value}")
    return 0


def _parse_seeds(raw: str) -> List[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list: '{raw}'") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def cmd_ablate(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, _run_overrides(args, "steps", "difficulty"))
    variants = args.variants.split(",") if args.variants else None
    rows = run_ablation(run, args.seeds, variants)
    _emit([_dump(row.to_dict()) for row in rows], args.out)
    return 0


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affordance-engine",
        description="Affordance grounding rewards, toy GRPO training and evaluation",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    score = sub.add_parser("score", help="Score tagged responses against records")
    score.add_argument("--responses", required=True, help="JSONL of {record_id, response}, or one response per line")
    score.add_argument("--records", required=True, help="JSONL record file")
    score.add_argument("--lexicon", required=True, help="Word-vector lexicon file")
    score.add_argument("--config", help="key=value run config (reward keys)")
    score.add_argument("--strict", action="store_true", help="Re-derive record boxes from masks")
    score.add_argument("--out", help="Output JSONL (default: stdout)")
    score.set_defaults(handler=cmd_score)

    train = sub.add_parser("train-toy", help="GRPO-train the toy softmax policy")
    train.add_argument("--config", help="key=value run config")
    train.add_argument("--seed", type=int, help="Overrides the config seed")
    train.add_argument("--steps", type=int, help="Overrides the config step count")
    train.add_argument("--difficulty", choices=DIFFICULTIES, help="Overrides the config difficulty")
    train.add_argument("--out", help="Output directory (default: OUTPUT_DIR)")
    train.set_defaults(handler=cmd_train_toy)

    evaluate = sub.add_parser("eval", help="Evaluate predicted masks")
    evaluate.add_argument("--manifest", required=True, help="TSV of id, pred_path, gt_path")
    evaluate.add_argument("--out", help="Output directory (default: OUTPUT_DIR)")
    evaluate.set_defaults(handler=cmd_eval)

    convert = sub.add_parser("convert", help="Build records from masks and sidecars")
    convert.add_argument("--input", required=True, help="Directory of NAME.pgm + NAME.json")
    convert.add_argument("--out", required=True, help="Output JSONL record file")
    convert.add_argument("--stats", action="store_true", help="Log dataset statistics")
    convert.set_defaults(handler=cmd_convert)

    ablate = sub.add_parser("ablate", help="Reward-toggle ablation on hard multi-target scenes")
    ablate.add_argument("--config", help="key=value run config")
    ablate.add_argument("--seeds", type=_parse_seeds, default=[1, 2, 3], help="Comma-separated seeds")
    ablate.add_argument("--steps", type=int, help="Overrides the config step count")
    ablate.add_argument("--difficulty", choices=DIFFICULTIES, default="hard")
    ablate.add_argument("--variants", help=f"Comma list out of {','.join(ABLATION_VARIANTS)}")
    ablate.add_argument("--out", help="Output JSONL (default: stdout)")
    ablate.set_defaults(handler=cmd_ablate)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv and run one subcommand.

    Returns:
        int: Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    if args.verbose:
        set_level("DEBUG")

    try:
        return args.handler(args)
    except EngineError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
