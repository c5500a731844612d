"""Command-line entry points: build-testbed, decode, evaluate, tune-threshold, make-world.

Exit codes: 0 success, 1 usage or data error, 2 backend/transport error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import statistics
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import records as rio
from .backend import Backend, load_table_lm, table_lm_to_dict
from .engine import CalibrationForm, Decoder, Prediction, Strategy, StrategyConfig, answer_entropies
from .errors import AbstainDecodeError, BackendStepError, EmptySetError, EmptyTestbedError, TransportError
from .judge import DEFAULT_PHRASES, EvalInstance, Judge, load_phrases
from .metrics import (
    EntropyVariant,
    MetricsReport,
    TraceSummary,
    aggregate_entropy,
    count_confusion,
    tune_entropy_threshold,
)
from .prompts import Demo, load_prompt_kit
from .remote import BACKEND_ENV, HttpTransport, RemoteBackend
from .testbed import (
    HashedBagOfWords,
    QARecord,
    Split,
    TestbedConfig,
    TestbedRecord,
    build_testbed,
    expand_eval,
    ingest,
    mrqa_rows,
    split_context_spans,
)

log = logging.getLogger("abstain_decode")

EXIT_OK, EXIT_DATA, EXIT_BACKEND = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 is reserved for the backend
        self.print_usage(sys.stderr)
        self.exit(EXIT_DATA, f"{self.prog}: error: {message}\n")


def _fail(message: str, code: int = EXIT_DATA) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# --- shared helpers ---------------------------------------------------------


def open_backend(spec: str | None) -> Backend:
    spec = spec or os.environ.get(BACKEND_ENV)
    if not spec:
        raise UsageError(f"no backend given (--backend or ${BACKEND_ENV})")
    scheme, _, target = spec.partition(":")
    if scheme == "mock":
        path = Path(target)
        if not path.is_file():
            raise UsageError(f"mock world file not found: {path}")
        return load_table_lm(path)
    if scheme == "remote":
        return RemoteBackend(HttpTransport(target))
    raise UsageError(f"backend spec must be mock:<file> or remote:<url>, got {spec!r}")


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def read_qa_file(path: str, mrqa_split: str | None = None) -> tuple[list[QARecord], int]:
    _, rows = rio.read_records(_require_file(path))
    if mrqa_split is not None:
        rows = mrqa_rows(rows, mrqa_split)
    return ingest(rows)


def read_testbed(path: str) -> tuple[dict | None, list[TestbedRecord]]:
    head, rows = rio.read_records(_require_file(path))
    try:
        return head, [TestbedRecord.from_dict(r) for r in rows]
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: malformed testbed record ({exc})") from None


def pick_demos(path: str | None, shots: int, seed: int, span_words: int = 100) -> list[Demo]:
    if not path or shots <= 0:
        return []
    recs, _ = read_qa_file(path)
    train = [r for r in recs if r.split is Split.TRAIN]
    if len(train) < shots:
        raise UsageError(f"{path}: need {shots} training records for demonstrations, found {len(train)}")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(train), size=shots, replace=False))
    demos = []
    for i in chosen:
        rec = train[int(i)]
        try:
            ctx = split_context_spans(rec.context, rec.answer, span_words)[0]
        except AbstainDecodeError:
            ctx = rec.context
        demos.append(rec.to_demo(ctx))
    return demos


def _strategy_config(args) -> StrategyConfig:
    threshold = args.entropy_threshold
    variant = EntropyVariant(args.entropy_variant)
    if args.threshold_file:
        _, rows = rio.read_records(_require_file(args.threshold_file))
        match = [r for r in rows if r.get("variant") == variant.value]
        if not match:
            raise UsageError(f"{args.threshold_file}: no threshold for variant {variant.value}")
        threshold = rio.read_float(match[0]["threshold"])
    return StrategyConfig(
        strategy=Strategy(args.strategy),
        alpha=args.alpha,
        cad_w=args.cad_w,
        entropy_variant=variant,
        entropy_threshold=threshold,
        calibration=CalibrationForm(args.calibration),
        max_tokens=args.max_tokens,
    )


def _prediction_row(inst_id: str, pred: Prediction) -> dict:
    row = {"id": inst_id, "text": pred.text, "abstained": pred.abstained,
           "inference_calls": pred.inference_calls, "steps": len(pred.trace)}
    if pred.original_text is not None:
        row["original_text"] = pred.original_text
    return row


def _trace_rows(inst_id: str, pred: Prediction, backend: Backend) -> list[dict]:
    rows = []
    for t in pred.trace:
        row = {"id": inst_id, **t.to_dict()}
        row["is_eos"] = t.token == backend.eos_id
        rows.append(row)
    return rows


# --- commands ---------------------------------------------------------------


def cmd_build_testbed(args) -> int:
    records, dropped = read_qa_file(args.input, args.mrqa_split)
    if args.train:
        extra, more = read_qa_file(args.train, "train" if args.mrqa_split is not None else None)
        records += [QARecord(r.id, r.question, r.answer, r.context, Split.TRAIN) for r in extra]
        dropped += more
    backend = open_backend(args.backend)
    config = TestbedConfig(
        n=args.samples, temperature=args.temperature, eta=args.eta, seed=args.seed,
        span_words=args.span_words, candidate_cap=args.candidate_cap, max_tokens=args.max_tokens,
    )
    kit = load_prompt_kit(args.templates)
    try:
        build = build_testbed(records, backend, HashedBagOfWords(), config, kit=kit)
    except EmptyTestbedError as exc:
        _write_attrition(args, config, {"dropped_at_ingestion": dropped, **exc.attrition})
        return _fail(str(exc))
    meta = {"command": "build-testbed", "input": Path(args.input).name, "backend": _backend_label(args),
            "testbed": config.to_dict()}
    rio.write_records(args.out, rio.header("testbed", meta, args.seed), (r.to_dict() for r in build.records))
    _write_attrition(args, config, {"dropped_at_ingestion": dropped, **build.attrition})
    p1 = sum(r.p for r in build.records)
    print(f"wrote {len(build.records)} records ({p1} with p=1, {len(build.records) - p1} with p=0) to {args.out}")
    return EXIT_OK


def _backend_label(args) -> str:
    return args.backend or os.environ.get(BACKEND_ENV, "")


def _write_attrition(args, config: TestbedConfig, attrition: dict) -> None:
    path = args.attrition_out or f"{args.out}.attrition.jsonl"
    rio.write_records(path, rio.header("attrition", config.to_dict(), config.seed),
                      [{"stage": k, "count": v} for k, v in attrition.items()])


def cmd_decode(args) -> int:
    config = _strategy_config(args)
    tb_head, testbed = read_testbed(args.testbed)
    instances = expand_eval(testbed)
    if args.limit:
        instances = instances[: args.limit]
    backend = open_backend(args.backend)
    kit = load_prompt_kit(args.templates, null_demos=not args.no_null_demos)
    demos = pick_demos(args.demos, args.shots, args.seed)
    judge = Judge(load_phrases(args.phrases)) if args.phrases else Judge()
    decoder = Decoder(backend, config, kit, demos, judge)

    meta = {
        "command": "decode",
        "backend": _backend_label(args),
        "strategy": config.to_dict(),
        "testbed_hash": (tb_head or {}).get("config_hash"),
        "demos": len(demos),
        "null_demos": not args.no_null_demos,
    }
    head = rio.header("predictions", meta, args.seed)
    out = Path(args.out)
    partial = out.with_name(out.name + ".partial")
    trace_partial = Path(args.trace_out + ".partial") if args.trace_out else None

    done: dict[str, dict] = {}
    traces_done: dict[str, list[dict]] = {}
    if args.resume and partial.is_file():
        p_head, rows = rio.read_records(partial)
        if not p_head or p_head.get("config_hash") != head["config_hash"]:
            return _fail(f"{partial} was written with a different configuration; remove it to start over")
        done = {r["id"]: r for r in rows}
        if trace_partial and trace_partial.is_file():
            for r in rio.read_records(trace_partial)[1]:
                traces_done.setdefault(r["id"], []).append(r)
    else:
        rio.write_records(partial, head, [])
        if trace_partial:
            rio.write_records(trace_partial, head, [])

    todo = [inst for inst in instances if inst.id not in done]
    jobs = max(1, args.jobs)
    try:
        with open(partial, "a", encoding="utf-8", newline="\n") as pf, \
                (open(trace_partial, "a", encoding="utf-8", newline="\n") if trace_partial else _Null()) as tf:
            for start in range(0, len(todo), jobs):
                chunk = todo[start : start + jobs]
                for inst, pred in zip(chunk, decoder.decode_all(chunk, jobs)):
                    done[inst.id] = _prediction_row(inst.id, pred)
                    pf.write(rio.dumps(done[inst.id]) + "\n")
                    if trace_partial:
                        traces_done[inst.id] = _trace_rows(inst.id, pred, backend)
                        tf.write("".join(rio.dumps(r) + "\n" for r in traces_done[inst.id]))
                pf.flush()
    except (TransportError, BackendStepError) as exc:
        if isinstance(exc, BackendStepError) and not isinstance(exc.cause, TransportError):
            return _fail(str(exc))
        return _fail(f"{exc}; progress kept in {partial}, rerun with --resume", EXIT_BACKEND)

    rio.write_records(out, head, (done[i.id] for i in instances))
    partial.unlink(missing_ok=True)
    if args.trace_out:
        rows = [r for i in instances for r in traces_done.get(i.id, [])]
        rio.write_records(args.trace_out, head, rows)
        trace_partial.unlink(missing_ok=True)
    n_abs = sum(done[i.id]["abstained"] for i in instances)
    print(f"decoded {len(instances)} instances with {config.strategy.value}; {n_abs} abstained -> {out}")
    return EXIT_OK


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def write(self, _):
        pass


class _Pred:
    def __init__(self, row: dict):
        self.text = row["text"]
        self.abstained = bool(row["abstained"])


def _aligned(instances: Sequence[EvalInstance], rows: Sequence[dict], path: str) -> list[tuple[EvalInstance, dict]]:
    by_id = {r["id"]: r for r in rows}
    known = {i.id for i in instances}
    extra = sorted(set(by_id) - known)
    missing = sorted(known - set(by_id))
    if extra or missing:
        parts = []
        if extra:
            parts.append(f"predictions without testbed instance: {', '.join(extra[:20])}")
        if missing:
            parts.append(f"instances without prediction: {', '.join(missing[:20])}")
        raise UsageError(f"{path}: ids do not align ({'; '.join(parts)})")
    return [(i, by_id[i.id]) for i in instances]


def cmd_evaluate(args) -> int:
    _, testbed = read_testbed(args.testbed)
    instances = expand_eval(testbed)
    judge = Judge(load_phrases(args.phrases)) if args.phrases else Judge(DEFAULT_PHRASES)
    dataset = args.dataset or Path(args.testbed).stem
    reports = []
    for path in args.predictions:
        head, rows = rio.read_records(_require_file(path))
        if not rows:
            raise EmptySetError(f"{path}: no predictions")
        pairs = _aligned(instances, rows, path)
        counts = count_confusion(judge.classify(r["text"], bool(r["abstained"]), inst) for inst, r in pairs)
        report = MetricsReport.from_counts(counts)
        cfg = (head or {}).get("config", {})
        reports.append({
            "type": "report",
            "strategy": cfg.get("strategy", {}).get("strategy", "unknown"),
            "dataset": dataset,
            "seed": (head or {}).get("seed"),
            "predictions": Path(path).name,
            **{k: v for k, v in report.to_dict().items() if k != "counts"},
            "counts": list(counts.as_tuple()),
            "n": counts.total,
        })
    rows = list(reports)
    if len(reports) > 1:
        agg = {"type": "aggregate", "dataset": dataset, "runs": len(reports)}
        for key in ("f1_ans", "f1_abs", "rs", "acc", "cov", "answer_rate"):
            vals = [r[key] for r in reports]
            agg[f"{key}_mean"] = statistics.fmean(vals)
            agg[f"{key}_std"] = statistics.pstdev(vals)
        rows.append(agg)
    if args.out:
        rio.write_records(args.out, rio.header("report", {"command": "evaluate", "dataset": dataset}, 0), rows)
    _print_table(reports)
    return EXIT_OK


def _print_table(reports: Sequence[dict]) -> None:
    cols = ("f1_ans", "f1_abs", "rs", "acc", "cov", "answer_rate")
    print(f"{'strategy':<10} {'seed':>5} " + " ".join(f"{c:>11}" for c in cols) + "  counts(N1..N5)")
    for r in reports:
        print(f"{r['strategy']:<10} {str(r['seed']):>5} " + " ".join(f"{r[c] * 100:>11.2f}" for c in cols)
              + f"  {tuple(r['counts'])}")


def cmd_tune_threshold(args) -> int:
    _, testbed = read_testbed(args.testbed)
    instances = expand_eval(testbed)
    _, pred_rows = rio.read_records(_require_file(args.predictions))
    _, trace_rows = rio.read_records(_require_file(args.traces))
    if not pred_rows or not trace_rows:
        raise EmptySetError("no training traces to tune on")
    pairs = _aligned(instances, pred_rows, args.predictions)
    steps: dict[str, list[dict]] = {}
    for row in trace_rows:
        steps.setdefault(row["id"], []).append(row)
    judge = Judge()
    variants = list(EntropyVariant) if args.variant == "all" else [EntropyVariant(args.variant)]
    results = []
    for variant in variants:
        summaries = []
        for inst, row in pairs:
            rows = sorted(steps.get(inst.id, []), key=lambda r: r["step"])
            if rows and rows[-1].get("is_eos") and len(rows) > 1:
                rows = rows[:-1]
            ent = [rio.read_float(r["h_c"]) for r in rows if r.get("h_c") is not None]
            if not ent:
                raise UsageError(f"{args.traces}: no contextual entropies for {inst.id} (decode with --strategy context)")
            text = row.get("original_text", row["text"])
            outcome = judge.classify(text, judge.is_abstention(text), inst)
            summaries.append(TraceSummary(aggregate_entropy(ent, variant), outcome, inst.answerable))
        thr, rs = tune_entropy_threshold(summaries)
        results.append({"variant": variant.value, "threshold": thr, "rs": rs, "n": len(summaries)})
        print(f"{variant.value:<8} threshold={thr:.6f} rs={rs:.6f}")
    rio.write_records(args.out, rio.header("thresholds", {"command": "tune-threshold"}, 0), results)
    return EXIT_OK


def cmd_make_world(args) -> int:
    import json

    from .worlds import quadrant_world, testbed_world

    if args.kind == "quadrant":
        lm, recs = quadrant_world(args.size, args.seed)
        rows = [r.to_dict() for r in recs]
        head = rio.header("testbed", {"command": "make-world", "kind": "quadrant", "size": args.size}, args.seed)
    else:
        lm, recs = testbed_world(seed=args.seed)
        rows = [{"id": r.id, "question": r.question, "answer": r.answer, "context": r.context,
                 "split": r.split.value} for r in recs]
        head = None
    world = Path(args.world)
    world.parent.mkdir(parents=True, exist_ok=True)
    world.write_text(json.dumps(table_lm_to_dict(lm), ensure_ascii=False) + "\n", encoding="utf-8")
    rio.write_records(args.data, head, rows)
    print(f"wrote mock world {world} and {len(rows)} records to {args.data}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abstain-decode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def backend_args(p):
        p.add_argument("--backend", help=f"mock:<world.json> or remote:<url> (default ${BACKEND_ENV})")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-tokens", type=int, default=32)
        p.add_argument("--templates", help="template override file")

    p = sub.add_parser("build-testbed", help="construct a balanced testbed from QA records")
    backend_args(p)
    p.add_argument("--input", required=True, help="QA records (id, question, answer, context, split)")
    p.add_argument("--train", help="extra training-split records for the irrelevant-context pool")
    p.add_argument("--mrqa-split", choices=["train", "eval"], help="read --input as MRQA-format with this split")
    p.add_argument("--out", required=True)
    p.add_argument("--attrition-out")
    p.add_argument("--eta", type=float, default=0.7)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--span-words", type=int, default=100)
    p.add_argument("--candidate-cap", type=int, default=5)
    p.set_defaults(func=cmd_build_testbed)

    p = sub.add_parser("decode", help="run a decoding strategy over a testbed")
    backend_args(p)
    p.add_argument("--testbed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="cda-m", choices=[s.value for s in Strategy])
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--cad-w", type=float, default=1.0)
    p.add_argument("--entropy-variant", default="first", choices=[v.value for v in EntropyVariant])
    p.add_argument("--entropy-threshold", type=float, default=math.inf)
    p.add_argument("--threshold-file", help="output of tune-threshold; overrides --entropy-threshold")
    p.add_argument("--calibration", default="reduction", choices=[c.value for c in CalibrationForm])
    p.add_argument("--trace-out")
    p.add_argument("--demos", help="QA file whose training split supplies few-shot demonstrations")
    p.add_argument("--shots", type=int, default=2)
    p.add_argument("--no-null-demos", action="store_true", help="render null prompts without demonstrations")
    p.add_argument("--phrases", help="abstention phrase file, one per line")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--limit", type=int, default=0, help="decode only the first N instances")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score predictions against a testbed")
    p.add_argument("--testbed", required=True)
    p.add_argument("--predictions", required=True, nargs="+")
    p.add_argument("--out")
    p.add_argument("--dataset")
    p.add_argument("--phrases")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tune-threshold", help="pick entropy-baseline thresholds by best RS on training traces")
    p.add_argument("--testbed", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--variant", default="all", choices=["all", *(v.value for v in EntropyVariant)])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune_threshold)

    p = sub.add_parser("make-world", help="write a synthetic mock world and its data")
    p.add_argument("--kind", choices=["quadrant", "testbed"], default="quadrant")
    p.add_argument("--size", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_make_world)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TransportError as exc:
        return _fail(str(exc), EXIT_BACKEND)
    except (UsageError, AbstainDecodeError, ValueError, KeyError, OSError) as exc:
        return _fail(str(exc) if not isinstance(exc, KeyError) else f"missing field {exc}")


if __name__ == "__main__":
    sys.exit(main())
