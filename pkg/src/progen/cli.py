"""Command line: synth, extract-concepts, train, generate, evaluate.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .concepts import Lexicon, build_context, extract_mentions
from .config import RunConfig
from .data import load_annotations, split_records, synth_corpus, tokenize
from .exceptions import ContractError, DataError, ProgenError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read {what}: {exc}") from None


def _lexicon(path):
    return Lexicon.load(path) if path else Lexicon.default()


def _load_views(record, size):
    from .backbone import load_image

    return [load_image(p, size) for p in record.image_paths]


# ------------------------------------------------------------ synth


def cmd_synth(args):
    path = synth_corpus(args.out, seed=args.seed, n_train=args.n_train, n_val=args.n_val,
                        n_test=args.n_test, grid=args.grid)
    print(path)
    return 0


# ------------------------------------------------------------ extract-concepts


def extract_concepts(records, lexicon):
    out = []
    for rec in records:
        ms = extract_mentions(rec.report, lexicon)
        out.append({"id": rec.id, "split": rec.split, "context_tokens": build_context(ms),
                    "mentions": [{"label": m.label, "polarity": m.polarity,
                                  "attributes": list(m.attributes), "span": list(m.span)} for m in ms]})
    return out


def cmd_extract_concepts(args):
    records = load_annotations(args.annotations, args.image_dir, check_images=False)
    doc = extract_concepts(records, _lexicon(args.lexicon))
    _write_json(args.out, doc)
    print(f"{len(doc)} records -> {args.out}")
    return 0


# ------------------------------------------------------------ train


def _estimator_kwargs(cfg, kind):
    common = dict(d_model=cfg.d_model, n_heads=cfg.n_heads, n_enc_layers=cfg.n_enc_layers,
                  n_dec_layers=cfg.n_dec_layers, d_ff=cfg.d_ff, dropout=cfg.dropout,
                  batch_size=cfg.batch_size, lr=cfg.lr, epochs=cfg.epochs, patience=cfg.patience,
                  seed=cfg.seed, min_freq=cfg.min_freq, beam_size=cfg.beam_size)
    if kind == "lm":
        return dict(common, memory_slots=cfg.lm_memory_slots, mesh=cfg.lm_mesh,
                    max_len=cfg.report_max_len + 1, src_max_len=cfg.concept_max_len)
    return dict(common, memory_slots=cfg.memory_slots, mesh=cfg.mesh, lr_visual=cfg.lr_visual,
                image_size=cfg.image_size, patch_size=cfg.patch_size, d_feature=cfg.d_feature,
                max_len=(cfg.concept_max_len if kind == "vilm" else cfg.report_max_len) + 1)


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("seed", "annotations", "out_dir", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "single_stage", False):
        overrides["single_stage"] = True
    if overrides:
        cfg = RunConfig.from_dict(dict(cfg.to_dict(), **overrides))
    return cfg


def cmd_train(args):
    from .estimators import ImageToText, TextToText, save_estimator

    cfg = load_config(args)
    if not cfg.annotations:
        raise ContractError("no annotations file: set 'annotations' in the config or pass --annotations")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    records = load_annotations(cfg.annotations, cfg.image_dir)
    lexicon = _lexicon(cfg.lexicon)

    concepts_path = Path(cfg.concepts) if cfg.concepts else out / "concepts.json"
    if not concepts_path.exists():
        _write_json(concepts_path, extract_concepts(records, lexicon))
    contexts = {row["id"]: row["context_tokens"] for row in _read_json(concepts_path, "concepts")}
    missing = [r.id for r in records if r.id not in contexts]
    if missing:
        raise DataError(f"{concepts_path}: no concepts for ids {', '.join(missing[:10])}")

    train, val = split_records(records, "train"), split_records(records, "val")
    if not train:
        raise DataError(f"{cfg.annotations}: empty train split")
    X = [_load_views(r, cfg.image_size) for r in train]
    Xv = [_load_views(r, cfg.image_size) for r in val] or None
    C = [contexts[r.id] for r in train]
    Cv = [contexts[r.id] for r in val] or None
    Y = [tokenize(r.report) for r in train]
    Yv = [tokenize(r.report) for r in val] or None
    verbose = not args.quiet

    with open(out / "train_log.jsonl", "w") as log:
        # phase 1: images -> concepts; phase 2: concepts -> report; independent models
        vilm = ImageToText(**_estimator_kwargs(cfg, "vilm"), verbose=verbose).fit(X, C, Xv, Cv, log=log)
        save_estimator(vilm, out / "vilm.ckpt", {"role": "concepts"})
        lm = TextToText(**_estimator_kwargs(cfg, "lm"), verbose=verbose).fit(C, Y, Cv, Yv, log=log)
        save_estimator(lm, out / "lm.ckpt", {"role": "report"})
        if cfg.single_stage:
            single = ImageToText(**_estimator_kwargs(cfg, "single"), verbose=verbose)
            single._phase = "single"
            single.fit(X, Y, Xv, Yv, log=log)
            save_estimator(single, out / "single.ckpt", {"role": "single-stage"})
    print(f"checkpoints written to {out}")
    return 0


# ------------------------------------------------------------ generate


def generate_reports(records, vilm, lm=None, beam=None, single=False):
    from .decoding import decode
    from .models import context_ids

    rows = []
    for rec in records:
        views = [_load_views(rec, vilm.image_size)]
        hyp = decode(vilm.model_.step_fn(vilm._check_sources(views)[0:1]), vilm.decode_config(beam))
        tokens = vilm.vocab_.decode(hyp.body)
        if single:
            rows.append({"id": rec.id, "concepts": None, "report": " ".join(tokens),
                         "truncated": hyp.truncated})
            continue
        src = context_ids(lm.src_vocab_.encode(tokens), lm.src_vocab_)
        rep = decode(lm.model_.step_fn([src]), lm.decode_config(beam))
        rows.append({"id": rec.id, "concepts": " ".join(tokens),
                     "report": " ".join(lm.vocab_.decode(rep.body)),
                     "truncated": hyp.truncated or rep.truncated})
    return rows


def cmd_generate(args):
    from .estimators import load_estimator

    if args.single_stage:
        if not args.model:
            raise ContractError("--single-stage needs --model")
        vilm, lm = load_estimator(args.model), None
    else:
        if not (args.vilm and args.lm):
            raise ContractError("progressive generation needs --vilm and --lm")
        vilm, lm = load_estimator(args.vilm), load_estimator(args.lm)
    records = split_records(load_annotations(args.annotations, args.image_dir), args.split)
    rows = generate_reports(records, vilm, lm, args.beam, args.single_stage)
    _write_json(args.out, rows)
    print(f"{len(rows)} reports -> {args.out}")
    return 0


# ------------------------------------------------------------ evaluate


def _reports_by_id(path):
    """Report texts keyed by id, from a generated-reports list or an annotation file."""
    doc = _read_json(path, "reports")
    if isinstance(doc, dict):
        records = load_annotations(path, check_images=False)
        return {r.id: r.report for r in split_records(records, "test")}
    if not isinstance(doc, list):
        raise DataError(f"{path}: expected a list of {{id, report}} objects")
    out = {}
    for i, row in enumerate(doc):
        if not isinstance(row, dict) or "id" not in row or "report" not in row:
            raise DataError(f"{path}: record {i} needs 'id' and 'report'")
        out[str(row["id"])] = row["report"]
    return out


def evaluate_run(gen_path, refs, lexicon):
    from .metrics import evaluate

    gen = _reports_by_id(gen_path)
    missing = sorted(set(refs) - set(gen))
    extra = sorted(set(gen) - set(refs))
    if missing or extra:
        raise DataError(f"{gen_path}: ids do not match the references; "
                        f"missing: {', '.join(missing) or '-'}; unexpected: {', '.join(extra) or '-'}")
    ids = sorted(refs)
    return evaluate([gen[i] for i in ids], [refs[i] for i in ids], lexicon)


def _sentence_starts(tokens):
    starts = [0]
    for i, t in enumerate(tokens[:-1]):
        if t == ".":
            starts.append(i + 1)
    return starts


def diff_text(gen, ref, lexicon):
    """Both texts with the mentions they share (same label and polarity) marked ``[[...]]``."""
    def mentions(text):
        return extract_mentions(text, lexicon)

    def mark(text, ms, shared):
        toks = tokenize(text)
        starts = _sentence_starts(toks)
        for m in ms:
            if (m.label, m.polarity) in shared:
                s, a, b = m.span
                toks[starts[s] + a] = "[[" + toks[starts[s] + a]
                toks[starts[s] + b - 1] += "]]"
        return " ".join(toks)

    gm, rm = mentions(gen), mentions(ref)
    shared = {(m.label, m.polarity) for m in gm} & {(m.label, m.polarity) for m in rm}
    return mark(gen, gm, shared), mark(ref, rm, shared)


def cmd_evaluate(args):
    from .metrics import EvalReport

    lexicon = _lexicon(args.lexicon)
    refs = _reports_by_id(args.references)
    paths = list(args.generated)
    for d in args.runs or []:
        paths.append(Path(d) / "reports.json")
    if not paths:
        raise ContractError("nothing to evaluate: pass generated report files or --runs directories")
    threads = max(1, int(os.environ.get("PROGEN_THREADS", os.cpu_count() or 1)))
    with ThreadPoolExecutor(max_workers=min(threads, len(paths))) as pool:
        reports = list(pool.map(lambda p: evaluate_run(p, refs, lexicon), paths))
    report = EvalReport.mean(reports)
    doc = report.to_json(runs=len(reports))
    if len(reports) > 1:
        doc["per_run"] = [r.to_json() for r in reports]
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc if len(reports) == 1 else {k: v for k, v in doc.items() if k != "per_run"}))
    if args.diff:
        gen = _reports_by_id(paths[0])
        lines = []
        for i in sorted(refs):
            g, r = diff_text(gen[i], refs[i], lexicon)
            lines += [f"# {i}", f"gen: {g}", f"ref: {r}", ""]
        Path(args.diff).write_text("\n".join(lines))
    return 0


# ------------------------------------------------------------ entry point


def build_parser():
    p = _Parser(prog="progen", description="Two-stage (image -> concepts -> report) generation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=800)
    s.add_argument("--n-val", type=int, default=100)
    s.add_argument("--n-test", type=int, default=100)
    s.add_argument("--grid", type=int, default=4)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract-concepts", help="extract concept skeletons from reports")
    s.add_argument("--annotations", required=True)
    s.add_argument("--image-dir")
    s.add_argument("--lexicon")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_concepts)

    s = sub.add_parser("train", help="train the concept model and the report model")
    s.add_argument("--config")
    s.add_argument("--annotations")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", dest="out_dir")
    s.add_argument("--single-stage", action="store_true", help="also train the one-stage baseline")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="generate reports for a split")
    s.add_argument("--vilm")
    s.add_argument("--lm")
    s.add_argument("--model", help="single-stage checkpoint")
    s.add_argument("--annotations", required=True)
    s.add_argument("--image-dir")
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--beam", type=int)
    s.add_argument("--single-stage", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="score generated reports")
    s.add_argument("generated", nargs="*")
    s.add_argument("--references", required=True)
    s.add_argument("--runs", nargs="+")
    s.add_argument("--lexicon")
    s.add_argument("--diff")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProgenError as exc:
        print(f"progen: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyError as exc:
        print(f"progen: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
