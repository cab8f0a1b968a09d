"""Command-line entry point: ``ktbench <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 protocol error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio, evalproto, probes, synthgen
from .config import Settings, UsageError, load_settings
from .dataio import Corpus, DataError
from .evalproto import FoldPlan, HyperParams, MetricsReport, ProtocolError, RunManifest, Setup
from .models import Model, ModelError, ModelVariant, load_checkpoint, save_checkpoint
from .tensor import make_rng
from .training import TrainConfig, TrainingDivergence, evaluate_auc, train

log = logging.getLogger("ktbench")

GRID_FILE = "grid.json"
PLAN_FILE = "fold_plan.json"
CACHE_FILE = "sequences.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(settings_out: str | None) -> Path:
    out = Path(settings_out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _apply_flags(args, s: Settings) -> None:
    pairs = [
        ("lmax", "sequence", "lmax"), ("align", "sequence", "align"), ("axis", "model", "axis"),
        ("w0", "model", "w0"), ("variant", "model", "variant"), ("seed_split", "seeds", "split"),
        ("seed_fold", "seeds", "fold"), ("seed_init", "seeds", "init"),
    ]
    for attr, section, key in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            s.set(section, key, str(value))


def _records(s: Settings) -> list[dataio.InteractionRecord]:
    path = s["data"]["main_table"]
    if not path:
        raise UsageError("data.main_table is not configured")
    if not Path(path).is_file():
        raise DataError(f"main table not found: {path}")
    return dataio.parse_main_table(path, columns=s["columns"], score_threshold=s["data"]["score_threshold"])


def _variant(s: Settings) -> ModelVariant:
    m = s["model"]
    return ModelVariant(kind=m["variant"], axis_mode=m["axis"], w0_enabled=m["w0"], xt_mode=m["xt_mode"])


def _corpus(s: Settings) -> Corpus:
    if s["data"]["cache"]:
        return dataio.load_corpus(s["data"]["cache"])
    records = _records(s)
    wanted = s["data"]["assignment"]
    found = dataio.assignments(records)
    if wanted is not None:
        records = [r for r in records if r.assignment_id == wanted]
        if not records:
            raise DataError(f"assignment {wanted!r} not present; found {found}")
    elif len(found) > 1:
        raise DataError(f"main table holds several assignments {found}; set data.assignment")
    seq = s["sequence"]
    corpus = dataio.build_sequences(records, seq["lmax"], align=seq["align"], truncation=seq["truncation"])
    kind = s["model"]["variant"]
    d = s["data"]
    if kind == "codedkt":
        if not d["path_contexts"]:
            raise UsageError("variant codedkt needs data.path_contexts")
        corpus = dataio.attach_code_features(corpus, path_context_file=d["path_contexts"], r_max=d["r_max"],
                                             missing=d["missing_policy"])
    elif kind == "eckt":
        if not d["embeddings"]:
            raise UsageError("variant eckt needs data.embeddings")
        corpus = dataio.attach_code_features(corpus, embedding_file=d["embeddings"], missing=d["missing_policy"])
    return corpus


def _input_hash(s: Settings) -> str:
    d = s["data"]
    if d["cache"]:
        return dataio.file_hash(d["cache"])
    feature = {"codedkt": d["path_contexts"], "eckt": d["embeddings"]}.get(s["model"]["variant"])
    return dataio.file_hash(d["main_table"], feature)


def _setup(s: Settings, corpus: Corpus) -> Setup:
    t, seeds = s["train"], s["seeds"]
    base = TrainConfig(learning_rate=t["learning_rate"], batch_size=t["batch_size"], max_epochs=t["max_epochs"],
                       patience=t["patience"], optimizer=t["optimizer"], init_seed=seeds["init"],
                       shuffle_seed=seeds["shuffle"], dropout=t["dropout"])
    return Setup(_variant(s), corpus, hidden=s["model"]["hidden"], base=base)


def _plan(s: Settings, corpus: Corpus, out: Path) -> FoldPlan:
    plan = evalproto.make_fold_plan(corpus.subjects(), s["seeds"]["split"], s["seeds"]["fold"])
    _write_json(out / PLAN_FILE, plan.to_dict())
    return plan


def _theta_from_train(s: Settings) -> HyperParams:
    t = s["train"]
    return HyperParams(t["learning_rate"], t["d_emb"], t["dropout"])


# --- subcommands ------------------------------------------------------------

def cmd_gen(args, s: Settings) -> int:
    g = s["gen"]
    cfg = synthgen.GeneratorConfig(
        n_students=g["n_students"], n_problems=g["n_problems"], p_init=g["p_init"], p_learn=g["p_learn"],
        p_guess=g["p_guess"], p_slip=g["p_slip"], max_attempts_per_problem=g["max_attempts_per_problem"],
        shuffle_rows=g["shuffle_rows"], feature_signal=g["feature_signal"], seed=g["seed"],
        assignment_id=g["assignment_id"], n_tokens=g["n_tokens"], n_paths=g["n_paths"],
        paths_per_submission=tuple(g["paths_per_submission"]), embedding_dim=g["embedding_dim"])
    try:
        files = synthgen.generate_corpus(cfg).write(_out(args.out))
    except synthgen.ConfigError as exc:
        raise UsageError(str(exc)) from None
    for name, path in files.items():
        print(f"{name}\t{path}")
    return 0


def cmd_ingest(args, s: Settings) -> int:
    corpus = _corpus(s)
    out = _out(args.out)
    digest = dataio.save_corpus(corpus, out / CACHE_FILE)
    summary = {"assignment_id": corpus.assignment_id, "sequences": len(corpus), "problems": corpus.n_problems,
               "steps": sum(len(q) for q in corpus), "sha256": digest, "meta": corpus.meta}
    _write_json(out / "ingest.json", summary)
    if not corpus.meta["align"]:
        print(f"WARNING: {dataio.STORAGE_ORDER_LABEL}", file=sys.stderr)
    print(f"{len(corpus)} sequences, sha256 {digest}")
    return 0


def cmd_audit(args, s: Settings) -> int:
    report = probes.timestamp_audit(_records(s))
    probes.write_report(report, _out(args.out) / "audit.json")
    print(f"{report.verdict}: {report.total_violations} violation(s) in {report.total_records} records")
    return 0


def cmd_stats(args, s: Settings) -> int:
    table = dataio.length_table(_records(s), args.p)
    lines = [f"assignment,p{args.p:g}"] + [f"{a},{v}" for a, v in table.items()]
    (_out(args.out) / "stats.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_train(args, s: Settings) -> int:
    out = _out(args.out)
    corpus = _corpus(s)
    plan = _plan(s, corpus, out)
    setup = _setup(s, corpus)
    theta = _theta_from_train(s)
    dims = setup.dims(theta)
    res = train(setup.variant, dims, corpus.select(plan.training_folds(0)), corpus.select(plan.folds[0]),
                setup.config(theta), log_path=out / "train_log.csv")
    save_checkpoint(out / "model.json", Model(setup.variant, dims, res.params), seed=s["seeds"]["init"],
                    extra={"theta": theta.to_dict()})
    test_auc = evaluate_auc(res.params, setup.variant, dims, corpus.select(plan.test_subjects))
    _write_json(out / "train.json", {"best_epoch": res.best_epoch, "val_auc": res.best_auc, "test_auc": test_auc,
                                     "stopped_reason": res.stopped_reason.value, "epochs_run": res.epochs_run})
    print(f"best epoch {res.best_epoch}, val AUC {res.best_auc:.4f}, test AUC {test_auc:.4f}")
    return 0


def cmd_grid(args, s: Settings) -> int:
    out = _out(args.out)
    corpus = _corpus(s)
    plan = _plan(s, corpus, out)
    setup = _setup(s, corpus)
    g = s["grid"]
    grid = evalproto.build_grid(setup.variant.kind, g["learning_rates"], g["embedding_sizes"], g["dropouts"],
                                d_emb_fixed=s["train"]["d_emb"], dropout_fixed=s["train"]["dropout"])
    result = evalproto.grid_search_fold0(grid, plan, setup)
    doc = result.to_dict()
    doc.update(fold_plan_hash=plan.digest(), input_hash=_input_hash(s), variant=setup.variant.to_dict())
    _write_json(out / GRID_FILE, doc)
    print(f"theta* = {result.theta_star.to_dict()} (point {result.best_index} of {len(grid)})")
    return 0


def _parse_theta(text: str) -> HyperParams:
    fields = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"--theta expects key=value pairs, got {part!r}")
        k, v = (x.strip() for x in part.split("=", 1))
        if k not in ("learning_rate", "d_emb", "dropout"):
            raise UsageError(f"unknown theta key {k!r}")
        fields[k] = int(v) if k == "d_emb" else float(v)
    if "learning_rate" not in fields:
        raise UsageError("--theta must set learning_rate")
    return HyperParams(**fields)


def cmd_cv(args, s: Settings) -> int:
    out = _out(args.out)
    if args.theta:
        theta, provenance = _parse_theta(args.theta), "explicit"
    else:
        grid_path = Path(args.grid_result) if args.grid_result else out / GRID_FILE
        if not grid_path.is_file():
            raise ProtocolError("cv needs a fixed theta*: run `grid` first, or pass --grid-result / --theta")
        doc = json.loads(grid_path.read_text(encoding="utf-8"))
        theta = HyperParams(**doc["theta_star"])
        provenance = "grid-search"
    corpus = _corpus(s)
    plan = _plan(s, corpus, out)
    setup = _setup(s, corpus)
    if not args.theta and doc.get("fold_plan_hash") not in (None, plan.digest()):
        raise ProtocolError("grid result was produced on a different fold plan")
    metrics = evalproto.run_cv(theta, plan, setup)
    if any(t != theta.to_dict() for t in metrics.fold_theta):
        raise ProtocolError("theta* was not fixed across folds")
    manifest = RunManifest(
        assignment_id=corpus.assignment_id, variant=setup.variant.to_dict(), L_max=s["sequence"]["lmax"],
        align=s["sequence"]["align"], theta_star=theta.to_dict(), theta_provenance=provenance,
        seeds=dict(s["seeds"]), corpus_hash=_input_hash(s), truncation=s["sequence"]["truncation"],
        fold_plan_hash=plan.digest(),
        train_config={k: v for k, v in vars(setup.base).items() if k not in ("learning_rate", "dropout",
                                                                             "init_seed", "shuffle_seed")},
        hidden=setup.hidden, fold_theta=metrics.fold_theta)
    evalproto.emit_report(manifest, metrics, out)
    _write_json(out / evalproto.METRICS_FILE, metrics.to_dict())
    flag = "  (INCOMPLETE: failed folds %s)" % metrics.failed_folds if metrics.failed_folds else ""
    print(f"{manifest.label()} {corpus.assignment_id}: {metrics.mean:.4f} ± {metrics.std:.4f}"
          f", test {metrics.test_mean:.4f}{flag}")
    return 0


def cmd_probe(args, s: Settings) -> int:
    out = _out(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    s.set("model", "variant", model.variant.kind.value)
    corpus = _corpus(s)
    rng = make_rng(s["seeds"]["init"], 0x9B0B)
    seqs = [q for q in corpus if len(q) >= 2]
    if not seqs:
        raise DataError("no sequence with at least two steps to probe")
    picks = rng.permutation(len(seqs))[:args.n_seqs]
    reports = []
    for i in picks:
        seq = seqs[int(i)]
        cut = args.cut if args.cut is not None else max(1, len(seq) // 2)
        if not 1 <= cut < len(seq):
            continue
        reports.append(probes.future_perturbation_probe(model, seq, cut, args.trials, rng))
    if not reports:
        raise DataError("cut point is out of range for every selected sequence")
    worst = max(r.max_delta for r in reports)
    summary = {"variant": model.variant.to_dict(), "sequences": len(reports), "trials_per_sequence": args.trials,
               "max_delta": worst, "threshold": probes.LEAK_THRESHOLD,
               "verdict": "CAUSAL" if worst <= probes.LEAK_THRESHOLD else "LEAKY",
               "per_sequence": [r.to_dict() for r in reports]}
    _write_json(out / "probe.json", summary)
    print(f"{summary['verdict']}: max prefix delta {worst:.3e} over {len(reports)} sequence(s)")
    return 0


def _load_run(d: Path) -> tuple[RunManifest, MetricsReport]:
    try:
        m = RunManifest.from_dict(json.loads((d / evalproto.MANIFEST_FILE).read_text(encoding="utf-8")))
        r = MetricsReport.from_dict(json.loads((d / evalproto.METRICS_FILE).read_text(encoding="utf-8")))
    except FileNotFoundError as exc:
        raise ProtocolError(f"{d} is not a completed cv run: {exc.filename} missing") from None
    return m, r


def cmd_report(args, s: Settings) -> int:
    out = _out(args.out)
    runs = [_load_run(Path(d)) for d in args.runs]
    header, rows = evalproto.summary_rows(runs)
    (out / "table.csv").write_text(evalproto._csv(header, rows), encoding="utf-8")
    if args.baseline:
        base = [_load_run(Path(d)) for d in args.baseline]
        evalproto.write_delta_table(base, runs, out / "delta.csv", args.metric)
        print((out / "delta.csv").read_text(encoding="utf-8"), end="")
    else:
        print((out / "table.csv").read_text(encoding="utf-8"), end="")
    return 0


COMMANDS = {"gen": cmd_gen, "ingest": cmd_ingest, "audit": cmd_audit, "stats": cmd_stats, "train": cmd_train,
            "grid": cmd_grid, "cv": cmd_cv, "probe": cmd_probe, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--out")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--lmax", type=int, choices=(50, 100))
    common.add_argument("--align", choices=("on", "off"))
    common.add_argument("--axis", choices=("time", "path"))
    common.add_argument("--w0", choices=("on", "off"))
    common.add_argument("--variant", choices=("dkt", "codedkt", "eckt"))
    common.add_argument("--seed-split", type=int)
    common.add_argument("--seed-fold", type=int)
    common.add_argument("--seed-init", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ktbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("gen", "ingest", "audit", "train", "grid"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("stats", parents=[common])
    p.add_argument("--p", type=float, default=0.95)
    p = sub.add_parser("cv", parents=[common])
    p.add_argument("--grid-result")
    p.add_argument("--theta", help="explicit theta*, e.g. learning_rate=5e-4,d_emb=16,dropout=0")
    p = sub.add_parser("probe", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cut", type=int)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--n-seqs", type=int, default=10)
    p = sub.add_parser("report", parents=[common])
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--baseline", nargs="+")
    p.add_argument("--metric", choices=("val", "test"), default="val",
                   help="Δ over fold-validation AUC (default) or test-split AUC")
    return parser


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        settings = load_settings(args.config, args.set)
        _apply_flags(args, settings)
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ModelError, synthgen.ConfigError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, TrainingDivergence) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
