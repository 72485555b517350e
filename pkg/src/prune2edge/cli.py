"""``prune2edge`` command line.

Every stage reads its inputs from flags (defaulting to the conventional
location under ``--out-dir``) and writes its outputs under ``--out-dir``.
Each invocation is recorded in ``<out-dir>/run.json``.

Layout::

    <out-dir>/data/dataset.p2ed(.json)   gen-data
    <out-dir>/pool/manifest.json         train-pool
    <out-dir>/pool-int8/manifest.json    quantize (only for a --no-quant pool)
    <out-dir>/baseline/manifest.json     train-pool --no-prune --no-quant
    <out-dir>/cluster.json               cluster
    <out-dir>/deployment.json            select
    <out-dir>/reports/eval-<split>.json  eval
    <out-dir>/reports/master-<N>.json    master
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import edgenet, ensel, nncore, poolgen, quantizer, store, voter
from .errors import ConfigError, Prune2EdgeError

log = logging.getLogger("prune2edge")

EXIT_USAGE = 2


def _paths(args):
    out = Path(args.out_dir)
    return {
        "dataset": out / "data" / "dataset.p2ed",
        "pool": out / "pool" / "manifest.json",
        "baseline": out / "baseline" / "manifest.json",
        "cluster": out / "cluster.json",
        "deployment": out / "deployment.json",
        "reports": out / "reports",
    }


def _record(args, outputs: dict) -> None:
    run_path = Path(args.out_dir) / "run.json"
    run = store.read_json(run_path) if run_path.exists() else {"stages": {}}
    run["stages"][args.command] = {
        "argv": args.argv,
        "seed": args.seed,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    store.write_json(run_path, run)


def cmd_gen_data(args):
    path = Path(args.path) if args.path else _paths(args)["dataset"]
    ds = store.gen_dataset(args.kind, args.n_samples, args.n_classes, args.noise, args.seed,
                           path=path, n_features=args.n_features)
    digest = ds.fingerprint()
    print(f"wrote {path} ({ds.n_samples} samples, {ds.n_classes} classes) sha256={digest}")
    _record(args, {"dataset": path})


def cmd_train_pool(args):
    paths = _paths(args)
    dataset = store.load_dataset(args.dataset or paths["dataset"])
    baseline = args.no_prune
    out = Path(args.pool_dir) if args.pool_dir else (paths["baseline"] if baseline else paths["pool"]).parent
    hidden = tuple(int(h) for h in args.hidden.split(","))
    manifest = poolgen.generate_pool(dataset, args.size, args.seed, out, hidden=hidden,
                                     workers=args.workers, prune=not args.no_prune,
                                     quantize=not args.no_quant)
    ok = poolgen.ok_entries(manifest)
    accs = [e["pruning_accuracy"] for e in ok]
    print(f"trained {len(ok)}/{args.size} models into {out}; pruning-set accuracy "
          f"min {min(accs):.4f} median {np.median(accs):.4f} max {max(accs):.4f}")
    _record(args, {"manifest": out / "manifest.json"})


def cmd_quantize(args):
    """Write an int8 copy of a float pool; a pool that is already int8 is left alone."""
    paths = _paths(args)
    manifest_path = Path(args.pool or paths["pool"])
    manifest, models = poolgen.load_pool(manifest_path)
    if all(m.is_quantized for m in models.values()):
        print(f"{manifest_path}: all {len(models)} models already int8, nothing to do")
        _record(args, {"manifest": manifest_path})
        return
    dataset = store.load_dataset(args.dataset or paths["dataset"])
    if dataset.fingerprint() != manifest["dataset_fingerprint"]:
        raise ConfigError("dataset does not match the pool's fingerprint")
    out_dir = Path(args.output) if args.output else Path(args.out_dir) / "pool-int8"
    if out_dir.resolve() == manifest_path.parent.resolve():
        raise ConfigError("--output must differ from the source pool directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    xp, yp = dataset.split("pruning")
    changed = 0
    for entry in poolgen.ok_entries(manifest):
        model = models[entry["model_id"]]
        if not model.is_quantized:
            model = quantizer.quantize_model(model, xp[:poolgen.CALIBRATION_SIZE])
            model.metadata["pruning_accuracy"] = nncore.accuracy(model, xp, yp)
            changed += 1
        entry["file_size"] = store.save_model(model, out_dir / entry["path"])
        entry["dense_f32_size"] = len(store.model_bytes(model, dense_f32=True))
        entry["pruning_accuracy"] = model.metadata["pruning_accuracy"]
        entry["quantized"] = True
    out = out_dir / "manifest.json"
    store.write_json(out, manifest)
    print(f"quantized {changed} models into {out}")
    _record(args, {"manifest": out})


def cmd_cluster(args):
    paths = _paths(args)
    manifest_path = Path(args.pool or paths["pool"])
    manifest, models = poolgen.load_pool(manifest_path)
    dataset = store.load_dataset(args.dataset or paths["dataset"])
    xp, _ = dataset.split("pruning")
    ids = sorted(models)
    accs = [next(e["pruning_accuracy"] for e in manifest["entries"] if e["model_id"] == m) for m in ids]
    matrix = ensel.build_cluster_matrix(ensel.predict_pool([models[m] for m in ids], xp))
    assignment = ensel.cluster_pool(matrix, args.k, args.seed, accs, ids)
    doc = {"pool": str(manifest_path.resolve()), "seed": args.seed, **assignment.to_dict()}
    out = Path(args.output) if args.output else paths["cluster"]
    store.write_json(out, doc)
    for c in assignment.cluster_ranking():
        print(f"cluster {c}: mean acc {assignment.cluster_accuracy[c]:.4f} members {assignment.members[c]}")
    _record(args, {"cluster": out})


def cmd_select(args):
    paths = _paths(args)
    cluster_path = Path(args.cluster or paths["cluster"])
    doc = store.read_json(cluster_path)
    assignment = ensel.ClusterAssignment.from_dict(doc)
    chosen = ensel.select(assignment, args.strategy, args.ensemble_size)
    manifest_path = Path(doc["pool"])
    manifest = store.read_json(manifest_path)
    by_id = {e["model_id"]: e for e in manifest["entries"]}
    deployment = {
        "strategy": args.strategy,
        "k": assignment.k,
        "model_ids": chosen,
        "paths": [str((manifest_path.parent / by_id[m]["path"]).resolve()) for m in chosen],
        "pool": str(manifest_path),
    }
    out = Path(args.output) if args.output else paths["deployment"]
    store.write_json(out, deployment)
    print(f"{args.strategy}: selected {chosen}")
    _record(args, {"deployment": out})


def _model_paths(spec: str) -> list[str]:
    if spec.endswith(".json") and "," not in spec:
        doc = store.read_json(spec)
        if "paths" in doc:
            return doc["paths"]
        if "entries" in doc:
            base = Path(spec).parent
            return [str(base / e["path"]) for e in doc["entries"] if e["status"] == "ok"]
    return spec.split(",")


def cmd_eval(args):
    paths = _paths(args)
    dataset = store.load_dataset(args.dataset or paths["dataset"])
    x, y = dataset.split(args.split)
    member_paths = _model_paths(args.models or str(paths["deployment"]))
    members = voter.load_members(member_paths)
    acc, _ = voter.evaluate_ensemble(members, x, y, soft=args.soft)
    member_acc = [nncore.accuracy(m, x, y) for m in members]
    result = {"split": args.split, "n_samples": int(len(y)), "ensemble_accuracy": acc,
              "members": [{"path": p, "accuracy": a} for p, a in zip(member_paths, member_acc)],
              "voting": "soft" if args.soft else "hard"}
    print(f"ensemble ({len(members)} models, {result['voting']} vote) accuracy on {args.split}: {acc:.4f}")
    for p, a in zip(member_paths, member_acc):
        print(f"  member {Path(p).name}: {a:.4f}")
    baseline = Path(args.baseline) if args.baseline else paths["baseline"]
    if baseline.exists():
        base_models = voter.load_members(_model_paths(str(baseline)))
        result["baseline_accuracy"] = nncore.accuracy(base_models[0], x, y)
        print(f"baseline accuracy on {args.split}: {result['baseline_accuracy']:.4f}")
    pool = paths["pool"]
    if pool.exists():
        pool_acc = [nncore.accuracy(m, x, y) for m in voter.load_members(_model_paths(str(pool)))]
        result["pool_median_accuracy"] = float(np.median(pool_acc))
        print(f"pool median accuracy on {args.split}: {result['pool_median_accuracy']:.4f}")
    out = paths["reports"] / f"eval-{args.split}.json"
    store.write_json(out, result)
    _record(args, {"report": out})


def cmd_worker(args):
    config = edgenet.NodeConfig.from_file(args.config)
    if args.listen:
        config.listen = args.listen
    server = edgenet.serve_worker(config)
    print(f"worker {config.node_id} listening on {server.address} with {len(server.models)} models",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_master(args):
    paths = _paths(args)
    dataset_path = args.dataset or paths["dataset"]
    dataset = store.load_dataset(dataset_path) if Path(dataset_path).exists() else None
    report = edgenet.run_master(args.nodes.split(","), args.samples, dataset=dataset,
                                split=args.split, timeout=args.timeout)
    out = paths["reports"] / f"master-{args.samples}.json"
    store.write_json(out, report.to_dict())
    print(render_latency_table([report.to_dict()]))
    if report.accuracy is not None:
        print(f"final accuracy: {report.accuracy:.4f}")
    _record(args, {"report": out})


def render_latency_table(reports: list[dict]) -> str:
    nodes = sorted({n for r in reports for n in r["node_latency_ms"]})
    header = ["Samples", *[f"{n} (ms)" for n in nodes], "End-to-end (ms)", "Accuracy"]
    rows = []
    for r in sorted(reports, key=lambda r: r["n_samples"]):
        acc = r.get("accuracy")
        rows.append([str(r["n_samples"]), *[f"{r['node_latency_ms'].get(n, float('nan')):.2f}" for n in nodes],
                     f"{r['end_to_end_ms']:.2f}", "-" if acc is None else f"{acc:.4f}"])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def cmd_report(args):
    run_dir = Path(args.run_dir or args.out_dir)
    reports_dir = run_dir / "reports"
    masters = [store.read_json(p) for p in sorted(reports_dir.glob("master-*.json"))]
    evals = {p.stem: store.read_json(p) for p in sorted(reports_dir.glob("eval-*.json"))}
    summary = {"latency": [{k: r[k] for k in ("n_samples", "node_latency_ms", "end_to_end_ms", "accuracy")}
                           for r in masters],
               "evaluation": evals}
    store.write_json(reports_dir / "summary.json", summary)
    if masters:
        print("Inference time per request")
        print(render_latency_table(masters))
    for name, ev in evals.items():
        line = f"{name}: ensemble {ev['ensemble_accuracy']:.4f}"
        if "baseline_accuracy" in ev:
            line += f"  baseline {ev['baseline_accuracy']:.4f}"
        if "pool_median_accuracy" in ev:
            line += f"  pool median {ev['pool_median_accuracy']:.4f}"
        print(line)
    if not masters and not evals:
        print(f"no reports under {reports_dir}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="runs/default")
    common.add_argument("--log-level", default=os.environ.get("P2E_LOG", "WARNING"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="prune2edge", description="Pruned int8 ensembles for edge inference.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--kind", choices=["blobs", "moons", "spiral"], default="blobs")
    p.add_argument("--n-samples", type=int, default=27000)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--n-features", type=int, default=2)
    p.add_argument("--noise", type=float, default=2.0)
    p.add_argument("--path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-pool", parents=[common], help="train a pool of pruned models")
    p.add_argument("--size", type=int, default=20)
    p.add_argument("--dataset")
    p.add_argument("--pool-dir")
    p.add_argument("--hidden", default=",".join(map(str, poolgen.DEFAULT_HIDDEN)))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--no-quant", action="store_true")
    p.set_defaults(func=cmd_train_pool)

    p = sub.add_parser("quantize", parents=[common], help="write an int8 copy of a float pool")
    p.add_argument("--pool")
    p.add_argument("--dataset")
    p.add_argument("--output", help="directory for the int8 pool (default <out-dir>/pool-int8)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("cluster", parents=[common], help="k-means clustering of pool members")
    p.add_argument("--pool")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--output")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("select", parents=[common], help="pick ensemble members from clusters")
    p.add_argument("--strategy", choices=list(ensel.STRATEGIES), default="accuracy-first")
    p.add_argument("--ensemble-size", type=int, default=3)
    p.add_argument("--cluster")
    p.add_argument("--output")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", parents=[common], help="evaluate a max-vote ensemble")
    p.add_argument("--models", help="deployment/pool manifest or comma-separated model files")
    p.add_argument("--split", choices=["train", "pruning", "test"], default="test")
    p.add_argument("--dataset")
    p.add_argument("--baseline")
    p.add_argument("--soft", action="store_true", help="sum probabilities instead of hard votes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("worker", parents=[common], help="run an inference worker node")
    p.add_argument("--config", required=True)
    p.add_argument("--listen")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("master", parents=[common], help="coordinate worker nodes")
    p.add_argument("--nodes", required=True, help="comma-separated host:port list")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--timeout", type=float, default=edgenet.DEFAULT_TIMEOUT)
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("report", parents=[common], help="summarise latency and accuracy reports")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Prune2EdgeError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error [E_CONFIG]: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
