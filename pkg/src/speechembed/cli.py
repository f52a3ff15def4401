"""Command-line entry point: ``speechembed <subcommand>``."""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, bench, distill, evaluation, zoo


def _seed(args):
    env = os.environ.get("FRILL_SEED")
    return int(env) if env not in (None, "") else args.seed


def _emit(obj, out=None):
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + ("" if text.endswith("\n") else "\n"))
    else:
        print(text)


def cmd_grid(args):
    configs = zoo.enumerate_grid(embedding_dim=args.embedding_dim)
    if args.list:
        _emit("\n".join(c.name for c in configs), args.out)
        return
    manifest = [{"name": c.name, "config": c.to_dict(), "param_count": zoo.count_params(c)}
                for c in configs]
    _emit(manifest, args.out)


def cmd_build(args):
    config = zoo.ModelConfig.parse(args.config, embedding_dim=args.embedding_dim)
    model = zoo.build(config, _seed(args))
    size = bench.save(model, args.out)
    _emit({"config": config.name, "path": str(args.out), "size_bytes": size,
           "param_count": zoo.param_count(model)})


def cmd_distill(args):
    config = zoo.ModelConfig.parse(args.config, embedding_dim=args.embedding_dim)
    data = distill.read_dataset(args.data)
    seed = _seed(args)
    topology = zoo.toy_topology() if args.toy else None
    model = zoo.build(config, seed, topology=topology, for_training=True)
    cfg = distill.TrainConfig(batch_size=args.batch_size, lr0=args.lr, epochs=args.epochs,
                              seed=seed, teacher_dim=data[0].target.shape[0],
                              max_steps=args.max_steps)
    result = distill.train(model, data, cfg)
    size = bench.save(result.model, args.out)
    if args.history:
        Path(args.history).write_text("step,loss\n" + "".join(
            f"{i},{loss!r}\n" for i, loss in enumerate(result.loss_history)))
    _emit({"config": config.name, "steps": result.steps, "initial_loss": result.loss_history[0],
           "final_loss": result.loss_history[-1], "path": str(args.out), "size_bytes": size})


def _task_paths(specs):
    out = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        out[name] = path
    return out


def cmd_eval(args):
    results = []
    for task, path in _task_paths(args.embeddings).items():
        results.append(evaluation.best_accuracy(evaluation.read_table(path), task))
    score = None
    if args.teacher_acc:
        teacher = json.loads(Path(args.teacher_acc).read_text())
        student = {r.task_name: 100.0 * r.accuracy for r in results}
        score = evaluation.aggregate_quality(student, teacher)
    out = {"tasks": [r.__dict__ for r in results]}
    if score is not None:
        out.update(score.to_dict())
    _emit(out, args.out)
    if args.table:
        rows = {"student": {r.task_name: 100.0 * r.accuracy for r in results}}
        print(evaluation.format_table(rows, [r.task_name for r in results]), file=sys.stderr)


def cmd_bench(args):
    if args.threads != 1:
        raise ValueError("latency benchmarking is single-threaded; --threads must be 1")
    if args.model:
        model = bench.load(args.model)
        size = bench.model_size(args.model)
    else:
        config = zoo.ModelConfig.parse(args.config, embedding_dim=args.embedding_dim)
        model = zoo.build(config, _seed(args))
        size = len(bench.serialize(model))
    spec = np.random.default_rng(_seed(args)).standard_normal(model.input_shape).astype(np.float32)
    report = bench.measure_latency(model, spec, warmup=args.warmup, runs=args.runs)
    out = report.to_dict()
    out["size_bytes"] = size
    _emit(out, args.out)


def cmd_frontier(args):
    records = analysis.read_records(args.records)
    front = analysis.frontier(records)
    if args.out:
        analysis.write_records(args.out, front)
    else:
        print("config,quality,latency_ms,size_bytes")
        for r in front:
            print(f"{r.config.name},{r.quality!r},{r.latency_ms!r},{r.size_bytes}")


def cmd_regress(args):
    results = analysis.regress_records(analysis.read_records(args.records))
    _emit(analysis.regression_json(results), args.out)


class _Parser(argparse.ArgumentParser):
    """Usage errors are reported as JSON like every other failure."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message, "command": self.prog}),
              file=sys.stderr)
        self.exit(2)


def build_parser():
    p = _Parser(prog="speechembed", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    g = add("grid", cmd_grid, "enumerate the 144 hyperparameter configurations")
    g.add_argument("--list", action="store_true", help="print config names only")
    g.add_argument("--embedding-dim", type=int, default=2048)
    g.add_argument("--out")

    b = add("build", cmd_build, "build a seeded model and write a model file")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--embedding-dim", type=int, default=2048)
    b.add_argument("--out", required=True)

    d = add("distill", cmd_distill, "distill a dataset file into a student model")
    d.add_argument("--config", required=True)
    d.add_argument("--data", required=True, help="binary dataset file or directory of CSV pairs")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--epochs", type=int, default=50)
    d.add_argument("--batch-size", type=int, default=128)
    d.add_argument("--lr", type=float, default=1e-4)
    d.add_argument("--max-steps", type=int)
    d.add_argument("--embedding-dim", type=int, default=2048)
    d.add_argument("--toy", action="store_true", help="use the 2-block toy trunk")
    d.add_argument("--history", help="write per-step loss CSV here")

    e = add("eval", cmd_eval, "probe embeddings and compute aggregate quality")
    e.add_argument("--embeddings", action="append", required=True,
                   help="embedding table CSV, optionally as TASK=PATH; repeatable")
    e.add_argument("--teacher-acc", help="JSON mapping task -> teacher accuracy (percent)")
    e.add_argument("--table", action="store_true", help="also print an aligned table to stderr")
    e.add_argument("--out")

    n = add("bench", cmd_bench, "measure single-threaded latency and serialized size")
    src = n.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--model")
    n.add_argument("--runs", type=int, default=bench.MIN_RUNS)
    n.add_argument("--warmup", type=int, default=bench.DEFAULT_WARMUP)
    n.add_argument("--threads", type=int, default=1)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--embedding-dim", type=int, default=2048)
    n.add_argument("--out")

    f = add("frontier", cmd_frontier, "quality/latency frontier of benchmark records")
    f.add_argument("--records", required=True)
    f.add_argument("--out")

    r = add("regress", cmd_regress, "standardized regression of quality/latency/size")
    r.add_argument("--records", required=True)
    r.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error
        print(json.dumps({"error": type(e).__name__, "message": str(e),
                          "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
