"""``cortexforge`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/numeric error,
4 network error.
"""

import argparse
import contextlib
import csv
import logging
import os
import sys

import numpy as np

from cortexforge import checkpoint
from cortexforge.config import ConfigKeyError, RunConfig
from cortexforge.data import (
    DataError,
    Dataset,
    assemble_eval_set,
    fit_whitening,
    ingest,
    load_rotation_sequences,
    rescale_for_display,
    write_pnm,
)
from cortexforge.distrib.replica import ReplicaAbort
from cortexforge.netcore import ConfigError, GeometryError, init_network
from cortexforge.optim import OptimizationError, train_local

log = logging.getLogger("cortexforge")

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME, EXIT_NETWORK = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def load_dir(path, net_cfg, label=None):
    """Ingest a directory, using its index.tsv when present."""
    if not path:
        raise UsageError("an image directory is required")
    index = os.path.join(path, "index.tsv")
    h, w, c = net_cfg.input_shape
    ds = ingest(path, index if os.path.exists(index) else None, (h, w), channels=c)
    if label is not None:
        ds.labels[:] = label
    return ds


def _train_data(cfg, net_cfg):
    train_dir = cfg["data.train_dir"]
    if not train_dir:
        raise UsageError("data.train_dir must be set in the config")
    index = cfg["data.train_index"] or None
    if index is None and os.path.exists(os.path.join(train_dir, "index.tsv")):
        index = os.path.join(train_dir, "index.tsv")
    h, w, c = net_cfg.input_shape
    return ingest(train_dir, index, (h, w), channels=c)


def _prepare(cfg, net_cfg, ds):
    """Seeded initial network and (whitened) training images."""
    net = init_network(net_cfg, cfg["run.seed"])
    images = ds.images
    if cfg["data.whiten"]:
        net.whitening = fit_whitening(ds, floor=cfg["data.whiten_floor"], seed=cfg["run.seed"])
        images = net.whitening.apply(images)
    return net, images


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "objective", "wall_ms"])
        for row in trace:
            step, value, wall = row[-3], row[-2], row[-1]
            w.writerow([step, repr(float(value)), f"{wall:.3f}"])


def _eval_set(cfg, net, args):
    pos = load_dir(args.pos_dir or cfg["eval.pos_dir"], net.config, label=1)
    neg = load_dir(args.neg_dir or cfg["eval.neg_dir"], net.config, label=0)
    ratio = args.ratio if getattr(args, "ratio", None) is not None else cfg["eval.ratio"]
    return assemble_eval_set(pos, neg, ratio, total=cfg["eval.total"] or None, seed=cfg["run.seed"])


def _pnm_name(stem, img):
    return stem + (".ppm" if np.asarray(img).shape[-1] == 3 else ".pgm")


def _out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = _config(args)
    if args.steps is not None:
        cfg.set("sgd.max_steps", args.steps)
    out = _out(args)
    cfg.write(out)
    net_cfg = cfg.network_config()
    ds = _train_data(cfg, net_cfg)
    net, images = _prepare(cfg, net_cfg, ds)
    metrics = os.path.join(out, "metrics.csv")
    if args.distributed:
        from cortexforge.distrib import run_async_training

        final, info = run_async_training(images, net_cfg, cfg.async_config(), seed=cfg["run.seed"],
                                         mode=cfg["async.mode"], init=net,
                                         endpoints=cfg.endpoints() or None)
        trace = info["trace"]
        _write_trace(metrics, trace)
        log.info("shard versions: %s", info["shard_versions"])
    else:
        final, trace = train_local(images, net, cfg.sgd_config(), metrics_path=metrics,
                                   progress_every=100)
    checkpoint.save(os.path.join(out, "checkpoint.lsae"), final)
    if trace:
        from cortexforge.plotting import plot_trace

        plot_trace(os.path.join(out, "metrics.png"), trace)
    log.info("wrote %s", os.path.join(out, "checkpoint.lsae"))
    return 0


def cmd_serve_params(args):
    from cortexforge.distrib.partition import partition_parameters
    from cortexforge.distrib.shard import ShardActor, ShardState
    from cortexforge.distrib.sockets import parse_endpoint
    from cortexforge.distrib.training import serve_shard

    cfg = _config(args)
    net = init_network(cfg.network_config(), cfg["run.seed"])
    plan = partition_parameters(net.config, cfg["async.n_shards"])
    if not 0 <= args.shard_id < plan.n_partitions:
        raise UsageError(f"--shard-id must lie in [0, {plan.n_partitions})")
    fragments = plan.split(net.learnable())
    state = ShardState(args.shard_id, {k: fragments[k] for k in plan.keys_for(args.shard_id)})
    host, port = parse_endpoint(args.listen)

    def ready(bound):
        print(f"shard {args.shard_id} listening on {host}:{bound}", file=sys.stderr, flush=True)

    serve_shard(ShardActor(state, cfg["sgd.learning_rate"]), host, port, ready=ready)
    return 0


def cmd_worker(args):
    from cortexforge.distrib.partition import partition_parameters
    from cortexforge.distrib.replica import replica_run, template_params

    cfg = _config(args)
    net_cfg = cfg.network_config()
    net, images = _prepare(cfg, net_cfg, _train_data(cfg, net_cfg))
    n = cfg["async.n_replicas"]
    if not 0 <= args.replica_id < n:
        raise UsageError(f"--replica-id must lie in [0, {n})")
    endpoints = [e.strip() for e in args.connect.split(",") if e.strip()]
    plan = partition_parameters(net_cfg, cfg["async.n_shards"])
    trace = replica_run(args.replica_id, images[args.replica_id::n], cfg.async_config(),
                        endpoints, template_params(net), plan)
    if args.out:
        _write_trace(os.path.join(_out(args), f"metrics_replica{args.replica_id}.csv"), trace)
    return 0


def cmd_eval(args):
    from cortexforge import evaluate
    from cortexforge.plotting import plot_curve, plot_histogram

    cfg = _config(args)
    out = _out(args)
    cfg.write(out)
    net = checkpoint.load(args.checkpoint)
    eval_set = _eval_set(cfg, net, args)
    report = evaluate.evaluate_network(net, eval_set, cfg["eval.bins"], cfg["eval.hist_neurons"])
    evaluate.write_eval_report(out, report)
    for neuron, (edges, pos, neg) in report.histograms.items():
        plot_histogram(os.path.join(out, f"hist_{neuron}.png"), edges, pos, neg,
                       title=f"neuron {neuron}")
    best = report.best
    print(f"best neuron {best.neuron_index}: accuracy {best.accuracy:.4f} "
          f"(all-negative {report.baselines['all_negative']:.4f})")

    stimuli = eval_set.images[eval_set.labels == 1][:cfg["eval.n_stimuli"]]
    curves = [("scale", cfg.floats("eval.scales")),
              ("translate-x", cfg.floats("eval.shifts")),
              ("translate-y", cfg.floats("eval.shifts"))]
    for axis, values in curves:
        if len(stimuli) and values:
            curve = evaluate.invariance_curve(net, best.neuron_index, stimuli, axis, values)
            evaluate.write_invariance(os.path.join(out, f"invariance_{axis}.csv"), curve)
            plot_curve(os.path.join(out, f"invariance_{axis}.png"), curve)
    if cfg["eval.rotation_dir"]:
        h, w, c = net.config.input_shape
        seqs = load_rotation_sequences(cfg["eval.rotation_dir"], channels=c, target_size=(h, w))
        n_frames = min(len(s) for s in seqs)
        curve = evaluate.invariance_curve(net, best.neuron_index, seqs, "rotation-frame",
                                          list(range(n_frames)))
        evaluate.write_invariance(os.path.join(out, "invariance_rotation-frame.csv"), curve)
        plot_curve(os.path.join(out, "invariance_rotation-frame.png"), curve)
    return 0


def cmd_visualize(args):
    from cortexforge import evaluate
    from cortexforge.plotting import image_grid

    cfg = _config(args)
    out = _out(args)
    cfg.write(out)
    net = checkpoint.load(args.checkpoint)
    if args.mode == "top-stimuli":
        eval_set = _eval_set(cfg, net, args)
        idx, resp = evaluate.top_stimuli(net, args.neuron, eval_set, args.k)
        with open(os.path.join(out, "top_stimuli.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "index", "response", "label", "source_path"])
            for rank, (i, r) in enumerate(zip(idx, resp)):
                w.writerow([rank, int(i), repr(float(r)), int(eval_set.labels[i]),
                            eval_set.paths[i]])
                write_pnm(os.path.join(out, _pnm_name(f"top_{rank:03d}", eval_set.images[i])),
                          eval_set.images[i])
        image_grid(os.path.join(out, "top_stimuli.png"), eval_set.images[idx])
    else:
        x, trace = evaluate.optimal_stimulus(net, args.neuron, seed=cfg["run.seed"])
        shown = rescale_for_display(x)
        write_pnm(os.path.join(out, _pnm_name("optimal_stimulus", shown)), shown)
        image_grid(os.path.join(out, "optimal_stimulus.png"), [shown], ncols=1)
        with open(os.path.join(out, "optimal_trace.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "response"])
            for i, v in enumerate(trace):
                w.writerow([i, repr(v)])
        print(f"optimal stimulus response {trace[-1]:.6g} (start {trace[0]:.6g}, "
              f"norm {np.linalg.norm(x):.9f})")
    return 0


def cmd_baseline(args):
    from cortexforge import evaluate
    from cortexforge.plotting import image_grid

    cfg = _config(args)
    out = _out(args)
    cfg.write(out)
    net = checkpoint.load(args.checkpoint)
    eval_set = _eval_set(cfg, net, args)
    pool = load_dir(args.train_dir or cfg["data.train_dir"], net.config)
    if net.whitening is not None:
        pool = Dataset(net.whitening.apply(pool.images))
        eval_set = Dataset(net.whitening.apply(eval_set.images), eval_set.labels, eval_set.paths)
    n_filters = args.n_filters or cfg["eval.n_filters"]
    best, filt = evaluate.linear_filter_baseline(pool, eval_set, n_filters, cfg["run.seed"])
    with open(os.path.join(out, "baseline_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_filters", "accuracy", "filter_index", "threshold", "polarity"])
        w.writerow([n_filters, repr(best.accuracy), best.neuron_index, repr(best.best_threshold),
                    best.polarity])
    shown = rescale_for_display(filt)
    write_pnm(os.path.join(out, _pnm_name("best_filter", filt)), shown)
    image_grid(os.path.join(out, "best_filter.png"), [shown], ncols=1)
    print(f"best linear filter accuracy {best.accuracy:.4f} over {n_filters} filters")
    return 0


def cmd_sweep(args):
    from cortexforge import evaluate
    from cortexforge.plotting import plot_sweep

    cfg = _config(args)
    out = _out(args)
    cfg.write(out)
    values = [int(v) for v in (args.values or cfg["sweep.values"]).split(",") if v.strip()]
    cache = {}

    def train_and_eval(axis, value):
        net_cfg = cfg.network_config(**{axis: value})
        if "data" not in cache:
            cache["data"] = _train_data(cfg, net_cfg)
        net, images = _prepare(cfg, net_cfg, cache["data"])
        trained, _ = train_local(images, net, cfg.sgd_config())
        if "eval" not in cache:
            cache["eval"] = _eval_set(cfg, trained, args)
        return evaluate.evaluate_network(trained, cache["eval"]).best.accuracy

    rows = evaluate.sensitivity_sweep(args.axis, values, train_and_eval)
    evaluate.write_sweep(os.path.join(out, f"sweep_{args.axis}.csv"), args.axis, rows)
    if rows:
        plot_sweep(os.path.join(out, f"sweep_{args.axis}.png"), args.axis, rows)
    return 0


def cmd_suphead(args):
    from cortexforge.optim import SgdConfig
    from cortexforge.plotting import plot_arms
    from cortexforge.suphead import (
        CompareBudgets,
        FineTuneConfig,
        HeadConfig,
        append_supervised_report,
        compare_init,
    )

    cfg = _config(args)
    out = _out(args)
    cfg.write(out)
    net_cfg = cfg.network_config()
    data_dir = args.data_dir or cfg["suphead.data_dir"]
    ds = load_dir(data_dir, net_cfg)
    if (ds.labels < 0).any():
        raise DataError("suphead needs a labelled index.tsv")
    seed = cfg["run.seed"]
    budgets = CompareBudgets(
        pretrain=SgdConfig(cfg["suphead.pretrain_lr"], min(cfg["sgd.minibatch_size"], len(ds) // 2),
                           cfg["suphead.pretrain_steps"], seed),
        head=HeadConfig(cfg["suphead.head_lr"], cfg["suphead.head_steps"], 32, seed),
        finetune=FineTuneConfig(cfg["suphead.finetune_lr"], cfg["suphead.finetune_steps"], 0, seed),
    )
    res = compare_init(ds, net_cfg, budgets, seed=seed)
    path = os.path.join(out, "supervised_report.csv")
    steps = budgets.head.steps + budgets.finetune.steps
    for arm in ("pretrained", "random"):
        train_acc, val_acc, _ = res[arm]
        append_supervised_report(path, arm, train_acc, val_acc, steps, seed)
        print(f"{arm}: train {train_acc:.4f} val {val_acc:.4f}")
    plot_arms(os.path.join(out, "supervised_report.png"), res)
    return 0


def cmd_toy_data(args):
    from cortexforge.toydata import make_class_dataset, write_corpus

    write_corpus(args.out, n_faces=args.faces, n_distractors=args.distractors,
                 n_unlabeled=args.unlabeled, size=args.size, seed=args.seed)
    classes = make_class_dataset(args.per_class, args.size, args.seed)
    folder = os.path.join(args.out, "classes")
    os.makedirs(folder, exist_ok=True)
    with open(os.path.join(folder, "index.tsv"), "w", encoding="utf-8") as fh:
        for i, (img, label) in enumerate(zip(classes.images, classes.labels)):
            name = f"class_{i:05d}.pgm"
            write_pnm(os.path.join(folder, name), img)
            fh.write(f"{name}\t{int(label)}\n")
    print(f"wrote toy corpus under {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="cortexforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="unsupervised training (local or distributed)")
    t.add_argument("--config")
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--local", action="store_true", default=True)
    mode.add_argument("--distributed", action="store_true")
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("serve-params", help="run one parameter shard")
    s.add_argument("--config")
    s.add_argument("--shard-id", type=int, required=True)
    s.add_argument("--listen", default="127.0.0.1:0")
    s.set_defaults(func=cmd_serve_params)

    w = sub.add_parser("worker", help="run one model replica against running shards")
    w.add_argument("--config")
    w.add_argument("--replica-id", type=int, required=True)
    w.add_argument("--connect", required=True, help="comma-separated host:port per shard")
    w.add_argument("--out")
    w.set_defaults(func=cmd_worker)

    for name, func, helptext in (("eval", cmd_eval, "best-neuron evaluation report"),
                                 ("visualize", cmd_visualize, "top stimuli / optimal stimulus"),
                                 ("baseline", cmd_baseline, "best-linear-filter baseline")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--config")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--pos-dir")
        e.add_argument("--neg-dir")
        e.add_argument("--ratio", type=float)
        e.add_argument("--out", required=True)
        e.set_defaults(func=func)
        if name == "visualize":
            e.add_argument("--neuron", type=int, default=0)
            e.add_argument("--mode", choices=("top-stimuli", "optimal"), default="top-stimuli")
            e.add_argument("--k", type=int, default=48)
        if name == "baseline":
            e.add_argument("--train-dir")
            e.add_argument("--n-filters", type=int)

    sw = sub.add_parser("sweep", help="receptive-field / map-count sensitivity sweep")
    sw.add_argument("--config")
    sw.add_argument("--axis", choices=("rf_size", "num_maps"), required=True)
    sw.add_argument("--values", help="comma-separated integers")
    sw.add_argument("--pos-dir")
    sw.add_argument("--neg-dir")
    sw.add_argument("--ratio", type=float)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)

    sh = sub.add_parser("suphead", help="pretrained vs random-init supervised comparison")
    sh.add_argument("--config")
    sh.add_argument("--data-dir")
    sh.add_argument("--out", required=True)
    sh.set_defaults(func=cmd_suphead)

    td = sub.add_parser("toy-data", help="write the procedural face/distractor corpus")
    td.add_argument("--out", required=True)
    td.add_argument("--size", type=int, default=16)
    td.add_argument("--faces", type=int, default=500)
    td.add_argument("--distractors", type=int, default=900)
    td.add_argument("--unlabeled", type=int, default=2000)
    td.add_argument("--per-class", type=int, default=50)
    td.add_argument("--seed", type=int, default=0)
    td.set_defaults(func=cmd_toy_data)
    return p


def _thread_limit():
    n = int(os.environ.get("CORTEXFORGE_THREADS", "0") or 0)
    if n > 0:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(n)
    return contextlib.nullcontext()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigKeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConnectionError, TimeoutError, ReplicaAbort) as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (OptimizationError, FloatingPointError, GeometryError, ConfigError, ValueError,
            RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
