"""Command-line pipeline: profile the host, train predictors, predict costs,
select primitives for a network, transfer models across platforms, and emit
plot-ready reports.

Exit codes: 0 success, 1 usage, 2 I/O, 3 validation/coverage, 4 training
divergence. Every run writes a manifest JSON describing inputs, outputs, the
seed, and per-stage wall-clock durations.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

from . import __version__
from .core import (
    Assignment,
    CoverageError,
    InvalidConfigError,
    NetworkGraph,
    PrimselError,
    TrainingDivergedError,
    get_spec,
    total_cost,
)
from . import perfmodel, profiler, selector, transfer

DATA_DIR_ENV = "PRIMSEL_DATA_DIR"


class UsageError(PrimselError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _resolve(path: str | None) -> str | None:
    """Relative paths land in $PRIMSEL_DATA_DIR when it is set."""
    if path is None:
        return None
    base = os.environ.get(DATA_DIR_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


class Manifest:
    """Run record: command, argument echo, seed, artifact paths, durations."""

    def __init__(self, command: str, argv: list[str], seed: int | None):
        self.data = {
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "version": __version__,
            "inputs": {},
            "outputs": {},
            "results": {},
            "durations": {},
        }
        self._marks: dict[str, float] = {}

    def start(self, stage: str):
        self._marks[stage] = time.perf_counter()

    def stop(self, stage: str):
        self.data["durations"][stage] = time.perf_counter() - self._marks[stage]

    def write(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2)
            fh.write("\n")


def _manifest_path(args, default_stem: str) -> str:
    if getattr(args, "manifest", None):
        return _resolve(args.manifest)
    out = getattr(args, "out", None)
    if out:
        return _resolve(out) + ".manifest.json"
    return _resolve(f"{default_stem}.manifest.json")


def _train_config(args, kind: str) -> perfmodel.TrainConfig:
    defaults = {
        "nn2": (0.001, 1e-5),
        "dlt": (0.001, 1e-5),
        "nn1": (0.003, 0.0),
        "linear": (0.001, 0.0),
    }[kind]
    lr = args.lr if args.lr is not None else defaults[0]
    wd = args.weight_decay if args.weight_decay is not None else defaults[1]
    return perfmodel.TrainConfig(
        learning_rate=lr, weight_decay=wd, batch_size=args.batch_size,
        patience=args.patience, seed=args.seed, max_updates=args.max_updates)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_profile(args, argv) -> int:
    man = Manifest("profile", argv, args.seed)
    out_csv = _resolve(args.out)
    dlt_csv = _resolve(args.dlt_out)
    if args.grid == "desk":
        grid = profiler.desk_grid()
    else:
        with open(_resolve(args.grid)) as fh:
            spec = json.load(fh)
        grid = profiler.generate_grid(
            [tuple(t) for t in spec["triplets"]], spec["f_set"], spec["s_set"])
    if not args.no_pin:
        profiler.pin_to_one_cpu()
    man.data["inputs"]["grid"] = args.grid
    man.data["inputs"]["configs"] = len(grid)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    man.start("profile")
    dataset, dlt = profiler.build_dataset(
        grid, reps=args.reps, warmups=args.warmups, seed=args.seed,
        out_csv=out_csv, dlt_csv=dlt_csv, progress=progress)
    man.stop("profile")
    man.data["outputs"]["dataset"] = out_csv
    man.data["outputs"]["dlt"] = dlt_csv
    man.data["results"]["records"] = len(dataset)
    man.data["results"]["dlt_records"] = len(dlt)
    man.write(_manifest_path(args, "profile"))
    print(f"profiled {len(dataset)} configurations, "
          f"{len(dlt)} transform sizes -> {out_csv}")
    return 0


def _cmd_train(args, argv) -> int:
    man = Manifest("train", argv, args.seed)
    out_path = _resolve(args.out)
    kind = args.kind
    cfg = _train_config(args, kind)
    man.start("load")
    if kind == "dlt":
        records = profiler.load_dlt_csv(_resolve(args.dlt_data))
        split = perfmodel.split_dataset(records, seed=args.seed)
        man.data["inputs"]["dlt_data"] = args.dlt_data
    else:
        ds = profiler.ProfileDataset.load_csv(_resolve(args.data))
        split = perfmodel.split_dataset(ds, seed=args.seed)
        man.data["inputs"]["data"] = args.data
    man.stop("load")
    man.start("train")
    if kind == "nn1":
        models = []
        for prim in split.train.primitives:
            try:
                models.append(perfmodel.train_model("nn1", split, cfg, target=prim))
            except perfmodel.SizeError:
                print(f"skipping {prim}: no defined training rows", file=sys.stderr)
        model: perfmodel.PerfModel | perfmodel.Nn1Ensemble = \
            perfmodel.Nn1Ensemble(models)
    else:
        model = perfmodel.train_model(kind, split, cfg)
    man.stop("train")
    perfmodel.save_model(model, out_path)
    man.data["outputs"]["model"] = args.out
    if isinstance(model, perfmodel.PerfModel):
        man.data["results"]["best_val_mdrae"] = model.train_echo.get("best_val_mdrae")
        man.data["results"]["updates"] = model.train_echo.get("updates")
    man.write(_manifest_path(args, "train"))
    print(f"trained {kind} model -> {out_path}")
    return 0


def _cmd_predict(args, argv) -> int:
    man = Manifest("predict", argv, None)
    net = NetworkGraph.load(_resolve(args.network))
    model = perfmodel.load_model(_resolve(args.model))
    man.start("predict")
    configs = [cfg for _, cfg in net.layers]
    table = perfmodel.predict_costs(model, configs)
    man.stop("predict")
    out_path = _resolve(args.out)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "k", "c", "im", "f", "s"] + table.columns)
        for i, (node, cfg) in enumerate(net.layers):
            row = [node, cfg.k, cfg.c, cfg.im, cfg.f, cfg.s]
            for j in range(len(table.columns)):
                row.append(repr(float(table.values[i, j]))
                           if table.defined[i, j] else "NA")
            w.writerow(row)
    man.data["inputs"].update({"network": args.network, "model": args.model})
    man.data["outputs"]["costs"] = args.out
    man.write(_manifest_path(args, "predict"))
    print(f"predicted costs for {len(configs)} layers -> {out_path}")
    return 0


def _solver_fn(name: str):
    return {"chain": selector.solve_chain, "pbqp": selector.solve_pbqp,
            "brute": selector.brute_force}[name]


def _cmd_select(args, argv) -> int:
    man = Manifest("select", argv, args.seed)
    net = NetworkGraph.load(_resolve(args.network))
    man.data["inputs"]["network"] = args.network

    man.start("costs")
    if args.costs == "model":
        if not args.model:
            raise UsageError("--costs model requires --model")
        model = perfmodel.load_model(_resolve(args.model))
        table = perfmodel.predict_costs(model, [cfg for _, cfg in net.layers])
        prim_costs = selector.network_cost_inputs(net, table)
        sizes = sorted({(net.config_of(v).c, net.config_of(v).im)
                        for _, v in net.edges})
        if args.dlt_model:
            dlt_model = perfmodel.load_model(_resolve(args.dlt_model))
            mats = perfmodel.predict_dlt(dlt_model, sizes)
            dlt_costs = dict(zip(sizes, mats))
        elif args.dlt_data:
            dlt_costs = {(r.c, r.im): r.matrix
                         for r in profiler.load_dlt_csv(_resolve(args.dlt_data))}
        else:
            dlt_costs = {}
    else:  # --costs profile
        if not args.data:
            raise UsageError("--costs profile requires --data")
        ds = profiler.ProfileDataset.load_csv(_resolve(args.data))
        dlt_records = (profiler.load_dlt_csv(_resolve(args.dlt_data))
                       if args.dlt_data else [])
        by_cfg, dlt_costs = selector.profile_cost_tables(ds, dlt_records)
        prim_costs = selector.network_cost_inputs(net, by_cfg)
    man.stop("costs")

    man.start("solve")
    graph = selector.build_cost_graph(net, prim_costs, dlt_costs)
    report = _solver_fn(args.solver)(graph)
    man.stop("solve")

    payload = selector.assignment_json(graph, report)
    if args.measure:
        man.start("measure")
        measured = _measure_network(net, reps=args.reps, seed=args.seed)
        man.stop("measure")
        chosen_measured = selector.assignment_json(
            measured, selector.SolveReport(
                _reprice(measured, report.assignment.choice),
                report.method, report.optimal))
        optimal_measured = _solver_fn(args.solver)(measured)
        payload["measured_total_of_selection"] = \
            chosen_measured["total_cost"]
        payload["measured_total_of_measured_optimum"] = \
            optimal_measured.assignment.total_cost
        payload["inference_overhead"] = (
            chosen_measured["total_cost"]
            / optimal_measured.assignment.total_cost - 1.0
            if optimal_measured.assignment.total_cost > 0 else 0.0)
        man.data["results"]["measured"] = {
            k: payload[k] for k in ("measured_total_of_selection",
                                    "measured_total_of_measured_optimum",
                                    "inference_overhead")}
    print(json.dumps(payload, indent=2))
    if args.out:
        # the written artifact stays deterministic: no measured fields
        selector.save_assignment(graph, report, _resolve(args.out))
        man.data["outputs"]["assignment"] = args.out
    man.data["results"]["total_cost"] = payload["total_cost"]
    man.write(_manifest_path(args, "select"))
    return 0


def _reprice(graph, choice) -> Assignment:
    return Assignment(dict(choice), total_cost(graph, choice))


def _measure_network(net: NetworkGraph, reps: int, seed: int):
    """Profile every applicable primitive and transform size of a network and
    return the measured cost graph."""
    prim_costs: dict[str, dict[str, float]] = {}
    for idx, (node, cfg) in enumerate(net.layers):
        times = {}
        for pidx, prim in enumerate(profiler.PRIMITIVE_IDS):
            if not get_spec(prim).applicable(cfg):
                continue
            times[prim] = profiler.time_primitive(
                prim, cfg, reps=reps,
                seed=profiler.derive_seed(seed, idx, pidx))
        prim_costs[node] = times
    sizes = sorted({(net.config_of(v).c, net.config_of(v).im)
                    for _, v in net.edges})
    dlt_costs = {}
    for sidx, (c, im) in enumerate(sizes):
        rec = profiler.profile_layout_transforms(
            c, im, reps=reps, seed=profiler.derive_seed(seed, 2_000_000, sidx))
        dlt_costs[(c, im)] = rec.matrix
    return selector.build_cost_graph(net, prim_costs, dlt_costs)


def _cmd_transfer(args, argv) -> int:
    man = Manifest("transfer", argv, args.seed)
    model = perfmodel.load_model(_resolve(args.model))
    if not isinstance(model, perfmodel.PerfModel):
        raise InvalidConfigError("transfer needs a single model, not an ensemble")
    target = profiler.ProfileDataset.load_csv(_resolve(args.data))
    man.data["inputs"].update({"model": args.model, "data": args.data,
                               "fraction": args.fraction, "mode": args.mode})
    out_path = _resolve(args.out)
    man.start(args.mode)
    if args.mode == "factor":
        sample = transfer.sample_fraction(target, args.fraction, seed=args.seed)
        factors = transfer.fit_factors(model, sample)
        factors.save(out_path)
        man.data["results"]["samples"] = len(sample)
    else:  # finetune
        split = perfmodel.split_dataset(target, seed=args.seed)
        sample = transfer.sample_fraction(
            split.train, args.fraction, seed=args.seed)
        cfg = _train_config(args, "nn2")
        tuned = transfer.fine_tune(
            model, transfer.tiny_split(sample, split.test), cfg)
        perfmodel.save_model(tuned, out_path)
        test_mdrae, _ = perfmodel.evaluate_mdrae(tuned, split.test)
        man.data["results"]["test_mdrae"] = test_mdrae
        man.data["results"]["samples"] = len(sample)
        print(f"fine-tuned on {len(sample)} records; "
              f"target test MdRAE {test_mdrae:.4f}")
    man.stop(args.mode)
    man.data["outputs"]["out"] = args.out
    man.write(_manifest_path(args, "transfer"))
    print(f"{args.mode} -> {out_path}")
    return 0


def _cmd_report(args, argv) -> int:
    man = Manifest("report", argv, args.seed)
    model = perfmodel.load_model(_resolve(args.model))
    target = profiler.ProfileDataset.load_csv(_resolve(args.data))
    out_path = _resolve(args.out)
    man.data["inputs"].update({"model": args.model, "data": args.data})
    man.start("report")
    if args.what == "accuracy":
        split = perfmodel.split_dataset(target, seed=args.seed)
        overall, per_col = perfmodel.evaluate_mdrae(model, split.test)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["primitive", "mdrae"])
            for prim in target.primitives:
                if prim in per_col:
                    w.writerow([prim, repr(per_col[prim])])
            w.writerow(["__all__", repr(overall)])
        man.data["results"]["test_mdrae"] = overall
    else:  # transfer experiment
        if not isinstance(model, perfmodel.PerfModel):
            raise InvalidConfigError("transfer report needs a single model")
        fractions = [float(f) for f in args.fractions.split(",")]
        split = perfmodel.split_dataset(target, seed=args.seed)
        overhead_env = _load_overhead_inputs(args)
        rows = []
        for fi, frac in enumerate(fractions):
            for rep in range(args.repeats):
                sub_seed = profiler.derive_seed(args.seed, fi, rep)
                sample = transfer.sample_fraction(split.train, frac, seed=sub_seed)
                tiny = transfer.tiny_split(sample, split.test)
                cfg = _train_config(args, "nn2")
                cfg.seed = sub_seed
                tuned = transfer.fine_tune(model, tiny, cfg)
                ft_mdrae, _ = perfmodel.evaluate_mdrae(tuned, split.test)
                scratch = perfmodel.train_model("nn2", tiny, cfg)
                sc_mdrae, _ = perfmodel.evaluate_mdrae(scratch, split.test)
                rows.append([frac, rep, "finetune", repr(ft_mdrae),
                             _overhead_cell(tuned, overhead_env)])
                rows.append([frac, rep, "scratch", repr(sc_mdrae),
                             _overhead_cell(scratch, overhead_env)])
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "repeat", "mode", "mdrae",
                        "inference_overhead"])
            w.writerows(rows)
    man.stop("report")
    man.data["outputs"]["report"] = args.out
    man.write(_manifest_path(args, "report"))
    print(f"report -> {out_path}")
    return 0


def _load_overhead_inputs(args):
    """Measured cost graph for the report network, when all inputs are given:
    the network, its profiled primitive times, and the transform times on the
    target platform."""
    if not (args.network and args.net_data and args.net_dlt):
        return None
    net = NetworkGraph.load(_resolve(args.network))
    ds = profiler.ProfileDataset.load_csv(_resolve(args.net_data))
    dlt = profiler.load_dlt_csv(_resolve(args.net_dlt))
    by_cfg, dlt_costs = selector.profile_cost_tables(ds, dlt)
    measured = selector.build_cost_graph(
        net, selector.network_cost_inputs(net, by_cfg), dlt_costs)
    best = selector.solve_pbqp(measured)
    return net, measured, dlt_costs, best.assignment.total_cost


def _overhead_cell(model, env):
    """Inference-time increase of the model-guided assignment over the
    measured optimum, as a CSV cell ('NA' without network inputs)."""
    if env is None:
        return "NA"
    net, measured, dlt_costs, best_total = env
    table = perfmodel.predict_costs(model, [cfg for _, cfg in net.layers])
    graph = selector.build_cost_graph(
        net, selector.network_cost_inputs(net, table), dlt_costs)
    report = selector.solve_pbqp(graph)
    measured_total = total_cost(measured, report.assignment.choice)
    if best_total <= 0:
        return "NA"
    return repr(measured_total / best_total - 1.0)


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--patience", type=int, default=250)
    p.add_argument("--max-updates", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="primsel", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="profile primitives on this host")
    p.add_argument("--grid", default="desk",
                   help="'desk' or a JSON file with triplets/f_set/s_set")
    p.add_argument("--out", required=True, help="primitive dataset CSV")
    p.add_argument("--dlt-out", required=True, help="layout-transform CSV")
    p.add_argument("--reps", type=int, default=profiler.DEFAULT_REPS)
    p.add_argument("--warmups", type=int, default=profiler.DEFAULT_WARMUPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pin", action="store_true",
                   help="do not pin the process to one cpu")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--manifest")
    p.set_defaults(fn=_cmd_profile)

    p = sub.add_parser("train", help="train a performance model")
    p.add_argument("--kind", required=True,
                   choices=["nn1", "nn2", "dlt", "linear"])
    p.add_argument("--data", help="primitive dataset CSV")
    p.add_argument("--dlt-data", help="layout-transform CSV (kind dlt)")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--manifest")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="predict per-layer primitive costs")
    p.add_argument("--model", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("select", help="pick the fastest primitive per layer")
    p.add_argument("--network", required=True)
    p.add_argument("--costs", choices=["model", "profile"], default="model")
    p.add_argument("--model")
    p.add_argument("--dlt-model")
    p.add_argument("--data")
    p.add_argument("--dlt-data")
    p.add_argument("--solver", choices=["chain", "pbqp", "brute"],
                   default="pbqp")
    p.add_argument("--measure", action="store_true",
                   help="also profile the network and report the overhead of "
                        "the selected assignment against the measured optimum")
    p.add_argument("--reps", type=int, default=profiler.DEFAULT_REPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("transfer", help="adapt a model to a new platform")
    p.add_argument("--mode", choices=["factor", "finetune"], required=True)
    p.add_argument("--model", required=True, help="source-platform model")
    p.add_argument("--data", required=True, help="target-platform dataset CSV")
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--manifest")
    p.set_defaults(fn=_cmd_transfer)

    p = sub.add_parser("report", help="emit plot-ready CSV reports")
    p.add_argument("--what", choices=["accuracy", "transfer"], required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.001,0.01,0.025,0.05,0.1,0.25")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--network",
                   help="network for the inference-overhead column")
    p.add_argument("--net-data",
                   help="profiled primitive times covering the network")
    p.add_argument("--net-dlt",
                   help="profiled transform times covering the network")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--manifest")
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.fn(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 4
    except CoverageError as exc:
        print(f"coverage error: {exc}", file=sys.stderr)
        for gap in exc.gaps:
            print(f"  - {gap}", file=sys.stderr)
        return 3
    except PrimselError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
