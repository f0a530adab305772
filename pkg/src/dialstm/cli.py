"""Command-line entry point: training, parameter accounting, gradient
checking, and trace analyses behind one `dialstm` binary.

Exit codes: 0 success (including a recorded "nan" training outcome),
2 configuration error, 3 IO/format error, 4 internal invariant violation
(failed gradient check included).
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

import numpy as np

from . import tensor as T
from .analysis import (ForestConfig, GradientStatsConfig, budget_report,
                       correlation_report, gradient_stats, importance_report,
                       write_correlation_csv, write_gradient_stats_csv,
                       write_importance_csv, write_scatter_csv)
from .attention import LstmCellConfig, SamConfig
from .backbone import build, named_config
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DialstmError, FormatError
from .runconfig import (RunConfig, load_run_config, run_config_from_text,
                        schema_lines)
from .trace import (load_trace_binary, load_trace_csv, save_trace_binary,
                    save_trace_csv, trace_from_model)
from .training import train

GRADCHECK_TOLERANCE = 1e-4


def _build_parser() -> argparse.ArgumentParser:
    epilog = "configuration keys (section.key = default):\n" + "\n".join(schema_lines())
    parser = argparse.ArgumentParser(
        prog="dialstm",
        description="shared channel-attention workbench",
        epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write metrics + checkpoint")
    p_train.add_argument("-c", "--config", default=None, help="configuration file")
    p_train.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                         help="override one configuration key")

    p_params = sub.add_parser("params", help="parameter accounting for an architecture")
    p_params.add_argument("arch", nargs="?", default=None,
                          help="named architecture (or use --config)")
    p_params.add_argument("-c", "--config", default=None)
    p_params.add_argument("--set", action="append", default=[])
    p_params.add_argument("--r", default="1,4,8,16",
                          help="comma list of reduction ratios to sweep")
    p_params.add_argument("--csv", default="params.csv", help="CSV output path")

    p_grad = sub.add_parser("gradcheck",
                            help="compare backward against central differences")
    p_grad.add_argument("-c", "--config", default=None)
    p_grad.add_argument("--set", action="append", default=[])
    p_grad.add_argument("--samples", type=int, default=64,
                        help="number of random parameter coordinates")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--corrupt-backward", action="store_true",
                        help=argparse.SUPPRESS)  # fault-injection test hook

    p_an = sub.add_parser("analyze", help="run a diagnostic and write CSV reports")
    p_an.add_argument("kind", choices=["trace", "correlation", "importance", "gradients"])
    p_an.add_argument("-c", "--config", default=None,
                      help="configuration file (defaults to the checkpoint's)")
    p_an.add_argument("--set", action="append", default=[])
    p_an.add_argument("--checkpoint", default=None, help="checkpoint to analyze")
    p_an.add_argument("--trace", default=None, help="trace file (.csv or .bin)")
    p_an.add_argument("--out", default=None,
                      help="output directory (defaults to output.dir)")
    p_an.add_argument("--no-skip", action="store_true",
                      help="measure gradients with skip connections removed")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _prepare_run(config_path, overrides):
    run = load_run_config(config_path, overrides)
    return run


def _write_resolved(run: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.ini"), "w", encoding="utf-8") as f:
        f.write(run.render())


def cmd_train(args) -> int:
    run = _prepare_run(args.config, args.set)
    out_dir = run.get("output", "dir")
    _write_resolved(run, out_dir)

    train_ds, eval_ds = run.build_datasets()
    net_cfg = run.network_config(num_classes=run.data_classes())
    model = build(net_cfg, seed=run.get("train", "seed"))
    result = train(model, train_ds, run.train_config(), eval_dataset=eval_ds)

    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(result.metrics_csv())
    last = result.metrics[-1] if result.metrics else None
    meta = {
        "format_version": "1",
        "config": run.render(),
        "final_status": result.status,
        "epochs_run": str(len(result.metrics)),
        "final_train_loss": repr(last.train_loss) if last else "nan",
        "final_train_acc": repr(last.train_acc) if last else "nan",
        "final_eval_acc": repr(last.eval_acc) if last else "nan",
    }
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model, meta)
    print(f"status={result.status} epochs={len(result.metrics)} out={out_dir}")
    return 0


def _params_tables(arch: str | None, run: RunConfig | None, ratios):
    """(backbone budget, per-r increments, sharing comparison) for one arch."""
    def fresh_config():
        if arch is not None:
            return named_config(arch)
        return run.network_config(num_classes=run.data_classes())

    name = fresh_config().name or "custom"
    rows = []
    for r in ratios:
        cfg = fresh_config()
        cfg.attention = SamConfig(kind="dia-lstm", sharing="shared",
                                  cell=LstmCellConfig(variant="modified", r=r))
        budget = build(cfg, seed=0).param_budget()
        rows.append((r, budget.weights("attention"), budget.affine("attention"),
                     budget.learnable_total))

    base = fresh_config()
    base.attention = SamConfig(kind="none")
    base_budget = build(base, seed=0).param_budget()

    se_cfg = fresh_config()
    se_cfg.attention = SamConfig(kind="se", sharing="shared")
    comparison = budget_report(se_cfg)
    return name, base_budget, rows, comparison


def cmd_params(args) -> int:
    run = None
    if args.config is not None or args.set:
        run = _prepare_run(args.config, args.set)
    if args.arch is None and run is None:
        raise ConfigError("params needs an architecture name or --config")
    try:
        ratios = [int(v) for v in args.r.split(",") if v]
    except ValueError:
        raise ConfigError(f"--r must be a comma list of integers, got {args.r!r}") from None

    name, base_budget, rows, comparison = _params_tables(args.arch, run, ratios)

    backbone_total = base_budget.learnable_total
    print(f"architecture {name}")
    print(f"backbone weights {base_budget.weights_total} "
          f"affine {base_budget.affine_total} total {backbone_total} "
          f"({backbone_total / 1e6:.2f}M)")
    print("r,attention_weights,attention_affine,model_total,increment_m")
    csv_lines = ["arch,r,attention_weights,attention_affine,model_total,increment_m"]
    for r, w, a, total in rows:
        inc = f"{w / 1e6:.2f}"
        print(f"{r},{w},{a},{total},{inc}")
        csv_lines.append(f"{name},{r},{w},{a},{total},{inc}")
    shared = comparison.shared_weights
    per_block = comparison.per_block_weights
    pct = 100.0 * comparison.reduction_fraction
    print(f"sharing (se): per-block {per_block} -> shared {shared} "
          f"(reduction {pct:.1f}%)")
    csv_lines.append(f"{name},se_sharing,{per_block},{shared},,{pct:.1f}")
    with open(args.csv, "w", encoding="utf-8") as f:
        f.write("\n".join(csv_lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    run = _prepare_run(args.config, args.set)
    net_cfg = run.network_config(num_classes=run.data_classes())
    model = build(net_cfg, seed=run.get("train", "seed"))
    rng = np.random.default_rng([args.seed, 3])
    # check at random weights: freshly built zero biases would sit exactly on
    # relu kinks (zero recurrent state), where central differences are undefined
    for p in model.parameters().values():
        p.data += rng.normal(0.0, 0.05, size=p.data.shape)
    x = rng.standard_normal((2, *net_cfg.input_shape))
    labels = rng.integers(0, net_cfg.num_classes, size=2)

    def loss_fn():
        return T.softmax_cross_entropy(model.forward(x, training=True), labels)

    params = list(model.parameters().values())
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    if args.corrupt_backward:
        analytic[0] = analytic[0] * 1.5 + 1.0

    sizes = np.array([p.data.size for p in params])
    bounds = np.cumsum(sizes)
    chosen = rng.choice(int(sizes.sum()), size=min(args.samples, int(sizes.sum())),
                        replace=False)
    worst = 0.0
    for flat in chosen:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        ci = int(flat - (bounds[pi - 1] if pi else 0))
        numeric = T.central_difference(loss_fn, params[pi], ci)
        worst = max(worst, T.relative_error(analytic[pi].reshape(-1)[ci], numeric))

    print(f"max relative error {worst:.3e} over {len(chosen)} coordinates "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    if worst <= GRADCHECK_TOLERANCE:
        print("gradcheck PASS")
        return 0
    print("gradcheck FAIL")
    return 4


def _load_model_from_checkpoint(path, run: RunConfig | None):
    ckpt = load_checkpoint(path)
    if run is None:
        if "config" not in ckpt.meta:
            raise FormatError(f"{path}: checkpoint has no embedded config; pass -c")
        run = run_config_from_text(ckpt.meta["config"], source=f"{path}#config")
    net_cfg = run.network_config(num_classes=run.data_classes())
    model = build(net_cfg, seed=run.get("train", "seed"))
    apply_checkpoint(model, ckpt)
    return model, run


def cmd_analyze(args) -> int:
    run = None
    if args.config is not None or args.set:
        run = _prepare_run(args.config, args.set)

    if args.kind in ("trace", "gradients"):
        if args.checkpoint is None:
            raise ConfigError(f"analyze {args.kind} requires --checkpoint")
        model, run = _load_model_from_checkpoint(args.checkpoint, run)
        out_dir = args.out or run.get("output", "dir")
        os.makedirs(out_dir, exist_ok=True)
        train_ds, eval_ds = run.build_datasets()
        dataset = eval_ds if eval_ds is not None and len(eval_ds) else train_ds

        if args.kind == "trace":
            trace = trace_from_model(model, dataset,
                                     batch_size=run.get("analyze", "trace_batch"),
                                     sample_cap=run.get("analyze", "sample_cap"))
            trace.validate()
            save_trace_csv(os.path.join(out_dir, "trace.csv"), trace)
            save_trace_binary(os.path.join(out_dir, "trace.bin"), trace)
            print(f"trace: {len(trace.h)} vectors over {len(trace.samples())} samples "
                  f"-> {out_dir}")
            return 0

        cfg = GradientStatsConfig(batches=run.get("analyze", "grad_batches"),
                                  batch_size=run.get("analyze", "grad_batch_size"),
                                  seed=run.get("analyze", "grad_seed"))
        stats = gradient_stats(model, dataset, cfg, no_skip=args.no_skip)
        write_gradient_stats_csv(
            stats, os.path.join(out_dir, "gradients_summary.csv"),
            lambda s: os.path.join(out_dir, f"gradients_stage{s}_hist.csv"))
        for st in stats:
            print(f"stage {st.stage}: entries={st.total_entries} "
                  f"mean|g|={st.mean_abs:.3e} nonfinite={st.nonfinite}")
        return 0

    # trace-consuming analyses
    if args.trace is None:
        raise ConfigError(f"analyze {args.kind} requires --trace")
    trace = (load_trace_binary(args.trace) if str(args.trace).endswith(".bin")
             else load_trace_csv(args.trace))
    out_dir = args.out or (run.get("output", "dir") if run else ".")
    os.makedirs(out_dir, exist_ok=True)

    if args.kind == "correlation":
        cap = run.get("analyze", "sample_cap") if run else 256
        report = correlation_report(trace, sample_cap=cap)
        write_correlation_csv(report, os.path.join(out_dir, "correlation.csv"))
        first = min(report.stages)
        last = max(report.stages)
        fb = report.stages[first].blocks
        lb = report.stages[last].blocks
        write_scatter_csv(trace, first, fb[0], fb[1],
                          os.path.join(out_dir, "scatter_first_stage.csv"))
        write_scatter_csv(trace, last, lb[-2], lb[-1],
                          os.path.join(out_dir, "scatter_last_stage.csv"))
        for stage in sorted(report.stages):
            print(f"stage {stage}: mean inter-block correlation "
                  f"{report.stages[stage].grand_mean:.4f}")
        print(f"grand mean {report.grand_mean:.4f}")
        return 0

    # importance
    cfg = ForestConfig(
        n_trees=run.get("analyze", "forest_trees") if run else 100,
        max_depth=run.get("analyze", "forest_depth") if run else 8,
        min_samples_leaf=run.get("analyze", "forest_min_leaf") if run else 2,
        seed=run.get("analyze", "forest_seed") if run else 0)
    report = importance_report(trace, cfg)
    write_importance_csv(report, os.path.join(out_dir, "importance.csv"))
    print(f"importance rows written for stages {sorted(report.stages)}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "params": cmd_params,
                "gradcheck": cmd_gradcheck, "analyze": cmd_analyze}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except DialstmError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    except Exception:
        traceback.print_exc()
        return 4


if __name__ == "__main__":
    sys.exit(main())
