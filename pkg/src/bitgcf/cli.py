"""Command-line entry point: train, eval, export, bench, landscape.

Every run writes its fully-resolved configuration next to its outputs, so a
finished run can be replayed bit-for-bit with ``--config``. Synthetic graphs
(``--data synthetic:<users>x<items>x<edges>:<seed>``) make every command
runnable without downloading datasets.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

import bitgcf
from bitgcf import synthetic
from bitgcf.bench import bench_inference
from bitgcf.evaluate import evaluate
from bitgcf.graph import load_edges, split_train_test
from bitgcf.kernels import BACKEND
from bitgcf.landscape import perturb_landscape, signed_grid
from bitgcf.model import ModelParams
from bitgcf.store import (QuantizedTable, build_table, compression_report,
                          load_table, save_table)
from bitgcf.train import TrainConfig, train_loop

TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def resolve_graph(data_spec: str, min_degree: int = 0):
    if data_spec.startswith("synthetic:"):
        return synthetic.parse_spec(data_spec)
    return load_edges(data_spec, min_degree=min_degree)


def save_checkpoint(path, params: ModelParams, meta: dict) -> None:
    arrays = {name: tensor for name, tensor in params.named_tensors()}
    arrays["num_layers"] = np.int64(params.num_layers)
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        lf = data["learnable_factors"] if "learnable_factors" in data else None
        params = ModelParams(
            base_embeddings=data["base_embeddings"],
            transform=data["transform"],
            num_layers=int(data["num_layers"]),
            learnable_factors=lf,
        )
    return params, meta


def _write_run_config(out_dir: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["bitgcf_version"] = bitgcf.__version__
    payload["kernel_backend"] = BACKEND
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_run_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _note_threads(threads: int) -> None:
    if threads != 1:
        print(f"note: kernels run single-threaded (reference mode); "
              f"--threads {threads} has no effect", file=sys.stderr)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    _note_threads(args.threads)
    run_cfg = _load_run_config(args.config) if args.config else {}
    data_spec = args.data or run_cfg.get("data")
    if not data_spec:
        raise ValueError("--data is required (or provide --config with a data entry)")
    test_fraction = args.test_fraction if args.test_fraction is not None else \
        run_cfg.get("test_fraction", 0.2)
    min_degree = args.min_degree if args.min_degree is not None else \
        run_cfg.get("min_degree", 0)

    overrides = dict(run_cfg.get("train", {}))
    cli_map = {
        "batch_size": args.batch_size, "learning_rate": args.lr,
        "l2_coeff": args.l2, "num_layers": args.layers,
        "embed_dim": args.embed_dim, "code_dim": args.dim,
        "epochs": args.epochs, "anneal_trigger_epoch": args.trigger_epoch,
        "neg_per_pos": args.neg_per_pos, "rec_neg_per_pos": args.rec_neg_per_pos,
        "seed": args.seed, "mode": args.mode, "eval_every": args.eval_every,
        "eval_k": args.eval_k, "early_stop_patience": args.patience,
    }
    overrides.update({k: v for k, v in cli_map.items() if v is not None})
    if overrides.get("embed_dim") is None and overrides.get("code_dim") is not None:
        overrides["embed_dim"] = overrides["code_dim"]  # c tied to d by default
    overrides = {k: v for k, v in overrides.items() if k in TRAIN_FIELDS and v is not None}
    config = TrainConfig.for_variant(args.variant, **overrides)

    graph = resolve_graph(data_spec, min_degree)
    print(f"graph: {graph.num_users} users, {graph.num_items} items, "
          f"{graph.num_edges} interactions")
    split = split_train_test(graph, test_fraction, config.seed)
    print(f"split: {split.train.num_edges} train edges, "
          f"{split.num_test_edges} test edges")

    params, history = train_loop(config, split, verbose=not args.quiet)

    out = _out_dir(args)
    history.to_csv(out / "history.csv")
    meta = {"data": data_spec, "test_fraction": test_fraction,
            "min_degree": min_degree, "train": dataclasses.asdict(config),
            "variant": args.variant}
    save_checkpoint(out / "checkpoint.npz", params, meta)

    table_path = None
    if config.mode != "fp":
        flags = config.variant_flags(quantization_enabled=True)
        try:
            from bitgcf.model import forward
            cache = forward(params, split.train, flags)
            table = build_table(cache, flags, split.train.num_users)
            table_path = out / "table.l2qb"
            save_table(table, table_path)
            report = compression_report(table)
            print(f"packed table: {report.packed_bytes} bytes, "
                  f"{report.measured_ratio:.2f}x vs fp32 "
                  f"(theory {report.theory_ratio:.2f}x)")
        except ValueError as exc:
            print(f"note: table not exported ({exc})", file=sys.stderr)
    else:
        print("note: full-precision mode; no packed table exported", file=sys.stderr)

    if graph.user_ids is not None:
        with open(out / "ids_users.txt", "w", encoding="utf-8") as fh:
            fh.writelines(f"{u}\n" for u in graph.user_ids)
        with open(out / "ids_items.txt", "w", encoding="utf-8") as fh:
            fh.writelines(f"{i}\n" for i in graph.item_ids)

    flags = config.variant_flags(
        quantization_enabled=(config.mode != "fp"))
    report = evaluate((params, flags), split, ks=(args.eval_k or 20, 100))
    print(report)
    report.to_csv(out / "metrics.csv")
    _write_run_config(out, {**meta, "command": "train",
                            "outputs": {"checkpoint": "checkpoint.npz",
                                        "table": table_path.name if table_path else None,
                                        "history": "history.csv",
                                        "metrics": "metrics.csv"}})
    return 0


def cmd_eval(args) -> int:
    _note_threads(args.threads)
    run_cfg = _load_run_config(args.config) if args.config else {}
    data_spec = args.data or run_cfg.get("data")
    if not data_spec:
        raise ValueError("--data is required (or provide --config)")
    seed = args.seed if args.seed is not None else \
        run_cfg.get("train", {}).get("seed", 0)
    test_fraction = args.test_fraction if args.test_fraction is not None else \
        run_cfg.get("test_fraction", 0.2)
    min_degree = args.min_degree if args.min_degree is not None else \
        run_cfg.get("min_degree", 0)

    table = load_table(args.table)
    graph = resolve_graph(data_spec, min_degree)
    if (table.num_users, table.num_items) != (graph.num_users, graph.num_items):
        raise ValueError(
            f"table covers {table.num_users}x{table.num_items} users/items but the "
            f"data has {graph.num_users}x{graph.num_items}")
    split = split_train_test(graph, test_fraction, seed)
    ks = tuple(int(k) for k in args.ks.split(","))
    report = evaluate(table, split, ks=ks)
    print(report)
    out = _out_dir(args)
    report.to_csv(out / "metrics.csv")
    _write_run_config(out, {"command": "eval", "data": data_spec, "table": str(args.table),
                            "test_fraction": test_fraction, "min_degree": min_degree,
                            "seed": seed, "ks": list(ks)})
    return 0


def cmd_export(args) -> int:
    _note_threads(args.threads)
    params, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig(**meta["train"])
    if config.mode == "fp":
        raise ValueError("full-precision checkpoints have no quantized table to export")
    data_spec = args.data or meta["data"]
    graph = resolve_graph(data_spec, meta.get("min_degree", 0))
    split = split_train_test(graph, meta.get("test_fraction", 0.2), config.seed)
    from bitgcf.model import forward
    flags = config.variant_flags(quantization_enabled=True)
    cache = forward(params, split.train, flags)
    table = build_table(cache, flags, split.train.num_users)
    out = _out_dir(args)
    path = out / args.name
    save_table(table, path)
    report = compression_report(table)
    print(f"wrote {path} ({report.packed_bytes} payload bytes, "
          f"{report.measured_ratio:.3f}x measured, {report.theory_ratio:.3f}x theory)")
    _write_run_config(out, {"command": "export", "checkpoint": str(args.checkpoint),
                            "data": data_spec, "table": args.name})
    return 0


def _parse_synthetic_table(spec: str):
    head, _, seed_text = spec.partition(":")
    parts = head.lower().split("x")
    if len(parts) != 4 or not seed_text:
        raise ValueError(
            f"bad synthetic table spec {spec!r}, want <users>x<items>x<dim>x<layers>:<seed>")
    users, items, dim, layers = (int(v) for v in parts)
    rng = np.random.default_rng(int(seed_text))
    n = users + items
    codes = rng.integers(0, 2, size=(n, layers + 1, dim), dtype=np.int8) * 2 - 1
    packed = np.empty((n, layers + 1, (dim + 7) // 8), dtype=np.uint8)
    for layer in range(layers + 1):
        packed[:, layer] = np.packbits((codes[:, layer] > 0).astype(np.uint8),
                                       axis=1, bitorder="little")
    table = QuantizedTable(num_users=users, num_items=items, dim=dim,
                           packed_codes=packed)
    float_table = rng.standard_normal((n, dim)).astype(np.float32)
    return table, float_table


def cmd_bench(args) -> int:
    _note_threads(args.threads)
    if bool(args.table) == bool(args.synthetic):
        raise ValueError("provide exactly one of --table and --synthetic")
    if args.table:
        table = load_table(args.table)
        if args.float_checkpoint:
            params, meta = load_checkpoint(args.float_checkpoint)
            config = TrainConfig(**meta["train"])
            graph = resolve_graph(meta["data"], meta.get("min_degree", 0))
            split = split_train_test(graph, meta.get("test_fraction", 0.2), config.seed)
            from bitgcf.model import aggregate, forward
            flags = config.variant_flags(quantization_enabled=False)
            cache = forward(params, split.train, flags)
            float_table = aggregate(cache, flags, training=False).astype(np.float32)
        else:
            rng = np.random.default_rng(args.seed or 0)
            float_table = rng.standard_normal((table.num_nodes, table.dim)).astype(np.float32)
    else:
        table, float_table = _parse_synthetic_table(args.synthetic)

    rng = np.random.default_rng(args.seed or 0)
    n_users = min(args.users, table.num_users)
    workload = rng.choice(table.num_users, size=n_users, replace=False)
    report = bench_inference(table, float_table, workload, k=args.k,
                             repetitions=args.repetitions)
    print(report)
    out = _out_dir(args)
    report.to_csv(out / "bench.csv")
    _write_run_config(out, {"command": "bench", "table": str(args.table or args.synthetic),
                            "k": args.k, "users": n_users,
                            "repetitions": args.repetitions, "seed": args.seed})
    return 0


def cmd_landscape(args) -> int:
    _note_threads(args.threads)
    params, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig(**meta["train"])
    data_spec = args.data or meta["data"]
    graph = resolve_graph(data_spec, meta.get("min_degree", 0))
    split = split_train_test(graph, meta.get("test_fraction", 0.2), config.seed)
    p_values = signed_grid(args.p_max, args.p_step)
    quant = not args.masked and config.mode != "fp"
    flags = config.variant_flags(quantization_enabled=quant)
    seed = args.seed if args.seed is not None else config.seed
    grid = perturb_landscape(params, split, config, p_values, seed, flags=flags)
    out = _out_dir(args)
    name = "landscape_masked.csv" if args.masked else "landscape.csv"
    grid.to_csv(out / name)
    print(f"wrote {out / name}: {len(p_values)}x{len(p_values)} grid, "
          f"quantization {'masked' if not quant else 'enabled'}")
    _write_run_config(out, {"command": "landscape", "checkpoint": str(args.checkpoint),
                            "data": data_spec, "p_max": args.p_max, "p_step": args.p_step,
                            "masked": bool(args.masked), "seed": seed})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitgcf",
        description="1-bit quantized graph collaborative filtering")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed")
    common.add_argument("--threads", type=int, default=1,
                        help="thread count; 1 = reference mode (only 1 supported)")
    common.add_argument("--out-dir", default="runs/latest", help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model end to end")
    p.add_argument("--data", help="edge-list path or synthetic:<U>x<I>x<E>:<seed>")
    p.add_argument("--config", help="replay a resolved config.json")
    p.add_argument("--mode", choices=["end", "anl", "fp"], default=None)
    p.add_argument("--variant", choices=["wo-tq", "wo-bpr", "wo-rec", "wo-raf",
                                         "in-lf", "wo-at"], default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dim", type=int, default=None, help="code dimension d")
    p.add_argument("--embed-dim", type=int, default=None,
                   help="embedding dimension c (defaults to d)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--trigger-epoch", type=int, default=None)
    p.add_argument("--neg-per-pos", type=int, default=None)
    p.add_argument("--rec-neg-per-pos", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--eval-k", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--min-degree", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a packed table")
    p.add_argument("--table", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--config", help="config.json from the training run")
    p.add_argument("--ks", default="20,40,60,80,100")
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--min-degree", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", parents=[common],
                       help="pack a checkpoint's quantized table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--name", default="table.l2qb")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", parents=[common],
                       help="time packed-table vs fp32 inference")
    p.add_argument("--table", default=None)
    p.add_argument("--synthetic", default=None,
                   help="random table spec <users>x<items>x<dim>x<layers>:<seed>")
    p.add_argument("--float-checkpoint", default=None)
    p.add_argument("--users", type=int, default=256, help="workload size")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--repetitions", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("landscape", parents=[common],
                       help="loss-surface perturbation grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--p-max", type=float, default=0.5)
    p.add_argument("--p-step", type=float, default=0.01)
    p.add_argument("--masked", action="store_true",
                   help="mask quantization for the grid")
    p.set_defaults(func=cmd_landscape)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # CLI boundary: fail with a message, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
