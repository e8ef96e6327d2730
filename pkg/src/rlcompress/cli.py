"""Command-line interface: ``rlcompress <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .compress.policy import PolicyError, load_policy, reference_policy, save_policy
from .cost.device import DeviceProfile, ProfileError, load_profile
from .cost.evaluate import RemoteProvider, SyntheticProvider, evaluate
from .cost.remote import MeasurementError, MockMeasurementServer, RemoteLatencyClient
from .data import DEFAULT_SIZES, Dataset, generate, load_dataset, save_dataset
from .driver.config import ConfigError, SearchConfig, load_config, save_config
from .driver.report import export_reports
from .driver.search import (
    SearchError,
    SearchSetup,
    fine_tune_and_report,
    run_search,
    run_sequential,
)
from .model.graph import ModelFormatError, ModelGraph
from .model.io import load_model, save_model
from .sensitivity import SensitivityConfig, SensitivityError, run_analysis
from .training import TrainingDiverged

log = logging.getLogger("rlcompress")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PROTOCOL, EXIT_SEARCH = 0, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# helpers


def _load_graph(path: str | None) -> ModelGraph:
    if path is None:
        from .bundled import load_bundled_model

        return load_bundled_model()
    return load_model(path)


def _load_data(path: str | None, graph: ModelGraph | None = None) -> Dataset:
    if path is not None:
        return load_dataset(path)
    seed = int(graph.meta.get("data_seed", 0)) if graph is not None else 0
    return generate(seed)


def _provider(args_provider: str, endpoint: str | None, profile: str | None, repeats: int, timeout: float):
    prof = load_profile(profile) if profile else DeviceProfile()
    if args_provider == "remote":
        if not endpoint:
            raise ConfigError("remote provider needs --endpoint host:port")
        host, _, port = endpoint.rpartition(":")
        try:
            port_no = int(port)
        except ValueError:
            raise ConfigError(f"bad endpoint {endpoint!r}") from None
        return RemoteProvider(RemoteLatencyClient(host or "127.0.0.1", port_no, timeout, repeats))
    return SyntheticProvider(prof)


def write_manifest(out_dir: Path, command: str, inputs: dict, outputs: list[Path], started: float) -> Path:
    manifest = {
        "tool": "rlcompress",
        "version": __version__,
        "command": command,
        "inputs": inputs,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "outputs": sorted(str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p) for p in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _dump(path: Path, obj: dict) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.time()
    sizes = {"train": args.train, "val": args.val, "test": args.test}
    ds = generate(args.seed, sizes)
    out = Path(args.out)
    save_dataset(ds, out)
    outputs = [out / f"{s}_{k}.npy" for s in ("train", "val", "test") for k in ("x", "y")] + [out / "dataset.json"]
    write_manifest(out, "gen-data", {"seed": args.seed, "sizes": sizes, "dataset_hash": ds.content_hash()},
                   outputs, started)
    print(f"dataset written to {out} (hash {ds.content_hash()[:16]})")
    return EXIT_OK


def cmd_train_ref(args) -> int:
    from .model.tinyresnet import build_tinyresnet
    from .numerics import make_rng
    from .training import accuracy, sgd_train

    started = time.time()
    ds = _load_data(args.data)
    graph = build_tinyresnet(make_rng(args.seed))
    if args.epochs > 0:
        sgd_train(graph, ds.train.x, ds.train.y, args.epochs, args.lr, batch_size=args.batch_size, seed=args.seed)
    val_acc = accuracy(graph, ds.val.x, ds.val.y)
    test_acc = accuracy(graph, ds.test.x, ds.test.y)
    graph.meta.update(
        {
            "data_seed": ds.seed,
            "dataset_hash": ds.content_hash(),
            "train_seed": args.seed,
            "epochs": args.epochs,
            "lr": args.lr,
            "reference_val_accuracy": val_acc,
            "reference_test_accuracy": test_acc,
        }
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.rlcm"
    save_model(graph, model_path)
    write_manifest(
        out, "train-ref",
        {"seed": args.seed, "epochs": args.epochs, "lr": args.lr, "dataset_hash": ds.content_hash(),
         "model_hash": graph.content_hash()},
        [model_path], started,
    )
    print(f"val accuracy {val_acc:.4f}  test accuracy {test_acc:.4f}  -> {model_path}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    started = time.time()
    graph = _load_graph(args.model)
    ds = _load_data(args.data, graph)
    cfg = SensitivityConfig(samples=args.samples, prune_points=args.points, max_bits=args.max_bits, seed=args.seed)
    out = Path(args.out)
    table = run_analysis(graph, ds.train.x, cfg, cache_dir=out, data_hash=ds.content_hash())
    write_manifest(out, "sensitivity",
                   {"config": cfg.__dict__, "model_hash": graph.content_hash(), "dataset_hash": ds.content_hash()},
                   sorted(out.glob("sensitivity-*.json")), started)
    print(f"{len(table.entries)} sensitivity entries in {out}")
    return EXIT_OK


def _search_config(args) -> SearchConfig:
    base = load_config(args.config).to_dict() if args.config else {}
    overrides = {
        "agent": args.agent,
        "target": args.target,
        "beta": args.beta,
        "episodes": args.episodes,
        "warmup": args.warmup,
        "seed": args.seed,
        "provider": args.provider,
        "endpoint": args.endpoint,
        "profile": args.profile,
        "finetune_epochs": args.finetune_epochs,
        "val_samples": args.val_samples,
        "sequential": args.sequential,
        "optimize_steps": args.optimize_steps,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_sensitivity:
        base["sensitivity"] = False
    return SearchConfig.from_dict(base)


def cmd_search(args) -> int:
    started = time.time()
    config = _search_config(args)
    graph = _load_graph(args.model)
    ds = _load_data(args.data, graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provider = _provider(config.provider, config.endpoint, config.profile, config.repeats, config.timeout_s)
    sens = None
    if config.sensitivity:
        cache = Path(args.cache) if args.cache else out / "sensitivity"
        scfg = SensitivityConfig(samples=config.sensitivity_samples, max_bits=config.max_bits, seed=config.seed)
        sens = run_analysis(graph, ds.train.x, scfg, cache_dir=cache, data_hash=ds.content_hash())
    setup = SearchSetup(graph, ds, provider, sens)
    outputs = [_write_config(config, out)]
    if config.sequential:
        first_kind, second_kind = ("prune", "quant") if config.sequential == "prune-first" else ("quant", "prune")
        r1, result = run_sequential(config.with_(agent=first_kind), config.with_(agent=second_kind), setup, out)
        outputs += sorted(out.glob("history-stage*.jsonl"))
        save_policy(r1.best.policy, out / "stage1_policy.json")
        outputs.append(out / "stage1_policy.json")
    else:
        result = run_search(config, setup, out / "history.jsonl")
        outputs.append(out / "history.jsonl")
    best = result.best
    save_policy(best.policy, out / "best_policy.json")
    final, pre = fine_tune_and_report(
        setup, best.policy, config.finetune_epochs, config.finetune_lr, config.finetune_samples, config.seed
    )
    outputs.append(out / "best_policy.json")
    outputs.append(_dump(out / "final_report.json",
                         {**final.to_dict(), "split": "test", "accuracy_before_finetune": pre,
                          "finetune_epochs": config.finetune_epochs, "best_episode": best.episode,
                          "search_reward": best.reward, "search_val_accuracy": best.report.accuracy}))
    if result.agent is not None:
        result.agent.save(out / "agent.npz")
        outputs.append(out / "agent.npz")
    write_manifest(
        out, "search",
        {"config": config.to_dict(), "seed": config.seed, "model_hash": graph.content_hash(),
         "dataset_hash": ds.content_hash()},
        outputs, started,
    )
    print(
        f"best episode {best.episode}: reward {best.reward:.4f}, val accuracy {best.report.accuracy:.4f}, "
        f"relative latency {best.report.relative_latency:.4f}; "
        f"test accuracy {pre:.4f} -> {final.accuracy:.4f} after {config.finetune_epochs} fine-tune epochs"
    )
    return EXIT_OK


def _write_config(config: SearchConfig, out: Path) -> Path:
    path = out / "config.json"
    save_config(config, path)
    return path


def cmd_eval(args) -> int:
    graph = _load_graph(args.model)
    ds = _load_data(args.data, graph)
    policy = load_policy(args.policy) if args.policy else reference_policy(graph)
    provider = _provider(args.provider, args.endpoint, args.profile, args.repeats, args.timeout)
    split = ds.split(args.split)
    if args.finetune_epochs > 0:
        setup = SearchSetup(graph, ds, provider)
        report, _ = fine_tune_and_report(setup, policy, args.finetune_epochs, args.finetune_lr,
                                         args.finetune_samples, args.seed)
    else:
        report = evaluate(graph, policy, provider, split.x, split.y)
    data = report.to_dict()
    for key in ("macs", "bops", "params", "latency_ms", "reference_latency_ms", "relative_latency", "accuracy"):
        print(f"{key:22s} {data[key]}")
    if args.out:
        _dump(Path(args.out), {**data, "split": args.split})
    return EXIT_OK


def cmd_report(args) -> int:
    files = export_reports(args.histories, args.out)
    for f in files:
        print(f)
    return EXIT_OK


def cmd_mock_server(args) -> int:
    profile = load_profile(args.profile) if args.profile else DeviceProfile()
    server = MockMeasurementServer(profile, args.host, args.port, jitter=args.jitter)
    print(f"serving {profile.name} on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlcompress", description="RL-based joint pruning and quantization search.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    for split, n in DEFAULT_SIZES.items():
        g.add_argument(f"--{split}", type=int, default=n, help=f"{split} split size")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-ref", help="train the TinyResNet reference model")
    t.add_argument("--data", help="dataset directory (default: generate with seed 0)")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_ref)

    s = sub.add_parser("sensitivity", help="run (or load) the sensitivity analysis")
    s.add_argument("--model", help="model file (default: bundled)")
    s.add_argument("--data")
    s.add_argument("--samples", type=int, default=256)
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--max-bits", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sensitivity)

    r = sub.add_parser("search", help="run a compression policy search")
    r.add_argument("--config", help="flat JSON config file; flags override it")
    r.add_argument("--agent", choices=("prune", "quant", "joint"))
    r.add_argument("--target", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--episodes", type=int)
    r.add_argument("--warmup", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--no-sensitivity", action="store_true")
    r.add_argument("--sequential", choices=("prune-first", "quant-first"))
    r.add_argument("--provider", choices=("synthetic", "remote"))
    r.add_argument("--endpoint")
    r.add_argument("--profile")
    r.add_argument("--finetune-epochs", type=int)
    r.add_argument("--val-samples", type=int)
    r.add_argument("--optimize-steps", type=int)
    r.add_argument("--model")
    r.add_argument("--data")
    r.add_argument("--cache", help="sensitivity cache directory")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="evaluate one policy")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--policy", help="policy file (default: reference policy)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--provider", choices=("synthetic", "remote"), default="synthetic")
    e.add_argument("--endpoint")
    e.add_argument("--profile")
    e.add_argument("--repeats", type=int, default=10)
    e.add_argument("--timeout", type=float, default=10.0)
    e.add_argument("--finetune-epochs", type=int, default=0)
    e.add_argument("--finetune-lr", type=float, default=0.01)
    e.add_argument("--finetune-samples", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="export plot data from search histories")
    rep.add_argument("histories", nargs="+")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    m = sub.add_parser("mock-server", help="serve the measurement protocol from a device profile")
    m.add_argument("--profile")
    m.add_argument("--host", default="127.0.0.1")
    m.add_argument("--port", type=int, default=7878)
    m.add_argument("--jitter", type=float, default=0.0)
    m.set_defaults(func=cmd_mock_server)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PolicyError, ProfileError, SensitivityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeasurementError as exc:
        print(f"measurement error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (OSError, ModelFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SearchError, TrainingDiverged) as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return EXIT_SEARCH


if __name__ == "__main__":
    sys.exit(main())
