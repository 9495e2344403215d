"""``dorar`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import get_type_hints

import numpy as np
import torch

from . import __version__
from . import baselines, datasets, evaluation, infotheory, models, render, synthdata, training
from .config import RunConfig, parse_unit, parse_value
from .core import HardMask, build_unit_grid

log = logging.getLogger("dorar")

DEFAULT_UNITS = {"mnist": "4x4", "cifar10": "4x4", "synthetic": "4"}
ACCURACY_FLOORS = {"mnist": 0.90, "synthetic": 0.99, "cifar10": 0.0}
METHODS = ("dorar", "grad", "smoothgrad", "random", "records", "positional", "all-units")
BASES = ("partial-order", "ratio", "weighted")
IDENTITY_TOL = 1e-10


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- helpers


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(cfg: RunConfig, command: str, started: float, outputs=(), seeds=(), extra=None) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / f"{command}.config")
    manifest = {
        "command": command,
        "rerun": f"dorar {command} --config {out / (command + '.config')}",
        "config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
        "seeds": list(seeds),
        "version": version_string(),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": [str(p) for p in outputs],
    }
    manifest.update(extra or {})
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_data(cfg: RunConfig) -> datasets.Dataset:
    if cfg.dataset == "synthetic":
        if cfg.data:
            return datasets.load_synthetic(cfg.data)
        return datasets.load_synthetic(cfg.seed, num_users=cfg.users, samples_per_user=cfg.samples_per_user,
                                       movements=cfg.movements, points_per_movement=cfg.points_per_movement)
    return datasets.load_dataset(cfg.dataset, root=cfg.data)


def grid_for(cfg: RunConfig, data: datasets.Dataset):
    return build_unit_grid(data.sample_shape, parse_unit(cfg.unit or DEFAULT_UNITS[cfg.dataset]))


def load_blackbox(cfg: RunConfig):
    if not cfg.blackbox:
        raise UsageError("--blackbox checkpoint is required")
    return models.freeze(models.load_checkpoint(cfg.blackbox))


def train_config(cfg: RunConfig) -> training.TrainConfig:
    return training.TrainConfig(
        n_e=cfg.n_e, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, steps=cfg.steps,
        max_epochs=cfg.max_epochs, temperature=cfg.temperature, use_background_noise=cfg.background_noise,
        use_reconstruction_loss=cfg.reconstruction_loss, use_complementary_mask=cfg.complementary_mask,
        rng_seed=cfg.seed, max_train=cfg.max_train,
    )


def loss_weights(cfg: RunConfig, grid) -> training.LossWeights:
    if cfg.alpha is None:
        return training.LossWeights(cfg.n_e / grid.num_units, cfg.beta)
    return training.LossWeights(cfg.alpha, cfg.beta)


def retrain_settings(cfg: RunConfig) -> evaluation.RetrainSettings:
    return evaluation.RetrainSettings(beta=cfg.beta, batch_size=cfg.batch_size, max_epochs=cfg.retrain_epochs,
                                      patience=cfg.patience, max_train=cfg.eval_max_train,
                                      max_val=cfg.eval_max_val, background=cfg.background)


def build_producer(cfg: RunConfig, data, blackbox, grid):
    if cfg.method == "dorar":
        if not cfg.selector:
            raise UsageError("--selector checkpoint is required for method dorar")
        return evaluation.TrainedSelector(models.load_checkpoint(cfg.selector), cfg.n_e)
    if cfg.method == "grad":
        return evaluation.ScoreSelector(
            lambda x: baselines.saliency_scores(blackbox, x, grid, cfg.aggregation).detach(), cfg.n_e, "grad")
    if cfg.method == "smoothgrad":
        def sg(x):
            gen = torch.Generator().manual_seed(cfg.seed)
            return baselines.smoothgrad_scores(blackbox, x, grid, cfg.smoothgrad_samples, cfg.smoothgrad_sigma,
                                               gen, cfg.aggregation).detach()
        return evaluation.ScoreSelector(sg, cfg.n_e, "smoothgrad")
    if cfg.method == "random":
        return evaluation.RandomSelector(grid, cfg.n_e, cfg.seed)
    if cfg.method == "records":
        if not cfg.records:
            raise UsageError("--records file is required for method records")
        recs = baselines.read_records(cfg.records, grid.describe())
        name = recs[0].method_name if recs else "records"
        return evaluation.RecordSelector({r.sample_id: r.unit_scores for r in recs}, cfg.n_e, name)
    if cfg.method == "positional":
        exclude = sorted(set().union(*data.meta.get("ground_truth_test", [])))
        return evaluation.PositionalSelector.from_ink(blackbox, data.x_train, grid, data.num_classes,
                                                      exclude=exclude)
    if cfg.method == "all-units":
        return evaluation.FullSelector(grid)
    raise UsageError(f"unknown method {cfg.method!r}")


def _results_path(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "results.csv"


# ---------------------------------------------------------------- commands


def cmd_train_blackbox(cfg: RunConfig) -> int:
    started = time.time()
    data = load_data(cfg)
    with training.seeded(cfg.seed):
        model = models.build_blackbox(cfg.dataset)
    models.train_classifier(model, data.x_train, data.y_train, epochs=cfg.epochs, seed=cfg.seed,
                            log=lambda e: log.info("epoch %d val acc %.4f", e,
                                                   models.accuracy(model, data.x_val, data.y_val)))
    acc = models.accuracy(model, data.x_test, data.y_test)
    out = Path(cfg.out)
    ckpt = models.save_checkpoint(model, out / models.checkpoint_name("blackbox", cfg.dataset, cfg.seed),
                                  extra={"dataset": cfg.dataset, "seed": cfg.seed, "test_accuracy": acc})
    report = out / "accuracy.csv"
    report.write_text(f"dataset,seed,split,accuracy\n{cfg.dataset},{cfg.seed},test,{acc!r}\n")
    floor = ACCURACY_FLOORS.get(cfg.dataset, 0.0) if cfg.accuracy_floor is None else cfg.accuracy_floor
    write_manifest(cfg, "train-blackbox", started, [ckpt, report], [cfg.seed],
                   {"test_accuracy": acc, "accuracy_floor": floor})
    print(f"test accuracy {acc:.4f} -> {ckpt}")
    if acc < floor:
        print(f"error: accuracy {acc:.4f} below floor {floor:.4f}", file=sys.stderr)
        return 1
    return 0


def cmd_train_selector(cfg: RunConfig) -> int:
    started = time.time()
    data = load_data(cfg)
    grid = grid_for(cfg, data)
    blackbox = load_blackbox(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = train_config(cfg)
    result = training.train_dorar(data, blackbox, tc, loss_weights(cfg, grid), grid, data.kind,
                                  log_path=out / "train.log")
    extra = {"dataset": cfg.dataset, "seed": cfg.seed, "n_e": cfg.n_e, "unit": grid.describe(),
             "scheme": tc.scheme, "steps": len(result.trace)}
    outputs = [models.save_checkpoint(result.selector, out / models.checkpoint_name("selector", cfg.dataset,
                                                                                    cfg.seed), extra)]
    outputs.append(models.save_checkpoint(result.g1, out / models.checkpoint_name("g1", cfg.dataset, cfg.seed),
                                          extra))
    if result.g2 is not None:
        outputs.append(models.save_checkpoint(result.g2, out / models.checkpoint_name("g2", cfg.dataset,
                                                                                      cfg.seed), extra))
    if cfg.records_out != "none":
        outputs.append(_write_selector_records(result.selector, data, grid, out / "attributions.csv",
                                               test_only=cfg.records_out == "test"))
    outputs.append(out / "train.log")
    write_manifest(cfg, "train-selector", started, outputs, [cfg.seed], {"scheme": tc.scheme})
    print(f"trained {tc.scheme} selector for {len(result.trace)} steps -> {outputs[0]}")
    return 0


def _write_selector_records(selector, data, grid, path: Path, test_only: bool = False) -> Path:
    splits = [("train", data.x_train), ("val", data.x_val), ("test", data.x_test)]
    offset, recs = 0, []
    with torch.no_grad():
        for name, x in splits:
            if not test_only or name == "test":
                for i in range(0, len(x), 1000):
                    scores = selector(x[i:i + 1000])
                    recs.extend(baselines.AttributionRecord(offset + i + j, s.numpy(), "dorar", grid.describe())
                                for j, s in enumerate(scores))
            offset += len(x)
    baselines.write_records(path, recs)
    return path


def _evaluate_seeds(payload):
    """Worker entry point: evaluate one block of repetition seeds."""
    cfg_text, seeds = payload
    cfg = RunConfig.loads(cfg_text)
    torch.set_num_threads(1)
    data = load_data(cfg)
    grid = grid_for(cfg, data)
    blackbox = load_blackbox(cfg)
    producer = build_producer(cfg, data, blackbox, grid)
    return evaluation.evaluate_selector(producer, data, blackbox, producer.n_e if hasattr(producer, "n_e")
                                        else cfg.n_e, grid, repetitions=len(seeds), seeds=seeds,
                                        method_name=cfg.method, settings=retrain_settings(cfg))


def _fan_out(fn, payloads, workers: int):
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads))


def cmd_evaluate(cfg: RunConfig) -> int:
    started = time.time()
    seeds = [cfg.seed + k for k in range(cfg.reps)]
    if cfg.workers > 1:
        parts = _fan_out(_evaluate_seeds, [(cfg.dumps(), [s]) for s in seeds], cfg.workers)
        record = evaluation.merge_records(parts, cfg.method)
    else:
        record = _evaluate_seeds((cfg.dumps(), seeds))
    path = evaluation.append_results(_results_path(cfg), [record])
    write_manifest(cfg, "evaluate", started, [path], seeds)
    print(f"{record.method_name}: a1={record.a1_mean:.4f}±{record.a1_std:.4f} "
          f"a2={record.a2_mean:.4f}±{record.a2_std:.4f} -> {path}")
    return 0


def cmd_compare(cfg: RunConfig, first=None, second=None, results=None) -> int:
    started = time.time()
    if results:
        records = evaluation.read_results(results)
    elif first and second:
        records = evaluation.read_results(first) + evaluation.read_results(second)
    else:
        raise UsageError("give --a and --b, or --results")
    if len(records) < 2:
        raise UsageError("need at least two result rows to compare")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["first,second,basis,verdict"]
    if first and second and not results:
        a_rows = evaluation.read_results(first)
        pairs = [(a, b) for a in a_rows for b in records[len(a_rows):]]
    else:
        pairs = [(a, b) for i, a in enumerate(records) for b in records[i + 1:]]
    for a, b in pairs:
        res = _compare_pair(a, b, cfg)
        lines.append(f"{a.method_name},{b.method_name},{res.basis},{res.verdict}")
        print(f"{a.method_name} vs {b.method_name} [{res.basis}]: {res.verdict}")
    path = out / "comparison.csv"
    path.write_text("\n".join(lines) + "\n")
    write_manifest(cfg, "compare", started, [path])
    return 0


def _compare_pair(a, b, cfg):
    if cfg.basis == "partial-order":
        return evaluation.compare_partial_order(a, b, intervals=cfg.intervals)
    return evaluation.compare_scalar(a, b, basis=cfg.basis, w=cfg.weight)


def _ablation_cell(payload):
    cfg_text, scheme = payload
    cfg = RunConfig.loads(cfg_text)
    torch.set_num_threads(1)
    data = load_data(cfg)
    grid = grid_for(cfg, data)
    blackbox = load_blackbox(cfg)
    tc = training.scheme_config(train_config(cfg), scheme)
    result = training.train_dorar(data, blackbox, tc, loss_weights(cfg, grid), grid, data.kind)
    seeds = [cfg.seed + k for k in range(cfg.reps)]
    return evaluation.evaluate_selector(evaluation.TrainedSelector(result.selector, cfg.n_e), data, blackbox,
                                        cfg.n_e, grid, repetitions=cfg.reps, seeds=seeds,
                                        method_name=f"dorar[{scheme}]", settings=retrain_settings(cfg))


def cmd_ablation(cfg: RunConfig) -> int:
    started = time.time()
    load_blackbox(cfg)
    path = _results_path(cfg)
    records = []
    schemes = list(training.SCHEMES)
    if cfg.workers > 1:
        records = _fan_out(_ablation_cell, [(cfg.dumps(), s) for s in schemes], cfg.workers)
        evaluation.append_results(path, records)
    else:
        for s in schemes:
            rec = _ablation_cell((cfg.dumps(), s))
            evaluation.append_results(path, [rec])
            records.append(rec)
    for r in records:
        print(f"{r.method_name}: a1={r.a1_mean:.4f} a2={r.a2_mean:.4f}")
    write_manifest(cfg, "ablation", started, [path], [cfg.seed + k for k in range(cfg.reps)])
    return 0


def cmd_synth_gen(cfg: RunConfig) -> int:
    started = time.time()
    samples = synthdata.generate_dataset(cfg.users, cfg.samples_per_user, cfg.movements, cfg.points_per_movement,
                                         rng=cfg.seed)
    train, test = synthdata.train_test_split(samples, rng=cfg.seed)
    meta = {"seed": cfg.seed, "users": cfg.users, "movements": cfg.movements,
            "points_per_movement": cfg.points_per_movement,
            "velocity_scale": repr(synthdata.velocity_scale(train))}
    out = Path(cfg.data or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [synthdata.write_split(out / "train.csv", train, meta), synthdata.write_split(out / "test.csv", test, meta)]
    write_manifest(cfg, "synth-gen", started, paths, [cfg.seed])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return 0


def cmd_explain(cfg: RunConfig) -> int:
    started = time.time()
    data = load_data(cfg)
    grid = grid_for(cfg, data)
    blackbox = load_blackbox(cfg) if cfg.method != "dorar" or cfg.blackbox else None
    producer = build_producer(cfg, data, blackbox, grid)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = [int(i) for i in cfg.indices.split(",") if i.strip()]
    offset = len(data.x_train) + len(data.x_val)
    paths = []
    for i in indices:
        if not 0 <= i < len(data.x_test):
            raise UsageError(f"test index {i} out of range [0, {len(data.x_test)})")
        x = data.x_test[i:i + 1]
        dense = producer.masks(x, offset + i)[0]
        mask = HardMask(frozenset(torch.nonzero(dense > 0.5).flatten().tolist()), grid.num_units)
        target = out / f"explain-{cfg.method}-{i}.png"
        kwargs = {"scale": cfg.scale} if x.ndim == 4 else {}
        paths.append(render.render(x[0].numpy(), mask, grid, target, **kwargs))
    write_manifest(cfg, "explain", started, paths, [cfg.seed])
    print(f"rendered {len(paths)} overlays to {out}")
    return 0


def cmd_verify_infotheory(cfg: RunConfig) -> int:
    started = time.time()
    rng = np.random.default_rng(cfg.seed)
    rows, worst_identity, worst_chain = [], 0.0, 0.0
    for trial in range(cfg.trials):
        n_features = int(rng.integers(1, 3))
        alphabet = int(rng.integers(2, 5)) if n_features == 1 else 2
        joint = infotheory.masked_joint(rng, n_features=n_features, feature_alphabet=alphabet,
                                        num_classes=int(rng.integers(2, 4)))
        rep = infotheory.verify_epite_identity(joint)
        table = infotheory.random_joint(rng, (2, 2, 2, 2))
        chain = abs(infotheory.mutual_information(table, "A", "B")
                    - infotheory.conditional_mi(table, "A", "B", "C")
                    - infotheory.interaction_info(table, "A", "B", "C"))
        worst_identity = max(worst_identity, rep.residual)
        worst_chain = max(worst_chain, chain)
        rows.append(f"{trial},{rep.lhs!r},{rep.rhs!r},{rep.residual!r},{chain!r}")
    xor = np.zeros((2, 2, 2))
    for a in range(2):
        for b in range(2):
            xor[a, b, a ^ b] = 0.25
    co = infotheory.interaction_info(infotheory.JointDistribution("ABC", xor), "A", "B", "C")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "infotheory.csv"
    path.write_text("trial,lhs,rhs,identity_residual,chain_residual\n" + "\n".join(rows) + "\n")
    ok = worst_identity < IDENTITY_TOL and worst_chain < IDENTITY_TOL and co == -1.0
    write_manifest(cfg, "verify-infotheory", started, [path], [cfg.seed],
                   {"max_identity_residual": worst_identity, "max_chain_residual": worst_chain,
                    "xor_coinformation": co, "passed": ok})
    print(f"max identity residual {worst_identity:.3e}, max chain-rule residual {worst_chain:.3e}, "
          f"XOR co-information {co!r} bits: {'ok' if ok else 'FAILED'}")
    return 0 if ok else 1


COMMANDS = {
    "train-blackbox": cmd_train_blackbox,
    "train-selector": cmd_train_selector,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "ablation": cmd_ablation,
    "synth-gen": cmd_synth_gen,
    "explain": cmd_explain,
    "verify-infotheory": cmd_verify_infotheory,
}

# Per-command flags; each maps onto a RunConfig field.
_COMMON = ["config", "out", "seed", "workers"]
_DATA = ["dataset", "data", "users", "samples_per_user", "movements", "points_per_movement"]
_TRAIN = ["n_e", "unit", "steps", "max_epochs", "batch_size", "learning_rate", "temperature", "alpha", "beta",
          "background_noise", "reconstruction_loss", "complementary_mask", "max_train"]
_EVAL = ["reps", "retrain_epochs", "patience", "eval_max_train", "eval_max_val", "background"]
FLAGS = {
    "train-blackbox": _DATA + ["epochs", "accuracy_floor"],
    "train-selector": _DATA + _TRAIN + ["blackbox", "records_out"],
    "evaluate": _DATA + ["n_e", "unit", "beta", "batch_size", "blackbox", "method", "selector", "records",
                         "smoothgrad_samples", "smoothgrad_sigma", "aggregation"] + _EVAL,
    "compare": ["basis", "weight", "intervals"],
    "ablation": _DATA + _TRAIN + ["blackbox"] + _EVAL,
    "synth-gen": ["data", "users", "samples_per_user", "movements", "points_per_movement"],
    "explain": _DATA + ["n_e", "unit", "blackbox", "method", "selector", "records", "indices", "scale",
                        "smoothgrad_samples", "smoothgrad_sigma", "aggregation"],
    "verify-infotheory": ["trials"],
}
CHOICES = {"dataset": models.DATASET_KINDS,
           "method": METHODS, "basis": BASES, "records_out": ("all", "test", "none"),
           "background": ("empirical", "mean", "gaussian-blur", "zero")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dorar", description="Double-sided remove-and-reconstruct attribution")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    hints = get_type_hints(RunConfig)
    for name in COMMANDS:
        p = sub.add_parser(name)
        for key in _COMMON + FLAGS[name]:
            flag = "--" + key.replace("_", "-")
            if key == "config":
                p.add_argument(flag, help="flat key = value file; explicit flags override it")
                continue
            hint = hints[key]
            kwargs = {"dest": key, "default": argparse.SUPPRESS}
            if key in CHOICES:
                kwargs["choices"] = CHOICES[key]
            kwargs["type"] = (lambda h: lambda raw: parse_value(h, raw))(hint)
            if key == "n_e":
                p.add_argument("--n-e", "--ne", **kwargs)
            else:
                p.add_argument(flag, **kwargs)
        if name == "compare":
            p.add_argument("--a", dest="first", default=None, help="results.csv of the first method")
            p.add_argument("--b", dest="second", default=None, help="results.csv of the second method")
            p.add_argument("--results", default=None, help="one results.csv; all rows compared pairwise")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < explicit flags."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    known = {f.name for f in fields(RunConfig)}
    return cfg.replace(**{k: v for k, v in vars(args).items() if k in known})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "compare":
            return cmd_compare(cfg, args.first, args.second, args.results)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dorar: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ValueError) and str(exc).startswith("line "):
            print(f"dorar: config error: {exc}", file=sys.stderr)
            return 2
        print(f"dorar: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FloatingPointError, RuntimeError) as exc:
        print(f"dorar: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
