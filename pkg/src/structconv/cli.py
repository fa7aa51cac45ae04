"""``structconv`` command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, missing file,
mismatched checkpoint, failed gradient audit), 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import analysis, data, gradcheck
from .config import ConfigError, RunConfig, load_config
from .data import SplitSpec
from .experiments import predict
from .graph import Graph, GraphError, example_graph, load_adjacency_csv, save_adjacency_csv
from .models import (CheckpointError, ModelSpec, ShapeCheckFailed, build_model, default_spec, fingerprint,
                     forward, load_checkpoint, save_checkpoint)
from .optim import TrainConfig, TrainState, train_epochs, train_scae_two_stage, write_log_csv
from .tensor import make_rng

log = logging.getLogger("structconv")

COMMANDS = ("generate", "train", "evaluate", "predict", "recurrence", "export-kernels", "gradcheck")


class MissingFile(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


class Locked(RuntimeError):
    pass


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".structconv.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise Locked(f"{out_dir} is in use by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingFile(f"missing file: {path}")
    return path


def resolve_graph(cfg: RunConfig) -> Graph:
    if cfg.graph_path:
        return load_adjacency_csv(_require(Path(cfg.graph_path)))
    return example_graph()


def data_path(cfg: RunConfig) -> Path:
    return Path(cfg.data_path) if cfg.data_path else cfg.path("data.csv")


def checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else cfg.path("model.scnv")


def split_spec(cfg: RunConfig) -> SplitSpec:
    return SplitSpec(cfg.split_train, cfg.split_test, cfg.split_validation)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_count=cfg.batch_count, batch_size=cfg.batch_size,
                       l1_lambda=cfg.l1_lambda, alpha=cfg.adam_alpha, beta1=cfg.adam_beta1,
                       beta2=cfg.adam_beta2, eps=cfg.adam_eps, patience=cfg.patience,
                       min_delta=cfg.min_delta, stage1_max_epochs=cfg.stage1_max_epochs, seed=cfg.seed)


def load_series(cfg: RunConfig, g: Graph) -> np.ndarray:
    x = data.load_csv(_require(data_path(cfg)))
    if x.shape[1] != g.f:
        raise GraphError(f"data has {x.shape[1]} nodes, graph has {g.f}")
    return x


def prepared(cfg: RunConfig, x: np.ndarray) -> data.Prepared:
    horizon = 0 if cfg.family == "scae" else cfg.horizon
    return data.prepare(x, cfg.window, horizon, cfg.stride, split_spec(cfg))


def model_spec(cfg: RunConfig, g: Graph, n_channels: int) -> ModelSpec:
    return default_spec(cfg.family, g.f, cfg.window, 0 if cfg.family == "scae" else cfg.horizon, n_channels,
                        cfg.hop_k, cfg.encoder or None, cfg.decoder or None)


def load_matching_checkpoint(cfg: RunConfig, g: Graph):
    spec, params = load_checkpoint(_require(checkpoint_path(cfg)))
    if fingerprint(spec, g) != params.fingerprint:
        raise CheckpointMismatch("checkpoint was trained on a different graph than the configured one")
    if spec.window != cfg.window or spec.family != cfg.family:
        raise CheckpointMismatch(f"checkpoint is {spec.family} with window {spec.window}; "
                                 f"config asks for {cfg.family} with window {cfg.window}")
    return spec, params


def cmd_generate(cfg: RunConfig) -> None:
    g = resolve_graph(cfg)
    x = data.synth_coupled(g, cfg.synth_t_len, cfg.seed, cfg.synth_noise_sd, cfg.synth_coupling)
    data.save_csv(x, data_path(cfg))
    save_adjacency_csv(g, cfg.path("adjacency.csv"))
    log.info("wrote %s (%d steps, %d nodes)", data_path(cfg), x.shape[0], x.shape[1])


def cmd_train(cfg: RunConfig) -> None:
    g = resolve_graph(cfg)
    x = load_series(cfg, g)
    prep = prepared(cfg, x)
    spec = model_spec(cfg, g, x.shape[2])
    tcfg = train_config(cfg)
    params = build_model(spec, g, make_rng(cfg.seed))
    if cfg.family == "scae":
        params, rows, boundary = train_scae_two_stage(
            spec, params, (prep.train.inputs, prep.train.inputs),
            (prep.validation.inputs, prep.validation.inputs), tcfg)
        log.info("plain stage ended after epoch %d", boundary)
    else:
        state = TrainState.start(params, tcfg)
        rows = train_epochs(spec, state, (prep.train.inputs, prep.train.targets),
                            (prep.validation.inputs, prep.validation.targets), tcfg)
        params = state.params
    for r in rows:
        log.info("epoch %d [%s] train %.6f val %.6f", r["epoch"], r["stage"], r["train_loss"], r["val_loss"])
    save_checkpoint(params, spec, checkpoint_path(cfg))
    write_log_csv(rows, cfg.path("train.log.csv"))


def _evaluation_pairs(spec, params, prep):
    target = prep.test.inputs if spec.family == "scae" else prep.test.targets
    pred = predict(params, spec, prep.test.inputs)
    return (data.inverse_transform(prep.standardizer, pred),
            data.inverse_transform(prep.standardizer, target))


def write_metrics(report: analysis.MetricReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "index", "value"])
        w.writerow(["rmse", "", repr(report.rmse)])
        w.writerow(["r2", "", repr(report.r2)])
        for s, v in enumerate(report.per_step):
            w.writerow(["rmse_step", s, repr(float(v))])
        for i, v in enumerate(report.per_feature):
            w.writerow(["rmse_feature", i, repr(float(v))])


def cmd_evaluate(cfg: RunConfig) -> None:
    g = resolve_graph(cfg)
    spec, params = load_matching_checkpoint(cfg, g)
    prep = prepared(cfg, load_series(cfg, g))
    report = analysis.rmse_report(*_evaluation_pairs(spec, params, prep))
    write_metrics(report, cfg.path("metrics.csv"))
    log.info("test rmse %.6f r2 %.6f", report.rmse, report.r2)


def cmd_predict(cfg: RunConfig) -> None:
    g = resolve_graph(cfg)
    spec, params = load_matching_checkpoint(cfg, g)
    x = load_series(cfg, g)
    prep = prepared(cfg, x)
    offsets = [int(v) for v in cfg.predict_offsets.split(",") if v.strip()]
    for off in offsets:
        if off < 0 or off + spec.window > x.shape[0]:
            raise ConfigError("predict_offsets", f"offset {off} leaves no full window in T={x.shape[0]}")
        window = data.transform(prep.standardizer, x[off:off + spec.window])
        out, _ = forward(params, spec, window, "infer")
        out = data.inverse_transform(prep.standardizer, out)
        data.save_csv(out, cfg.path(f"predict_{off}.csv"))
        log.info("wrote %s", cfg.path(f"predict_{off}.csv"))


def recurrence_series(cfg: RunConfig, spec: ModelSpec, params, prep) -> np.ndarray:
    """Activations of one layer/node over the test split, non-overlapping windows joined in time."""
    layers = spec.all_layers()
    if not 0 <= cfg.recurrence_layer < len(layers):
        raise ConfigError("recurrence_layer", f"must index one of {len(layers)} layers")
    test = data.transform(prep.standardizer, prep.splits[1])
    ws = data.make_windows(test, spec.window, 0, spec.window)
    _, cache = forward(params, spec, ws.inputs, "infer")
    act = cache.outputs[cfg.recurrence_layer]
    if act.ndim != 4:
        raise ConfigError("recurrence_layer", "selected layer has no (time, node, channel) output")
    if not 0 <= cfg.recurrence_node < act.shape[2]:
        raise ConfigError("recurrence_node", f"must be below {act.shape[2]}")
    series = np.concatenate(list(act[:, :, cfg.recurrence_node, :]), axis=0)
    if cfg.recurrence_channel >= 0:
        if cfg.recurrence_channel >= series.shape[1]:
            raise ConfigError("recurrence_channel", f"must be below {series.shape[1]}")
        series = series[:, [cfg.recurrence_channel]]
    return series


def cmd_recurrence(cfg: RunConfig) -> None:
    g = resolve_graph(cfg)
    spec, params = load_matching_checkpoint(cfg, g)
    prep = prepared(cfg, load_series(cfg, g))
    rec = analysis.recurrence(recurrence_series(cfg, spec, params, prep), cfg.recurrence_eps)
    bits = rec.bits.astype(np.float64)
    analysis.export_heatmap(bits, cfg.path("recurrence.pgm"), "pgm")
    analysis.export_heatmap(bits, cfg.path("recurrence.csv"), "csv")
    log.info("recurrence matrix %dx%d, %.4f recurrent", rec.n, rec.n, bits.mean())


def cmd_export_kernels(cfg: RunConfig) -> None:
    g = resolve_graph(cfg)
    spec, params = load_matching_checkpoint(cfg, g)
    if not 0 <= cfg.kernel_layer < len(params.masks) or params.masks[cfg.kernel_layer] is None:
        raise ConfigError("kernel_layer", "must index a convolution layer")
    out = cfg.path("kernels")
    out.mkdir(exist_ok=True)
    for i, m in enumerate(analysis.kernel_heatmaps(params, spec, cfg.kernel_layer)):
        analysis.export_heatmap(m, out / f"node_{i}.pgm", "pgm")
        analysis.export_heatmap(m, out / f"node_{i}.csv", "csv")
    with open(cfg.path("sparsity.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "fraction_below_tau", "exact_zeros", "unmasked"])
        for r in analysis.sparsity_report(params, cfg.sparsity_tau):
            w.writerow([r.layer, repr(r.fraction), r.exact_zeros, r.unmasked])


def cmd_gradcheck(cfg: RunConfig) -> int:
    errors = gradcheck.run_audit(cfg.seed)
    ok = True
    for name, err in errors.items():
        passed = err <= gradcheck.TOLERANCE
        ok &= passed
        print(f"{name:18s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "recurrence": cmd_recurrence,
    "export-kernels": cmd_export_kernels,
    "gradcheck": cmd_gradcheck,
}


def parse_args(argv):
    parser = argparse.ArgumentParser(prog="structconv", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)
    overrides = {}
    it = iter(rest)
    for flag in it:
        if not flag.startswith("--"):
            parser.error(f"unexpected argument {flag!r}")
        key = flag[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                parser.error(f"{flag} needs a value")
        overrides[key] = value
    return args, overrides


def main(argv=None) -> int:
    args, overrides = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, overrides)
        with output_lock(Path(cfg.out_dir)):
            cfg.path(f"resolved_{args.command}.conf").write_text(cfg.resolved_text(), encoding="utf-8")
            code = HANDLERS[args.command](cfg)
        return code or 0
    except (ConfigError, MissingFile, CheckpointMismatch, CheckpointError, ShapeCheckFailed,
            GraphError, data.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - map everything else to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
