"""Command-line entry point: train, eval, align, heatmap, synth.

Every command writes its effective configuration to <out>/config.json
before doing any work, appends progress to <out>/run.log, and exits 0 on
success, 2 on configuration or input problems, 3 on training divergence.
Settings resolve as: explicit flag > config file (--config JSON) > default.
"""

import argparse
import json
import sys
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import transport
from .data import load_dataset, resolve_split, synth_dataset, tensor_bytes
from .errors import (ConfigError, DataError, InputError, NonFiniteError,
                     ShapeError, TrainingDiverged)
from .model import ModelConfig, forward_sample
from .train import (TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                    train)

_MODEL_KEYS = ("d_h", "n_p2", "n_s", "n_classes", "h", "n_steps", "m_heads",
               "d_phi", "mlp_hidden", "gamma", "sigma", "rff_seed", "epsilon",
               "sinkhorn_iters", "variant", "no_ott", "no_oti", "no_dtor",
               "no_reg")
_TRAIN_KEYS = ("optimizer", "lr", "momentum", "batch_size", "epochs", "seed",
               "threads", "split_train")

# flag destinations that feed ModelConfig fields of a different name
_FLAG_TO_MODEL = {"reason_steps": "n_steps"}


def _add_shared(p):
    p.add_argument("--config", help="JSON file with defaults for any setting")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--sinkhorn-iters", type=int)
    p.add_argument("--reason-steps", type=int)
    p.add_argument("--variant", choices=("tot", "cot"))
    p.add_argument("--no-ott", action="store_true", default=None)
    p.add_argument("--no-oti", action="store_true", default=None)
    p.add_argument("--no-dtor", action="store_true", default=None)
    p.add_argument("--no-reg", action="store_true", default=None)
    p.add_argument("--split-train", action="store_true", default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="otgraph",
        description="transport-aligned graph reasoning for two-modality classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and keep the best checkpoint")
    _add_shared(p)
    p.add_argument("--data", help="dataset index or manifest path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_shared(p)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--data", help="dataset index or manifest path")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")

    p = sub.add_parser("align", help="export cost matrices, plans, aligned nodes")
    _add_shared(p)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--data", help="dataset index or manifest path")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--sample-id", help="sample to export")

    p = sub.add_parser("heatmap", help="export per-step reasoning edge matrices")
    _add_shared(p)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--data", help="dataset index or manifest path")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--sample-id", help="sample to export")

    p = sub.add_parser("synth", help="generate the synthetic alignment dataset")
    _add_shared(p)
    p.add_argument("--train", type=int, dest="n_train")
    p.add_argument("--valid", type=int, dest="n_valid")
    p.add_argument("--test", type=int, dest="n_test")
    p.add_argument("--noise", type=float)
    p.add_argument("--classes", type=int, choices=(2, 3))
    return parser


# every key any subcommand will look up, plus the reason_steps alias
_FILE_KEYS = frozenset(_MODEL_KEYS) | frozenset(_TRAIN_KEYS) | {
    "reason_steps", "data", "out", "checkpoint", "sample_id", "split",
    "n_train", "n_valid", "n_test", "noise", "classes"}


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(doc) - _FILE_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "reason_steps" in doc:
        doc.setdefault("n_steps", doc.pop("reason_steps"))
    return doc


def _setting(args, filecfg, key, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in filecfg:
        return filecfg[key]
    return default


def _model_overrides(args, filecfg):
    """ModelConfig fields set explicitly by flag or config file."""
    out = {}
    for key in _MODEL_KEYS:
        if key in filecfg:
            out[key] = filecfg[key]
    for flag, field in _FLAG_TO_MODEL.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[field] = v
    for key in _MODEL_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


class _Run:
    """Output directory with the config-snapshot-first discipline."""

    def __init__(self, out_dir, command, snapshot):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(
            json.dumps({"command": command, **snapshot}, indent=1, sort_keys=True)
            + "\n")
        self._log = self.dir / "run.log"
        self._log.write_text("")

    def log(self, msg):
        with self._log.open("a") as fh:
            fh.write(msg + "\n")

    def log_transport_use(self):
        n = transport.sinkhorn_calls()
        if n > 0:
            self.log(f"sinkhorn calls: {n}")


def _write_metrics_csv(path, rows):
    lines = ["epoch,split,acc,macro_f1,mmae,loss"]
    for r in rows:
        lines.append(f"{r['epoch']},{r['split']},{r['acc']:.6f},"
                     f"{r['macro_f1']:.6f},{r['mmae']:.6f},{r['loss']:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _dataset_model_config(meta, overrides):
    base = {
        "d_h": meta["d_h"],
        "n_p2": meta["n_p2"],
        "n_s": meta["n_s"],
        "n_classes": len(meta["classes"]),
    }
    base.update(overrides)
    return ModelConfig(**base)


def cmd_train(args):
    filecfg = _load_config_file(args.config)
    data = _setting(args, filecfg, "data")
    if data is None:
        raise ConfigError("train needs --data (or a config file with one)")
    out = Path(_setting(args, filecfg, "out", "runs/train"))

    train_meta, train_samples = load_dataset(resolve_split(data, "train"))
    _, valid_samples = load_dataset(resolve_split(data, "valid"))

    mcfg = _dataset_model_config(train_meta, _model_overrides(args, filecfg))
    tcfg = TrainConfig(**{k: _setting(args, filecfg, k, getattr(TrainConfig, k))
                          for k in _TRAIN_KEYS})

    run = _Run(out, "train", {"model": asdict(mcfg), "train": asdict(tcfg),
                              "data": str(data)})
    transport.reset_sinkhorn_calls()
    run.log(f"training on {len(train_samples)} samples, "
            f"validating on {len(valid_samples)}")
    result = train(train_samples, valid_samples, mcfg, tcfg, log=run.log)
    save_checkpoint(out / "checkpoint.bin", result.best_params, mcfg,
                    meta={"epoch": result.best_epoch,
                          "valid_macro_f1": result.best_valid_f1,
                          "seed": tcfg.seed})
    _write_metrics_csv(out / "metrics.csv", result.history)
    run.log_transport_use()
    run.log(f"best epoch {result.best_epoch} "
            f"valid macro_f1 {result.best_valid_f1:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    print(f"metrics: {out / 'metrics.csv'}")
    return 0


def _load_checkpoint_model(args, filecfg):
    ckpt = _setting(args, filecfg, "checkpoint")
    if ckpt is None:
        raise ConfigError("this command needs --checkpoint")
    params, mcfg, meta = load_checkpoint(ckpt)

    overrides = _model_overrides(args, filecfg)
    if "n_steps" in overrides and overrides["n_steps"] != mcfg.n_steps:
        raise ConfigError("reason-steps is fixed by the checkpoint")
    for key in ("d_h", "n_p2", "n_s", "n_classes", "h", "m_heads", "d_phi",
                "mlp_hidden", "variant"):
        if key in overrides and overrides[key] != getattr(mcfg, key):
            raise ConfigError(f"{key} is fixed by the checkpoint")
    mcfg = mcfg.with_overrides(**overrides)
    return params, mcfg, meta


def _find_sample(samples, sid):
    for s in samples:
        if s.id == sid:
            return s
    raise InputError(f"sample id {sid!r} not in split")


def cmd_eval(args):
    filecfg = _load_config_file(args.config)
    data = _setting(args, filecfg, "data")
    if data is None:
        raise ConfigError("eval needs --data")
    out = Path(_setting(args, filecfg, "out", "runs/eval"))
    params, mcfg, _ = _load_checkpoint_model(args, filecfg)
    meta, samples = load_dataset(resolve_split(data, args.split))
    if meta["d_h"] != mcfg.d_h or meta["n_p2"] != mcfg.n_p2 \
            or meta["n_s"] != mcfg.n_s or len(meta["classes"]) != mcfg.n_classes:
        raise ConfigError(
            f"dataset shapes (d_h={meta['d_h']}, n_p2={meta['n_p2']}, "
            f"n_s={meta['n_s']}, classes={len(meta['classes'])}) do not match "
            f"checkpoint (d_h={mcfg.d_h}, n_p2={mcfg.n_p2}, n_s={mcfg.n_s}, "
            f"classes={mcfg.n_classes})")

    run = _Run(out, "eval", {"model": asdict(mcfg), "data": str(data),
                             "split": args.split})
    transport.reset_sinkhorn_calls()
    m, loss, _ = evaluate(params, samples, mcfg)
    _write_metrics_csv(out / "metrics.csv",
                       [{"epoch": 0, "split": args.split, **m, "loss": loss}])
    run.log_transport_use()
    print(f"acc {m['acc']:.4f}  macro_f1 {m['macro_f1']:.4f}  "
          f"mmae {m['mmae']:.4f}  loss {loss:.4f}")
    return 0


def _export_tensor(path, arr):
    Path(path).write_bytes(tensor_bytes(arr))


def cmd_align(args):
    filecfg = _load_config_file(args.config)
    data = _setting(args, filecfg, "data")
    sid = _setting(args, filecfg, "sample_id")
    if data is None or sid is None:
        raise ConfigError("align needs --data and --sample-id")
    out = Path(_setting(args, filecfg, "out", "runs/align"))
    _, mcfg, _ = _load_checkpoint_model(args, filecfg)
    _, samples = load_dataset(resolve_split(data, args.split))
    sample = _find_sample(samples, sid)

    run = _Run(out, "align", {"model": asdict(mcfg), "data": str(data),
                              "split": args.split, "sample_id": sid})
    transport.reset_sinkhorn_calls()
    kcfg = mcfg.kernel_config()
    scfg = mcfg.sinkhorn_config()
    V, T = sample.V.data, sample.T.data
    files = {}
    for tag, src, tgt in (("image_to_text", V, T), ("text_to_image", T, V)):
        C = transport.cost_matrix(src, tgt, kcfg)
        plan = transport.sinkhorn(
            C, transport.uniform_marginal(src.shape[0]),
            transport.uniform_marginal(tgt.shape[0]), scfg)
        phi = transport.rkhs_embed(src, kcfg)
        aligned = transport.align_nodes(plan, phi, np.sqrt(src.shape[0]))
        for role, arr in (("cost", C.data), ("plan", plan.values.data),
                          ("aligned", aligned.data)):
            name = f"{role}_{tag}.bin"
            _export_tensor(out / name, arr)
            files[f"{role}_{tag}"] = name
    (out / "index.json").write_text(json.dumps(
        {"sample_id": sid, "files": files}, indent=1, sort_keys=True) + "\n")
    run.log_transport_use()
    print(f"exported {len(files)} tensors to {out}")
    return 0


def cmd_heatmap(args):
    filecfg = _load_config_file(args.config)
    data = _setting(args, filecfg, "data")
    sid = _setting(args, filecfg, "sample_id")
    if data is None or sid is None:
        raise ConfigError("heatmap needs --data and --sample-id")
    out = Path(_setting(args, filecfg, "out", "runs/heatmap"))
    params, mcfg, _ = _load_checkpoint_model(args, filecfg)
    if mcfg.variant == "cot":
        raise ConfigError("the concatenation baseline has no reasoning edges")
    if mcfg.no_dtor:
        raise ConfigError("no reasoning edges exist with --no-dtor")
    _, samples = load_dataset(resolve_split(data, args.split))
    sample = _find_sample(samples, sid)

    run = _Run(out, "heatmap", {"model": asdict(mcfg), "data": str(data),
                                "split": args.split, "sample_id": sid})
    transport.reset_sinkhorn_calls()
    from .autodiff import Tape

    tape = Tape()
    pn = OrderedDict((name, tape.constant(t)) for name, t in params.items())
    _, edge_hist = forward_sample(tape, pn, sample, mcfg)
    count = 0
    for side, steps in edge_hist.items():
        for k, E in enumerate(steps):
            rows = [",".join(f"{x:.17g}" for x in row) for row in E.data]
            (out / f"edges_{side}_step{k + 1}.csv").write_text(
                "\n".join(rows) + "\n")
            count += 1
        global_rows = [",".join(f"{x:.17g}" for x in E.data[0]) for E in steps]
        (out / f"global_edges_{side}.csv").write_text(
            "\n".join(global_rows) + "\n")
    run.log_transport_use()
    print(f"exported {count} edge matrices to {out}")
    return 0


def cmd_synth(args):
    filecfg = _load_config_file(args.config)
    out = Path(_setting(args, filecfg, "out", "synth_data"))
    sizes = (_setting(args, filecfg, "n_train", 400),
             _setting(args, filecfg, "n_valid", 100),
             _setting(args, filecfg, "n_test", 100))
    noise = _setting(args, filecfg, "noise", 0.1)
    seed = _setting(args, filecfg, "seed", 7)
    classes = _setting(args, filecfg, "classes", 2)
    gen_keys = ("d_h", "n_p2", "n_s")
    extra = {k: filecfg[k] for k in gen_keys if k in filecfg}

    run = _Run(out, "synth", {"sizes": list(sizes), "noise": noise,
                              "seed": seed, "classes": classes, **extra})
    index = synth_dataset(out, sizes=sizes, noise=noise, seed=seed,
                          n_classes=classes, **extra)
    run.log(f"wrote {sum(sizes)} samples")
    print(f"dataset index: {index}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "align": cmd_align,
    "heatmap": cmd_heatmap,
    "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, DataError, InputError, ShapeError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
