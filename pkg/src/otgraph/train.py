"""Training loop, optimizers, evaluation, and checkpoint files.

Each sample gets its own tape; batch gradients are accumulated in sample
index order, which makes single-threaded runs bitwise reproducible. The
thread pool only parallelizes per-sample forward/backward work, and the
reduction order never changes.
"""

import json
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError, NonFiniteError, TrainingDiverged
from .metrics import compute_metrics
from .model import ModelConfig, forward_sample, init_params, lift_params
from . import fusion

_CKPT_MAGIC = b"OTGC"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 15
    seed: int = 0
    threads: int = 1
    split_train: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1 or self.threads < 1:
            raise ConfigError("batch_size, epochs and threads must be >= 1")


class Adam:
    """Adaptive-moments update with per-parameter step counts."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = {}

    def step(self, params, grads, allowed=None):
        out = OrderedDict()
        for name, p in params.items():
            g = grads[name]
            if allowed is not None and not name.startswith(allowed):
                out[name] = p
                continue
            m = self._m.get(name)
            if m is None:
                m = np.zeros(p.shape)
                v = np.zeros(p.shape)
            else:
                v = self._v[name]
            t = self._t.get(name, 0) + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name], self._v[name], self._t[name] = m, v, t
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            out[name] = Tensor(p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


class MomentumSGD:
    def __init__(self, lr=1e-3, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self._vel = {}

    def step(self, params, grads, allowed=None):
        out = OrderedDict()
        for name, p in params.items():
            if allowed is not None and not name.startswith(allowed):
                out[name] = p
                continue
            vel = self._vel.get(name)
            vel = grads[name] if vel is None else self.momentum * vel + grads[name]
            self._vel[name] = vel
            out[name] = Tensor(p.data - self.lr * vel)
        return out


def make_optimizer(tcfg):
    if tcfg.optimizer == "adam":
        return Adam(lr=tcfg.lr)
    return MomentumSGD(lr=tcfg.lr, momentum=tcfg.momentum)


def _sample_pass(params, sample, mcfg):
    """Loss, per-parameter gradients, and the argmax prediction for one sample."""
    tape = Tape()
    pn = lift_params(tape, params)
    probs, _ = forward_sample(tape, pn, sample, mcfg)
    loss = fusion.cross_entropy(tape, probs, sample.label)
    tape.backward(loss)
    grads = {name: tape.grad(node).data for name, node in pn.items()}
    return float(loss.value.data), grads, int(np.argmax(probs.value.data))


def evaluate(params, samples, mcfg):
    """(metrics dict, mean loss, predictions) without building gradients."""
    preds = []
    losses = []
    for s in samples:
        tape = Tape()
        pn = OrderedDict((name, tape.constant(t)) for name, t in params.items())
        probs, _ = forward_sample(tape, pn, s, mcfg)
        p = probs.value.data
        preds.append(int(np.argmax(p)))
        with np.errstate(divide="ignore"):  # a zero probability is an honest inf
            losses.append(-float(np.log(p[s.label])))
    m = compute_metrics(preds, [s.label for s in samples], mcfg.n_classes)
    return m, float(np.mean(losses)), preds


# split training alternates which half of the model learns each epoch; the
# classifier head always moves with the active half
_SPLIT_GRAPH = ("img.", "txt.", "head.")
_SPLIT_REG = ("reg.", "head.")


@dataclass
class TrainResult:
    best_params: OrderedDict
    best_epoch: int
    best_valid_f1: float
    final_params: OrderedDict
    history: list = field(default_factory=list)


def train(train_samples, valid_samples, mcfg, tcfg, log=None):
    """Optimize on train, select by valid macro F1, return both param sets.

    History rows carry one train and one valid entry per epoch in metrics
    CSV column order. A non-finite loss aborts with TrainingDiverged.
    """
    say = log if log is not None else lambda msg: None
    params = init_params(mcfg, tcfg.seed)
    opt = make_optimizer(tcfg)
    shuffle_rng = np.random.default_rng(tcfg.seed + 1)
    n = len(train_samples)
    pool = ThreadPoolExecutor(max_workers=tcfg.threads) if tcfg.threads > 1 else None

    best = TrainResult(best_params=params, best_epoch=-1, best_valid_f1=-1.0,
                       final_params=params)
    try:
        for epoch in range(tcfg.epochs):
            allowed = None
            if tcfg.split_train and mcfg.variant == "tot":
                allowed = _SPLIT_GRAPH if epoch % 2 == 0 else _SPLIT_REG
            order = shuffle_rng.permutation(n)
            epoch_losses = []
            epoch_preds = []
            epoch_labels = []
            for start in range(0, n, tcfg.batch_size):
                batch = [train_samples[i] for i in order[start:start + tcfg.batch_size]]
                if pool is not None:
                    results = list(pool.map(
                        lambda s: _sample_pass(params, s, mcfg), batch))
                else:
                    results = [_sample_pass(params, s, mcfg) for s in batch]

                total = None
                for loss, grads, pred in results:
                    if not np.isfinite(loss):
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch}")
                    epoch_losses.append(loss)
                    epoch_preds.append(pred)
                    if total is None:
                        total = grads
                    else:
                        total = {k: total[k] + grads[k] for k in total}
                epoch_labels.extend(s.label for s in batch)
                mean_grads = {k: g / len(batch) for k, g in total.items()}
                params = opt.step(params, mean_grads, allowed)

            train_m = compute_metrics(epoch_preds, epoch_labels, mcfg.n_classes)
            train_loss = float(np.mean(epoch_losses))
            valid_m, valid_loss, _ = evaluate(params, valid_samples, mcfg)
            best.history.append({"epoch": epoch, "split": "train",
                                 **train_m, "loss": train_loss})
            best.history.append({"epoch": epoch, "split": "valid",
                                 **valid_m, "loss": valid_loss})
            say(f"epoch {epoch}: train loss {train_loss:.4f} acc {train_m['acc']:.3f}"
                f" | valid acc {valid_m['acc']:.3f} f1 {valid_m['macro_f1']:.3f}")
            if valid_m["macro_f1"] > best.best_valid_f1:
                best.best_valid_f1 = valid_m["macro_f1"]
                best.best_epoch = epoch
                best.best_params = params
    except NonFiniteError as e:
        raise TrainingDiverged(f"non-finite value during training: {e}") from None
    finally:
        if pool is not None:
            pool.shutdown()

    best.final_params = params
    return best


def save_checkpoint(path, params, mcfg, meta=None):
    """Binary checkpoint: magic, version, JSON header, float64 payloads."""
    header = {
        "config": asdict(mcfg),
        "names": list(params.keys()),
        "shapes": {k: list(t.shape) for k, t in params.items()},
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    out = bytearray()
    out += _CKPT_MAGIC
    out += struct.pack("<II", _CKPT_VERSION, len(hb))
    out += hb
    for t in params.values():
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """(params, ModelConfig, meta) from a checkpoint file."""
    buf = Path(path).read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    if len(buf) < 12:
        raise DataError("checkpoint header truncated")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != _CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    if len(buf) < 12 + hlen:
        raise DataError("checkpoint header truncated")
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"checkpoint header unreadable: {e}") from None
    mcfg = ModelConfig(**header["config"])
    pos = 12 + hlen
    params = OrderedDict()
    for name in header["names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if pos + 8 * count > len(buf):
            raise DataError(f"checkpoint payload truncated at {name}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        params[name] = Tensor(arr.reshape(shape))
    if pos != len(buf):
        raise DataError("checkpoint has trailing bytes; file corrupt")
    return params, mcfg, header.get("meta", {})
