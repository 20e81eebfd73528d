"""Builtins exposed to the user language.

Native functions do not receive the hidden (object name, scope, caller
scope) arguments; they see plain values. Tensor-producing builtins register
their results with the session so every recorded tree ends up on the tape.
"""

from __future__ import annotations

import os

import numpy as np

from nsk import autodiff, dataset, nn
from nsk.autodiff import backward as tape_backward
from nsk.concurrency import END_OF_DATA
from nsk.errors import NskRuntimeError, NskTypeError
from nsk.runtime import Batch, format_value, value_kind
from nsk.tensor import Tensor


def _need(args, count, name, line):
    if len(args) != count:
        raise NskRuntimeError(f"{name}() takes {count} argument(s), got {len(args)}", line)


def _number(v, name, line) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise NskTypeError(f"{name} expects a number, got {value_kind(v)}", line)
    return float(v)


def _int(v, name, line) -> int:
    f = _number(v, name, line)
    if f != int(f):
        raise NskTypeError(f"{name} expects an integer value, got {f:g}", line)
    return int(f)


def _tensor(v, name, line) -> Tensor:
    if not isinstance(v, Tensor):
        raise NskTypeError(f"{name} expects a tensor, got {value_kind(v)}", line)
    return v


def _dataset(v, name, line) -> dataset.DatasetHandle:
    if not isinstance(v, dataset.DatasetHandle):
        raise NskTypeError(f"{name} expects a dataset, got {value_kind(v)}", line)
    return v


def _batch(v, name, line) -> Batch:
    if not isinstance(v, Batch):
        raise NskTypeError(f"{name} expects a batch, got {value_kind(v)}", line)
    return v


# --- io ------------------------------------------------------------------------

def _print(session, frame, args, line):
    session.stdout.write(" ".join(format_value(a) for a in args) + "\n")
    return None


def _item(session, frame, args, line):
    _need(args, 1, "item", line)
    return _tensor(args[0], "item", line).item()


def _accuracy(session, frame, args, line):
    _need(args, 2, "accuracy", line)
    logits = _tensor(args[0], "accuracy", line)
    labels = _tensor(args[1], "accuracy", line)
    if logits.rank != 2 or labels.rank != 1 or logits.shape[0] != labels.shape[0]:
        raise NskTypeError(
            f"accuracy expects [m x c] logits and [m] labels, got "
            f"{list(logits.shape)} and {list(labels.shape)}", line,
        )
    predictions = logits.data.argmax(axis=1)
    return float(np.mean(predictions == labels.data.astype(np.int64)))


# --- parameters and layers --------------------------------------------------------

def _xavier_uniform(session, frame, args, line):
    _need(args, 2, "xavier_uniform", line)
    rows = _int(args[0], "xavier_uniform", line)
    cols = _int(args[1], "xavier_uniform", line)
    name = session.new_param_name()
    seed = int(session.rng.integers(0, 2**31 - 1))
    t = nn.xavier_uniform_init(rows, cols, seed, session.pool, name=name)
    session.param_group.add(name, t)
    return t


def _param_zeros(session, frame, args, line):
    if len(args) not in (1, 2):
        raise NskRuntimeError(f"param_zeros() takes 1 or 2 arguments, got {len(args)}", line)
    dims = [_int(a, "param_zeros", line) for a in args]
    name = session.new_param_name()
    shape = (dims[0],) if len(dims) == 1 else (dims[0], dims[1])
    t = autodiff.make_param(session.pool, np.zeros(shape, dtype=np.float32), name)
    session.param_group.add(name, t)
    return t


def _linear(session, frame, args, line):
    _need(args, 3, "linear", line)
    x = _tensor(args[0], "linear", line)
    w = _tensor(args[1], "linear", line)
    b = _tensor(args[2], "linear", line)
    return session.note_tensor(nn.linear(x, w, b, session.pool), x, w, b)


def _activation(kind):
    def run(session, frame, args, line):
        _need(args, 1, kind, line)
        x = _tensor(args[0], kind, line)
        return session.note_tensor(autodiff.rec_elementwise(kind, x, None, session.pool), x)

    return run


def _onehot(session, frame, args, line):
    _need(args, 2, "onehot", line)
    t = _tensor(args[0], "onehot", line)
    classes = _int(args[1], "onehot", line)
    return session.note_tensor(autodiff.rec_onehot(t, classes, session.pool), t)


def _cross_entropy(session, frame, args, line):
    _need(args, 2, "cross_entropy", line)
    logits = _tensor(args[0], "cross_entropy", line)
    targets = _tensor(args[1], "cross_entropy", line)
    return session.note_tensor(nn.cross_entropy(logits, targets, session.pool), logits, targets)


def _sum_loss(session, frame, args, line):
    _need(args, 1, "sum_loss", line)
    x = _tensor(args[0], "sum_loss", line)
    return session.note_tensor(nn.sum_loss(x, session.pool), x)


# --- training steps ----------------------------------------------------------------

def _backward(session, frame, args, line):
    _need(args, 0, "backward", line)
    tape_backward(session.tape(), session.grad_cache, session.pool)
    return None


def _zero_grad(session, frame, args, line):
    _need(args, 0, "zero_grad", line)
    session.grad_cache.zero_after_step()
    return None


def _tape_clear(session, frame, args, line):
    _need(args, 0, "tape_clear", line)
    session.tape().clear(session.pool)
    return None


def _sgd_step(session, frame, args, line):
    _need(args, 2, "sgd_step", line)
    lr = _number(args[0], "sgd_step", line)
    momentum = _number(args[1], "sgd_step", line)
    nn.sgd_step(session.param_group, session.grad_cache, lr, momentum)
    return None


def _adamw_step(session, frame, args, line):
    _need(args, 2, "adamw_step", line)
    lr = _number(args[0], "adamw_step", line)
    wd = _number(args[1], "adamw_step", line)
    hp = nn.Hyperparams(learning_rate=lr, weight_decay=wd)
    nn.adamw_step(session.param_group, session.grad_cache, hp)
    return None


def _clip_grad_norm(session, frame, args, line):
    _need(args, 1, "clip_grad_norm", line)
    max_norm = _number(args[0], "clip_grad_norm", line)
    return nn.clip_grad_norm(session.grad_cache, max_norm)


# --- data ---------------------------------------------------------------------------

def _load_csv(session, frame, args, line):
    _need(args, 2, "load_csv", line)
    path, label = args
    if not isinstance(path, str) or not isinstance(label, str):
        raise NskTypeError("load_csv expects (path, label_column) strings", line)
    script_dir = getattr(session, "script_dir", None)
    if not os.path.isabs(path) and not os.path.exists(path) and script_dir:
        candidate = os.path.join(script_dir, path)
        if os.path.exists(candidate):
            path = candidate
    ds = dataset.load_csv(path, label)
    ds.seed = session.seed
    return ds


def _set_batch_size(session, frame, args, line):
    _need(args, 2, "set_batch_size", line)
    ds = _dataset(args[0], "set_batch_size", line)
    n = _int(args[1], "set_batch_size", line)
    if n < 1:
        raise NskRuntimeError(f"batch size must be at least 1, got {n}", line)
    ds.batch_size = n
    return None


def _set_shuffle(session, frame, args, line):
    _need(args, 2, "set_shuffle", line)
    ds = _dataset(args[0], "set_shuffle", line)
    if not isinstance(args[1], bool):
        raise NskTypeError("set_shuffle expects a boolean", line)
    ds.shuffle = args[1]
    return None


def _reset_epoch(session, frame, args, line):
    _need(args, 1, "reset_epoch", line)
    dataset.reset_epoch(_dataset(args[0], "reset_epoch", line), workers=session.workers)
    return None


def _num_batches(session, frame, args, line):
    _need(args, 1, "num_batches", line)
    return float(_dataset(args[0], "num_batches", line).num_batches())


def _num_rows(session, frame, args, line):
    _need(args, 1, "num_rows", line)
    return float(_dataset(args[0], "num_rows", line).num_rows)


def _next_batch(session, frame, args, line):
    _need(args, 1, "next_batch", line)
    ds = _dataset(args[0], "next_batch", line)
    item = dataset.next_batch(ds, session.pool)
    if item is END_OF_DATA:
        return Batch(None, None, ended=True)
    feats, labs = item
    session.note_tensor(feats)
    session.note_tensor(labs)
    return Batch(feats, labs)


def _features(session, frame, args, line):
    _need(args, 1, "features", line)
    b = _batch(args[0], "features", line)
    if b.ended:
        raise NskRuntimeError("the end-of-epoch batch has no features", line)
    return b.features


def _labels(session, frame, args, line):
    _need(args, 1, "labels", line)
    b = _batch(args[0], "labels", line)
    if b.ended:
        raise NskRuntimeError("the end-of-epoch batch has no labels", line)
    return b.labels


def _is_end(session, frame, args, line):
    _need(args, 1, "is_end", line)
    return _batch(args[0], "is_end", line).ended


def _all_features(session, frame, args, line):
    _need(args, 1, "all_features", line)
    ds = _dataset(args[0], "all_features", line)
    return session.note_tensor(autodiff.make_data(session.pool, ds.features))


def _all_labels(session, frame, args, line):
    _need(args, 1, "all_labels", line)
    ds = _dataset(args[0], "all_labels", line)
    return session.note_tensor(autodiff.make_data(session.pool, ds.labels))


BUILTINS = {
    "print": _print,
    "item": _item,
    "accuracy": _accuracy,
    "xavier_uniform": _xavier_uniform,
    "param_zeros": _param_zeros,
    "linear": _linear,
    "relu": _activation("relu"),
    "sigmoid": _activation("sigmoid"),
    "tanh": _activation("tanh"),
    "onehot": _onehot,
    "cross_entropy": _cross_entropy,
    "sum_loss": _sum_loss,
    "backward": _backward,
    "zero_grad": _zero_grad,
    "tape_clear": _tape_clear,
    "sgd_step": _sgd_step,
    "adamw_step": _adamw_step,
    "clip_grad_norm": _clip_grad_norm,
    "load_csv": _load_csv,
    "set_batch_size": _set_batch_size,
    "set_shuffle": _set_shuffle,
    "reset_epoch": _reset_epoch,
    "num_batches": _num_batches,
    "num_rows": _num_rows,
    "next_batch": _next_batch,
    "features": _features,
    "labels": _labels,
    "is_end": _is_end,
    "all_features": _all_features,
    "all_labels": _all_labels,
}
