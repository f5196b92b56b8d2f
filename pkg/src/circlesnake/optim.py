"""Adam optimizer, step learning-rate schedule and checkpoint container."""
from __future__ import annotations

import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = "circlesnake-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    Gradients are left untouched; the caller resets them.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= update.astype(p.dtype, copy=False)
    return state


def step_lr(base_lr: float, epoch: int, milestones, gamma: float) -> float:
    """Learning rate after ``epoch`` epochs: multiplied by ``gamma`` at each milestone passed."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * gamma ** passed


def save_checkpoint(path, params: Mapping[str, np.ndarray], state: AdamState | None = None,
                    buffers: Mapping[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write parameters, buffers, optimizer state and metadata to an npz container.

    The file is written to a temporary sibling and renamed, so a crash never
    leaves a half-written checkpoint under ``path``.
    """
    arrays: dict[str, np.ndarray] = {
        "__magic__": np.array(CHECKPOINT_MAGIC),
        "__version__": np.array(CHECKPOINT_VERSION),
        "__meta__": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name, arr in params.items():
        arrays[f"param/{name}"] = np.asarray(arr)
    for name, arr in (buffers or {}).items():
        arrays[f"buffer/{name}"] = np.asarray(arr)
    if state is not None:
        arrays["adam/hyper"] = np.array(
            [state.lr, state.beta1, state.beta2, state.epsilon, state.weight_decay])
        arrays["adam/step"] = np.array(state.step_count)
        for name, m in state.first_moment.items():
            arrays[f"adam/m/{name}"] = m
            arrays[f"adam/v/{name}"] = state.second_moment[name]
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    state: AdamState | None
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint fully into memory, validating magic and version."""
    try:
        with np.load(os.fspath(path), allow_pickle=False) as z:
            contents = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from exc
    magic = contents.get("__magic__")
    if magic is None or str(magic) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a circlesnake checkpoint")
    version = int(contents["__version__"])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    params, buffers = {}, {}
    m, v = {}, {}
    state = None
    for key, arr in contents.items():
        if key.startswith("param/"):
            params[key[6:]] = arr
        elif key.startswith("buffer/"):
            buffers[key[7:]] = arr
        elif key.startswith("adam/m/"):
            m[key[7:]] = arr.copy()
        elif key.startswith("adam/v/"):
            v[key[7:]] = arr.copy()
    if "adam/hyper" in contents:
        lr, b1, b2, eps, wd = (float(x) for x in contents["adam/hyper"])
        state = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, weight_decay=wd,
                          step_count=int(contents["adam/step"]),
                          first_moment=m, second_moment=v)
    meta = json.loads(str(contents["__meta__"]))
    return Checkpoint(params, buffers, state, meta)
