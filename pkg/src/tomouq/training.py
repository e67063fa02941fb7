"""Training loop for the conditional sampler.

Per batch: draw latents from the teacher, unroll the refiner from the
back-projection with zeroed memory, evaluate the reconstruction and KL
terms, and update all three networks with ADAM. A non-finite loss aborts
immediately, dumping the offending batch for inspection.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import container
from .autodiff import adam_step
from .cvae import ModelBundle, loss_minibatch, save_bundle


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the batch index and dump path."""

    def __init__(self, batch_index, dump_path=None):
        self.batch_index = batch_index
        self.dump_path = dump_path
        msg = f"non-finite loss at batch {batch_index}"
        if dump_path:
            msg += f" (state dumped to {dump_path})"
        super().__init__(msg)


@dataclass
class TrainConfig:
    T: int
    M: int
    L: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0   # 0 -> max(1, T // 20)
    rng_seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.M < 1 or self.L < 1:
            raise ValueError("T, M and L must all be >= 1")

    @property
    def cadence(self):
        return self.checkpoint_every if self.checkpoint_every > 0 else max(1, self.T // 20)


def train(config: TrainConfig, stream, bundle: ModelBundle, out_dir=None):
    """Run `config.T` batches from `stream` against `bundle` in place.

    Returns (bundle, loss_trace). When `out_dir` is given, periodic
    checkpoints and the per-batch loss trace are written there.
    """
    rng = np.random.default_rng(config.rng_seed)
    trace = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for t in range(config.T):
        batch = next(stream)
        if len(batch) != config.M:
            raise ValueError(f"stream yielded batch of {len(batch)}, expected {config.M}")
        loss, grads = loss_minibatch(bundle, batch, L=config.L, rng=rng)
        if not np.isfinite(loss):
            dump = _dump_bad_batch(out_dir, t, batch) if out_dir else None
            raise TrainingDiverged(t, dump)
        for name, params in (("teacher", bundle.teacher),
                             ("student", bundle.student),
                             ("recurrent", bundle.recurrent)):
            adam_step(params, grads[name], lr=config.lr, beta1=config.beta1,
                      beta2=config.beta2, eps=config.eps)
        trace.append(loss)
        if out_dir is not None and (t + 1) % config.cadence == 0:
            save_bundle(os.path.join(out_dir, f"checkpoint_{t + 1:06d}.tqpk"), bundle)
    if out_dir is not None:
        save_bundle(os.path.join(out_dir, "model.tqpk"), bundle)
        write_loss_trace(os.path.join(out_dir, "loss_trace.tsv"), trace)
    return bundle, trace


def write_loss_trace(path, trace) -> None:
    with open(path, "w") as fh:
        fh.write("batch\tloss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i}\t{v:.17g}\n")


def read_loss_trace(path):
    values = []
    with open(path) as fh:
        header = fh.readline()
        if header.strip() != "batch\tloss":
            raise ValueError(f"not a loss trace file: {path}")
        for line in fh:
            _, v = line.split("\t")
            values.append(float(v))
    return values


def _dump_bad_batch(out_dir, batch_index, batch):
    path = os.path.join(out_dir, f"diverged_batch_{batch_index:06d}.tqpk")
    arrays = {}
    for i, item in enumerate(batch):
        arrays[f"item{i}/x"] = item.x
        arrays[f"item{i}/y"] = item.y
    container.save_arrays(path, arrays, meta={"kind": "diverged-batch",
                                              "batch_index": batch_index,
                                              "peaks": [it.peak for it in batch]})
    return path
