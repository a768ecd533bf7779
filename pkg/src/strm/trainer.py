"""SGD training loop, loss assembly and the binary checkpoint format."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as cfgmod
from . import tensor as T
from .config import RunConfig
from .evaluation import CmcResult, EvalSet, evaluate, extract_descriptor, multi_trial
from .model import ForwardOutput, VideoReidModel
from .nn import is_no_decay
from .objectives import (
    batch_hard_triplet,
    cross_entropy_losses,
    part_features,
    part_level_loss,
    total_loss,
)
from .synthdata import VideoBatch, render_eval_split, sample_batch
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

MAGIC = b"STRM"
FORMAT_VERSION = 1
_MODEL_TAG = 101
_DROPOUT_TAG = 103


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class SGD:
    """SGD with (Nesterov) momentum and L2 weight decay folded into the gradient."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, nesterov: bool = True):
        self.params = named_params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self, grad_clip: float = 0.0) -> None:
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in self.params}
        if grad_clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > grad_clip:
                grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
        for name, p in self.params:
            d = grads[name]
            if self.weight_decay and not is_no_decay(name):
                d = d + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += d
            if self.nesterov:
                d = d + self.momentum * buf
            else:
                d = buf
            p.data -= self.lr * d

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class StepResult:
    l_c: float
    l_v: float
    l_p: float
    total: float


@dataclass
class LossTerms:
    l_c: Tensor
    l_v: Tensor
    l_p: Tensor
    total: Tensor
    output: ForwardOutput


def compute_losses(model: VideoReidModel, batch: VideoBatch, cfg: RunConfig,
                   dropout_rng: np.random.Generator | int | None, training: bool = True) -> LossTerms:
    tc = cfg.train
    out = model.forward(batch.images, training=training)
    labels = batch.labels
    zero = Tensor(0.0)
    l_c = l_v = l_p = zero
    if tc.use_lc:
        logits = model.classifier(out.descriptor, training, dropout_rng)
        l_c = cross_entropy_losses(logits, out.aux_logits, labels)
    if tc.use_lv:
        f = T.reshape(out.descriptor, (batch.n_ids, batch.k_seqs, -1))
        l_v = batch_hard_triplet(f, tc.margin)
    if tc.use_lp:
        parts = part_features(out.refined)
        parts = T.reshape(parts, (batch.n_ids, batch.k_seqs, *parts.shape[1:]))
        l_p = part_level_loss(parts, tc.margin)
    total = total_loss(l_c, l_v, l_p, tc.use_lc, tc.use_lv, tc.use_lp)
    return LossTerms(l_c, l_v, l_p, total, out)


def train_step(model: VideoReidModel, batch: VideoBatch, cfg: RunConfig, opt: SGD,
               dropout_rng: np.random.Generator | int | None = None) -> StepResult:
    """One forward/backward/update on ``batch``."""
    opt.zero_grad()
    try:
        terms = compute_losses(model, batch, cfg, dropout_rng)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value during forward pass: {exc}") from exc
    T.backward(terms.total)
    for name, p in opt.params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient in parameter '{name}'")
    opt.step(cfg.train.grad_clip)
    return StepResult(terms.l_c.item(), terms.l_v.item(), terms.l_p.item(), terms.total.item())


def build(cfg: RunConfig) -> tuple[VideoReidModel, SGD]:
    cfg.sync()
    rng = np.random.default_rng([cfg.train.seed, _MODEL_TAG])
    model = VideoReidModel(cfg.model, rng)
    tc = cfg.train
    opt = SGD(list(model.named_parameters()), tc.lr, tc.momentum, tc.weight_decay, tc.nesterov)
    return model, opt


@dataclass
class TrainState:
    model: VideoReidModel
    opt: SGD
    config: RunConfig
    iteration: int = 0
    metrics: list[dict] = field(default_factory=list)


def fit(cfg: RunConfig, on_step: Callable[[int, StepResult], None] | None = None,
        state: TrainState | None = None) -> TrainState:
    """Train for ``cfg.train.iterations`` steps (resuming ``state`` if given)."""
    if state is None:
        model, opt = build(cfg)
        state = TrainState(model, opt, cfg)
    tc = cfg.train
    while state.iteration < tc.iterations:
        it = state.iteration
        batch = sample_batch(cfg.data, _epoch_seed(tc.seed, it), tc.n_ids, tc.k_seqs)
        drop_rng = np.random.default_rng([tc.seed, _DROPOUT_TAG, it])
        res = train_step(state.model, batch, cfg, state.opt, drop_rng)
        state.iteration += 1
        row = {"iteration": state.iteration, "L_c": res.l_c, "L_v": res.l_v, "L_p": res.l_p, "total": res.total}
        if tc.eval_every and state.iteration % tc.eval_every == 0:
            row["rank1"] = evaluate_synthetic(state.model, cfg, trials=1).cmc_mean[0]
        state.metrics.append(row)
        if tc.log_every and state.iteration % tc.log_every == 0:
            log.info("iter %d  L_c %.4f  L_v %.4f  L_p %.4f  total %.4f", state.iteration,
                     res.l_c, res.l_v, res.l_p, res.total)
        if on_step is not None:
            on_step(state.iteration, res)
    return state


def _epoch_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def describe_all(model: VideoReidModel, sequences: list[np.ndarray]) -> np.ndarray:
    return np.stack([extract_descriptor(s, model) for s in sequences])


def evaluate_synthetic(model: VideoReidModel, cfg: RunConfig, trials: int | None = None,
                       trial_offset: int = 0, keep_distances: bool = False):
    """Held-out synthetic probe/gallery evaluation averaged over trials."""
    ec = cfg.eval
    trials = ec.trials if trials is None else trials
    results: list[CmcResult] = []
    dists = []
    for trial in range(trial_offset, trial_offset + trials):
        probe, gallery = render_eval_split(cfg.data, trial, ec.probes_per_id, ec.gallery_per_id,
                                           ec.probe_camera, ec.gallery_camera)
        es = EvalSet(describe_all(model, probe.frames), probe.identities,
                     describe_all(model, gallery.frames), gallery.identities,
                     probe.cameras, gallery.cameras)
        res, dist = evaluate(es, ec.max_rank)
        results.append(res)
        dists.append(dist)
    summary = multi_trial(results)
    return (summary, dists) if keep_distances else summary


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _named_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"param.{n}", p.data) for n, p in state.model.named_parameters()]
    arrays += [(f"buffer.{n}", b) for n, b in state.model.named_buffers()]
    arrays += [(f"momentum.{n}", b) for n, b in state.opt.buffers.items()]
    seed = state.config.train.seed
    arrays.append(("meta.iteration", np.array([float(state.iteration)])))
    arrays.append(("meta.rng", np.array([float(seed >> 32), float(seed & 0xFFFFFFFF), float(state.iteration)])))
    return arrays


def checkpoint_bytes(state: TrainState) -> bytes:
    """Magic, u32 version, config text, then (name, u64 count, f64 LE payload) per array."""
    text = cfgmod.dumps(state.config).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(text)), text]
    arrays = _named_arrays(state)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<Q", flat.size), flat.tobytes()]
    return b"".join(parts)


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    try:
        pos = 4
        (version,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (tlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        cfg = cfgmod.loads(blob[pos:pos + tlen].decode("utf-8"))
        pos += tlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if pos + 8 * n > len(blob):
                raise CheckpointError(f"{path}: truncated payload for '{name}'")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
    except (struct.error, UnicodeDecodeError, cfgmod.ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    model, opt = build(cfg)
    state = TrainState(model, opt, cfg, int(arrays.get("meta.iteration", [0])[0]))
    targets = [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    targets += [(f"buffer.{n}", b) for n, b in model.named_buffers()]
    targets += [(f"momentum.{n}", b) for n, b in opt.buffers.items()]
    for name, dest in targets:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array '{name}'")
        src = arrays[name]
        if src.size != dest.size:
            raise CheckpointError(f"{path}: '{name}' has {src.size} values, expected {dest.size}")
        dest[...] = src.reshape(dest.shape)
    return state
