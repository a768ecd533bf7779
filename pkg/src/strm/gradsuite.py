"""Finite-difference checks of each trainable block at small shapes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .objectives import batch_hard_triplet, cross_entropy_losses, part_features, part_level_loss
from .rru import GateModelParams, refine_sequence
from .stim import StimParams, stim_forward
from .tensor import Tensor

MODULES = ("rru", "stim", "loss", "backbone")

# feature-map shape of the checks: channels, frames, height, width
C, T_LEN, H, W = 4, 3, 4, 3
BATCH = 2


@dataclass
class ModuleReport:
    module: str
    seeds: int
    checked: int
    retried: int
    max_rel_err: float
    worst: str

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


Case = tuple[Callable[[], Tensor], list[Tensor]]

# Conv biases that feed a batch-normalised layer get an identically zero
# gradient under batch statistics, so they are checked in eval mode instead.
_PRE_BN_BIAS = ("transition_b", "block1_b", "block2_b", "conv0_b", "conv1_b", "conv2_b")


def _split_modes(f: Callable[[bool], Tensor], inputs: list[tuple[str, Tensor]]) -> list[Case]:
    """Train-mode case over all inputs except pre-BN biases, eval-mode case over those."""
    for n, t in inputs:
        t.name = t.name or n
    train = [t for n, t in inputs if n not in _PRE_BN_BIAS]
    biases = [t for n, t in inputs if n in _PRE_BN_BIAS]
    cases = [(lambda: f(True), train)]
    if biases:
        cases.append((lambda: f(False), biases))
    return cases


def _randomise_running_stats(states, rng: np.random.Generator) -> None:
    for st in states:
        st.running_mean[:] = rng.normal(size=st.running_mean.shape)
        st.running_var[:] = rng.uniform(0.5, 2.0, size=st.running_var.shape)


def _probe(shape, rng) -> np.ndarray:
    """Random weights for a linear read-out, so every output coordinate counts."""
    return rng.normal(size=shape)


def _bn_states(module) -> list:
    from .tensor import BatchNormState
    found = []
    for val in vars(module).values():
        if isinstance(val, BatchNormState):
            found.append(val)
    return found


def _rru_case(rng: np.random.Generator) -> list[Case]:
    params = GateModelParams(C, H, W, "full", rng)
    frames = [Tensor(rng.normal(size=(BATCH, C, H, W)), name=f"x{t}") for t in range(T_LEN)]
    r = _probe((BATCH, C, T_LEN, H, W), rng)
    _randomise_running_stats(_bn_states(params), rng)

    def f(training):
        return T.sum_(T.mul(refine_sequence(frames, params, training=training).values, r))

    named = [(t.name, t) for t in frames] + list(params.named_parameters())
    return _split_modes(f, named)


def _stim_case(rng: np.random.Generator) -> list[Case]:
    # one sequence keeps the 256x256x27 conv affordable; BN still sees T*H*W positions
    params = StimParams(C, rng)
    s = Tensor(rng.normal(size=(1, C, T_LEN, H, W)), name="s")
    r = _probe((1, params.width), rng)
    _randomise_running_stats(_bn_states(params), rng)

    def f(training):
        return T.sum_(T.mul(stim_forward(s, params, training=training), r))

    return _split_modes(f, [("s", s)] + list(params.named_parameters()))


def _loss_case(rng: np.random.Generator) -> list[Case]:
    n, k, d, classes = 3, 2, 5, 4
    feats = Tensor(rng.normal(size=(n, k, d)), name="f")
    refined = Tensor(rng.normal(size=(n * k, C, T_LEN, H, W)), name="refined")
    logits = Tensor(rng.normal(size=(n * k, classes)), name="logits")
    aux = Tensor(rng.normal(size=(n * k, T_LEN, classes)), name="aux")
    labels = np.repeat(np.arange(n), k) % classes

    def f():
        parts = part_features(refined)
        parts = T.reshape(parts, (n, k, H, C))
        return (batch_hard_triplet(feats, 0.4) + part_level_loss(parts, 0.4)
                + cross_entropy_losses(logits, aux, labels))

    return [(f, [feats, refined, logits, aux])]


def _backbone_case(rng: np.random.Generator) -> list[Case]:
    # three stride-2 stages take a 32x24 frame to a 4x3 feature map
    cfg = BackboneConfig(widths=(4, 4, C), image_size=(8 * H, 8 * W), num_identities=5)
    net = Backbone(cfg, rng)
    frames = Tensor(rng.normal(size=(BATCH * T_LEN, 3, 8 * H, 8 * W)), name="frames")
    r = _probe((BATCH * T_LEN, C, H, W), rng)
    ra = _probe((BATCH * T_LEN, 5), rng)
    _randomise_running_stats(_bn_states(net), rng)

    def f(training):
        out = net.extract(frames, training=training)
        return T.sum_(T.mul(out.values, r)) + T.sum_(T.mul(net.aux_logits(out.penultimate), ra))

    return _split_modes(f, [("frames", frames)] + list(net.named_parameters()))


_CASES = {"rru": _rru_case, "stim": _stim_case, "loss": _loss_case, "backbone": _backbone_case}


def check_module(module: str, seeds: int = 20, tol: float = 1e-4, max_coords: int = 8,
                 base_seed: int = 0) -> ModuleReport:
    """Gradcheck ``module`` on ``seeds`` random instances.

    At most ``max_coords`` randomly chosen coordinates per input tensor are
    perturbed in each instance.
    """
    if module not in _CASES:
        raise KeyError(f"unknown module {module!r}; choose from {', '.join(MODULES)}")
    worst, worst_at, checked, retried = 0.0, "", 0, 0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, MODULES.index(module), s])
        for f, inputs in _CASES[module](rng):
            rep = T.gradcheck(f, inputs, tol=tol, max_coords=max_coords, rng=rng)
            checked += rep.checked
            retried += rep.retried
            if rep.max_rel_err >= worst:
                worst, worst_at = rep.max_rel_err, f"seed {s}: {rep.worst}"
    return ModuleReport(module, seeds, checked, retried, worst, worst_at)


def format_table(reports: list[ModuleReport], tol: float) -> str:
    lines = [f"{'module':<10}{'seeds':>6}{'coords':>8}{'retried':>9}{'max_rel_err':>14}  status"]
    for r in reports:
        status = "PASS" if r.passed(tol) else "FAIL"
        lines.append(f"{r.module:<10}{r.seeds:>6}{r.checked:>8}{r.retried:>9}{r.max_rel_err:>14.3e}  {status}")
    for r in reports:
        if not r.passed(tol):
            lines.append(f"  worst {r.module}: {r.worst}")
    return "\n".join(lines)
