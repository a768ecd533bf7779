import numpy as np
import pytest

from strm import config as cfgmod
from strm import tensor as T
from strm.evaluation import extract_descriptor
from strm.synthdata import sample_batch
from strm.tensor import Tensor
from strm.trainer import (
    SGD,
    CheckpointError,
    TrainingDiverged,
    build,
    checkpoint_bytes,
    compute_losses,
    evaluate_synthetic,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_step,
)


def _batch(cfg, seed=0):
    return sample_batch(cfg.data, seed, cfg.train.n_ids, cfg.train.k_seqs)


def test_sgd_plain_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")
    p.grad = np.array([0.5, 0.5])
    SGD([("w", p)], lr=0.1, momentum=0.0, weight_decay=0.0, nesterov=False).step()
    np.testing.assert_allclose(p.data, [0.95, -2.05])


def test_sgd_nesterov_two_steps_match_hand_computation():
    p = Tensor(np.array([1.0]), requires_grad=True, name="w")
    opt = SGD([("w", p)], lr=0.1, momentum=0.9, weight_decay=0.01, nesterov=True)
    x, buf = 1.0, 0.0
    for g in (2.0, -1.0):
        p.grad = np.array([g])
        opt.step()
        d = g + 0.01 * x
        buf = 0.9 * buf + d
        x -= 0.1 * (d + 0.9 * buf)
    assert p.data[0] == pytest.approx(x, abs=1e-15)


def test_no_decay_for_biases_and_bn():
    named = [(n, Tensor(np.ones(2), requires_grad=True, name=n)) for n in ("fc_b", "bn.gamma", "bn.beta", "fc_w")]
    for _, t in named:
        t.grad = np.zeros(2)
    SGD(named, lr=1.0, momentum=0.0, weight_decay=0.5).step()
    values = {n: t.data[0] for n, t in named}
    assert values["fc_b"] == values["bn.gamma"] == values["bn.beta"] == 1.0
    assert values["fc_w"] == 0.5


def test_zero_lr_leaves_params_unchanged(tiny_cfg):
    cfg = cfgmod.loads(cfgmod.dumps(tiny_cfg), {"lr": "0"})
    model, opt = build(cfg)
    before = [p.data.copy() for p in model.parameters()]
    train_step(model, _batch(cfg), cfg, opt, 0)
    assert all(np.array_equal(b, p.data) for b, p in zip(before, model.parameters()))


def test_one_step_losses_finite_positive(tiny_cfg):
    model, opt = build(tiny_cfg)
    res = train_step(model, _batch(tiny_cfg), tiny_cfg, opt, 0)
    assert all(np.isfinite(v) and v > 0 for v in (res.l_c, res.l_p, res.total))
    assert res.total == pytest.approx(res.l_c + res.l_v + res.l_p)


def test_overfit_fixed_batch(tiny_cfg):
    model, opt = build(tiny_cfg)
    batch = _batch(tiny_cfg, 5)
    losses = [train_step(model, batch, tiny_cfg, opt, i).total for i in range(50)]
    assert losses[-1] < losses[0]


def test_disabled_term_contributes_no_gradient(tiny_cfg):
    """Dropping L_p changes a gate weight's gradient by exactly L_p's share."""
    batch = _batch(tiny_cfg)

    def grad_of(**flags):
        cfg = cfgmod.loads(cfgmod.dumps(tiny_cfg), {k: str(v).lower() for k, v in flags.items()})
        model, _ = build(cfg)
        terms = compute_losses(model, batch, cfg, 0)
        T.backward(terms.total)
        return model.gate.spatial_w2.grad.copy()

    only_p = grad_of(use_lc=False, use_lv=False, use_lp=True)
    without_p = grad_of(use_lp=False)
    full = grad_of()
    np.testing.assert_allclose(full, only_p + without_p, rtol=1e-10, atol=1e-16)
    with pytest.raises(cfgmod.ConfigError):
        grad_of(use_lc=False, use_lv=False, use_lp=False)


def test_nan_raises_training_diverged(tiny_cfg):
    model, opt = build(tiny_cfg)
    batch = _batch(tiny_cfg)
    batch.images[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_step(model, batch, tiny_cfg, opt, 0)


def test_zero_iterations_equals_initialisation(tiny_cfg):
    cfg = cfgmod.loads(cfgmod.dumps(tiny_cfg), {"iterations": "0"})
    st = fit(cfg)
    model, _ = build(cfg)
    for (n, a), (_, b) in zip(st.model.named_parameters(), model.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_fit_is_deterministic(tiny_cfg):
    a, b = fit(tiny_cfg), fit(tiny_cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert a.metrics == b.metrics


def test_checkpoint_roundtrip_bitwise(tiny_cfg, tmp_path):
    st = fit(tiny_cfg)
    save_checkpoint(tmp_path / "a.strm", st)
    back = load_checkpoint(tmp_path / "a.strm")
    assert checkpoint_bytes(back) == (tmp_path / "a.strm").read_bytes()
    r1 = evaluate_synthetic(st.model, tiny_cfg, trials=1)
    r2 = evaluate_synthetic(back.model, back.config, trials=1)
    assert np.array_equal(r1.cmc_mean, r2.cmc_mean) and r1.map_mean == r2.map_mean


def test_checkpoint_layout(tiny_cfg):
    blob = checkpoint_bytes(fit(cfgmod.loads(cfgmod.dumps(tiny_cfg), {"iterations": "1"})))
    assert blob[:4] == b"STRM"
    assert int.from_bytes(blob[4:8], "little") == 1
    n = int.from_bytes(blob[8:12], "little")
    assert blob[12:12 + n].decode().startswith("[train]")


def test_resume_matches_uninterrupted(tiny_cfg, tmp_path):
    full = fit(tiny_cfg)
    short_cfg = cfgmod.loads(cfgmod.dumps(tiny_cfg), {"iterations": "1"})
    save_checkpoint(tmp_path / "p.strm", fit(short_cfg))
    part = load_checkpoint(tmp_path / "p.strm")
    part.config.train.iterations = tiny_cfg.train.iterations
    resumed = fit(part.config, state=part)
    for (n, a), (_, b) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(a.data, b.data), n


@pytest.mark.parametrize("blob,match", [
    (b"XXXX" + bytes(20), "bad magic"),
    (b"STRM" + (7).to_bytes(4, "little"), "version"),
    (b"STRM" + (1).to_bytes(4, "little") + (500).to_bytes(4, "little"), "corrupt"),
])
def test_bad_checkpoints_name_the_file(tmp_path, blob, match):
    p = tmp_path / "broken.strm"
    p.write_bytes(blob)
    with pytest.raises(CheckpointError, match=match) as info:
        load_checkpoint(p)
    assert "broken.strm" in str(info.value)


def test_truncated_checkpoint(tiny_cfg, tmp_path):
    p = tmp_path / "t.strm"
    p.write_bytes(checkpoint_bytes(fit(tiny_cfg))[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_extract_descriptor_eval_mode(tiny_cfg):
    st = fit(tiny_cfg)
    seq = sample_batch(tiny_cfg.data, 3, 2, 2).images[0]
    a = extract_descriptor(seq, st.model)
    assert a.tobytes() == extract_descriptor(seq, st.model).tobytes()
    st.model.classifier.dropout = 0.9  # irrelevant in eval mode
    assert a.tobytes() == extract_descriptor(seq, st.model).tobytes()
    with pytest.raises(ValueError):
        extract_descriptor(seq[0], st.model)


def test_frame_reversal_changes_descriptor(tiny_cfg):
    cfg = cfgmod.loads(cfgmod.dumps(tiny_cfg), {"frames": "3"})
    model, _ = build(cfg)
    seq = sample_batch(cfg.data, 1, 2, 2).images[0]
    assert np.abs(extract_descriptor(seq, model) - extract_descriptor(seq[::-1].copy(), model)).max() > 1e-6


@pytest.mark.parametrize("flags", ["use_rru=false", "use_stim=false", "rru_variant=spatial_only",
                                   "rru_variant=channel_only", "rru_variant=appearance_diff_only",
                                   "rru_variant=raw_concat", "use_lc=false,use_lp=false"])
def test_ablations_train(tiny_text, flags):
    cfg = cfgmod.loads(tiny_text, cfgmod.parse_assignments(flags + ",iterations=1"))
    st = fit(cfg)
    assert np.isfinite(st.metrics[-1]["total"])
    assert evaluate_synthetic(st.model, cfg, trials=1).cmc_mean.shape[0] >= 1
