import numpy as np
import pytest
from PIL import Image

from strm.synthdata import (
    Corruption,
    SynthConfig,
    gen_identity,
    load_frame_dirs,
    read_split_file,
    render_eval_split,
    render_sequence,
    sample_batch,
    with_corruption,
)


@pytest.fixture
def cfg():
    return SynthConfig(num_identities=6, frames=3)


def test_sequence_shape_and_range(cfg):
    seq = render_sequence(2, 1, 3, cfg.corruption, 5, cfg)
    assert seq.shape == (3, 3, 64, 32)
    assert seq.min() >= 0.0 and seq.max() <= 1.0


def test_same_seed_same_pixels(cfg):
    a = render_sequence(1, 0, 3, cfg.corruption, [1, 2], cfg)
    b = render_sequence(1, 0, 3, cfg.corruption, [1, 2], cfg)
    assert a.tobytes() == b.tobytes()


def test_batch_is_deterministic_and_pk(cfg):
    a = sample_batch(cfg, 42, 3, 2)
    b = sample_batch(cfg, 42, 3, 2)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.shape == (6, 3, 3, 64, 32)
    assert len(set(a.labels)) == 3
    assert all(a.labels[i] == a.labels[i + 1] for i in range(0, 6, 2))


def test_batch_rejects_too_many_identities(cfg):
    with pytest.raises(ValueError):
        sample_batch(cfg, 0, 7, 2)


def test_identities_differ(cfg):
    off = Corruption.off()
    a = render_sequence(0, 0, 1, off, 0, cfg)
    b = render_sequence(1, 0, 1, off, 0, cfg)
    assert np.abs(a - b).mean() > 0.02


def test_identity_out_of_range(cfg):
    with pytest.raises(ValueError):
        gen_identity(6, 0, cfg)


def test_occlusion_masks_mark_painted_rectangles(cfg):
    c = with_corruption(cfg, occlusion_prob=1.0, blur_prob=0.0).corruption
    seq, masks = render_sequence(0, 0, 3, c, 3, cfg, with_masks=True)
    assert masks.shape == (3, 64, 32) and masks.any(axis=(1, 2)).all()
    for t in range(3):
        # the patch is a flat colour
        patch = seq[t][:, masks[t]]
        assert np.ptp(patch, axis=1).max() == 0.0


def test_no_occlusion_without_probability(cfg):
    _, masks = render_sequence(0, 0, 4, Corruption.off(), 3, cfg, with_masks=True)
    assert not masks.any()


def test_eval_split_is_labelled_and_disjoint_from_training(cfg):
    probe, gallery = render_eval_split(cfg, 0, 2, 1)
    assert len(probe.frames) == 12 and len(gallery.frames) == 6
    assert set(probe.cameras) == {0} and set(gallery.cameras) == {1}
    train = sample_batch(cfg, 0, 6, 2)
    for seq in probe.frames:
        assert not any(np.array_equal(seq, t) for t in train.images)


def test_bad_corruption_config():
    with pytest.raises(ValueError):
        Corruption(occlusion_prob=1.5)


def _write_tree(root, people=("p1", "p2"), cams=("c1", "c2"), frames=2):
    rng = np.random.default_rng(0)
    for p in people:
        for c in cams:
            d = root / p / c / "s1"
            d.mkdir(parents=True)
            for f in range(frames):
                Image.fromarray(rng.integers(0, 256, size=(16, 8, 3), dtype=np.uint8)).save(d / f"{f:03d}.png")


def test_load_frame_dirs(tmp_path):
    _write_tree(tmp_path)
    (tmp_path / "split.txt").write_text("p1\ttrain\np2\ttest\n")
    full = load_frame_dirs(tmp_path, image_size=(8, 4))
    assert len(full.frames) == 4 and full.frames[0].shape == (2, 3, 8, 4)
    assert list(full.identities) == [0, 0, 1, 1]
    test = load_frame_dirs(tmp_path, tmp_path / "split.txt", "test", image_size=(8, 4))
    assert test.names == ["p2/c1/s1", "p2/c2/s1"]


def test_load_frame_dirs_min_length_and_bad_image(tmp_path):
    _write_tree(tmp_path, people=("p1",), cams=("c1",), frames=1)
    with pytest.raises(ValueError, match="at least 3"):
        load_frame_dirs(tmp_path, min_length=3)
    (tmp_path / "p1" / "c1" / "s1" / "bad.png").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="bad.png"):
        load_frame_dirs(tmp_path)


def test_split_file_errors(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("p1 train\n")
    with pytest.raises(ValueError, match="s.txt:1"):
        read_split_file(p)
