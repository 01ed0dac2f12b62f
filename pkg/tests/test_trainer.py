import dataclasses

import numpy as np
import pytest

from tdcrl.augment import AugmentConfig, StyleBasis
from tdcrl.config import ConfigError, TrainConfig
from tdcrl.encoder_io import FormatError, SyntheticEncoder
from tdcrl.trainer import (
    NonFiniteLossError, init_state, load_checkpoint, save_checkpoint, train, train_no_ci,
)


def setup(seed=0, K=3, ES=8, W=4, D=3):
    rng = np.random.default_rng(seed)
    doms = rng.normal(size=(D, W)) / np.sqrt(W)
    enc = SyntheticEncoder.from_seed(seed, K, ES, W, doms, image_noise=0.05)
    return enc, StyleBasis(doms, [f"w{i}" for i in range(D)])


def small_cfg(**kw):
    base = dict(N=3, batch_size=8, epochs=3, seed=1, aug=AugmentConfig(M=6))
    base.update(kw)
    return TrainConfig(**base)


def params_bytes(state):
    return b"".join(v.tobytes() for _, v in sorted(state.params().items()))


def test_same_seed_bitwise_identical(tmp_path):
    enc, basis = setup()
    s1, h1 = train(small_cfg(), enc, basis)
    s2, h2 = train(small_cfg(), enc, basis)
    assert params_bytes(s1) == params_bytes(s2) and h1 == h2
    save_checkpoint(s1, tmp_path / "a.ckpt")
    save_checkpoint(s2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_different_seed_differs():
    enc, basis = setup()
    a, _ = train(small_cfg(seed=1), enc, basis)
    b, _ = train(small_cfg(seed=2), enc, basis)
    assert params_bytes(a) != params_bytes(b)


def test_zero_epochs_returns_init():
    enc, basis = setup()
    cfg = small_cfg(epochs=0)
    state, hist = train(cfg, enc, basis)
    assert hist == [] and state.step == 0
    assert params_bytes(state) == params_bytes(init_state(cfg, enc, basis))


def test_history_fields_and_schedule():
    enc, basis = setup()
    _, hist = train(small_cfg(epochs=4), enc, basis)
    assert [h["epoch"] for h in hist] == [1, 2, 3, 4]
    assert hist[0]["lr"] == 0.005 and hist[2]["lr"] == 0.0025
    for h in hist:
        assert {"loss_c", "loss_g", "nwgm_gap", "style_digest"} <= set(h)
        assert np.isfinite(h["nwgm_gap"])


def test_styles_regenerated_each_epoch():
    enc, basis = setup()
    _, hist = train(small_cfg(epochs=3), enc, basis)
    assert len({h["style_digest"] for h in hist}) == 3


def test_no_ci_omits_loss_g_and_matches_lambda_zero():
    enc, basis = setup()
    a, ha = train_no_ci(small_cfg(), enc, basis)
    b, _ = train(small_cfg(lam=0.0), enc, basis)
    assert all("loss_g" not in h for h in ha)
    assert params_bytes(a) == params_bytes(b)


def test_training_lowers_classification_loss():
    enc, basis = setup()
    _, hist = train(small_cfg(epochs=15, lr0=0.05, aug=AugmentConfig(M=20)), enc, basis)
    assert hist[-1]["loss_c"] < hist[0]["loss_c"]


def test_eval_accuracy_reported():
    from tdcrl.encoder_io import EmbeddingTable
    enc, basis = setup()
    imgs = np.stack([enc.image_encode(k, 0, s) for k in range(3) for s in range(4)])
    table = EmbeddingTable(imgs, np.repeat(np.arange(3), 4), np.zeros(12, int))
    _, hist = train(small_cfg(), enc, basis, eval_images=table)
    assert all(0.0 <= h["eval_acc"] <= 1.0 for h in hist)


def test_n_larger_than_domains_rejected():
    enc, basis = setup(D=2)
    with pytest.raises(ConfigError):
        init_state(small_cfg(N=3), enc, basis)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    enc, basis = setup()
    with pytest.raises(NonFiniteLossError) as exc:
        train(small_cfg(lr0=1e200, epochs=5), enc, basis)
    assert exc.value.epoch >= 0


def test_checkpoint_roundtrip_predictions(tmp_path):
    enc, basis = setup()
    state, _ = train(small_cfg(), enc, basis)
    save_checkpoint(state, tmp_path / "m.ckpt", config={"note": 1})
    back = load_checkpoint(tmp_path / "m.ckpt")
    X = np.random.default_rng(0).normal(size=(10, 8))
    assert state.logits(X).tobytes() == back.logits(X).tobytes()
    assert back.step == state.step and back.epoch == 3


def test_checkpoint_truncated(tmp_path):
    enc, basis = setup()
    state, _ = train(small_cfg(epochs=1), enc, basis)
    save_checkpoint(state, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_embedding_file_is_not_a_checkpoint(tmp_path):
    from tdcrl.encoder_io import EmbeddingTable, write_table
    write_table(EmbeddingTable(np.ones((2, 3)), [0, 0], [0, 0]), tmp_path / "e.tdeb")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "e.tdeb")


def test_batch_size_larger_than_set():
    enc, basis = setup()
    _, hist = train(small_cfg(batch_size=1000, epochs=1), enc, basis)
    assert len(hist) == 1


def test_l2_variant_trains():
    enc, basis = setup()
    _, hist = train(small_cfg(loss_g_kind="l2"), enc, basis)
    assert all(np.isfinite(h["loss_g"]) for h in hist)


def test_single_layer_and_single_entry():
    enc, basis = setup()
    state, _ = train(dataclasses.replace(small_cfg(), layers=1, N=1), enc, basis)
    assert state.g.depth == 1 and state.dictionary.vectors.shape == (1, 8)
