import struct

import numpy as np
import pytest

from care.checkpoint import MAGIC, checkpoint_bytes, load_checkpoint, save_checkpoint
from care.losses import assign_confidence_targets, loss_confidence, loss_error_sorting
from care.errors import ConfigError, FormatError
from care.models import ModelConfig, build_model
from care.tensor import Tensor
from care.training import (
    Checkpoint,
    TrainConfig,
    _batches,
    loss_combined,
    parse_baseline,
    train,
    write_log_csv,
)
from toy import TwoPixelModel, care_toy_grad_error


@pytest.mark.parametrize("seed", range(10))
def test_care_objective_matches_finite_differences(seed):
    assert care_toy_grad_error(seed) < 1e-3


def _toy(y, c):
    """Toy model whose outputs are exactly y and c: zero weights, logit biases."""
    logit = lambda p: Tensor(np.log(p / (1 - p)), dtype=np.float64)
    zero = Tensor(0.0, dtype=np.float64)
    return TwoPixelModel(zero, logit(np.array(y)), zero, logit(np.array(c)))


def test_two_pixel_hand_example():
    model = _toy([0.5, 0.5], [1 - 1e-12, 1e-12])
    terms = loss_combined(Tensor(np.zeros(2)), np.array([[[0.5, 0.1]]]), model, TrainConfig(eta=0.5, lam=1.0))
    assert terms.l0 == pytest.approx(0.08, abs=1e-7)
    assert terms.l1 == pytest.approx(0.0, abs=1e-7)
    assert float(terms.total.data) == pytest.approx(0.08, abs=1e-7)


def test_perfect_predictor_care_zero_error_sorting_positive():
    y = np.array([0.3, 0.6, 0.1, 0.8], dtype=np.float32)
    c = Tensor(np.full(4, 0.9, dtype=np.float32))
    c_star = assign_confidence_targets(np.zeros(4), 0.5)
    assert loss_confidence(Tensor(y), y, c, c_star).item() == 0.0
    assert loss_error_sorting(c, c_star).item() > 0


def test_lambda_zero_bit_equals_regression(small_dataset):
    x, y = small_dataset.arrays(small_dataset.split_ids("train")[:4])
    model = build_model(ModelConfig(seed=1))
    for baseline in ("care", "error_sorting", "absolute_error"):
        terms = loss_combined(Tensor(x), y, model, TrainConfig(baseline=baseline), lam=0.0)
        pred = model.forward_dual(Tensor(x))
        ref = ((pred.y - Tensor(y)).square()).mean()
        assert terms.total.data.tobytes() == ref.data.tobytes()


def test_permuting_batch_leaves_loss_unchanged(small_dataset):
    x, y = small_dataset.arrays(small_dataset.split_ids("train")[:6])
    model = build_model(ModelConfig(seed=2))
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = loss_combined(Tensor(x), y, model, TrainConfig())
    b = loss_combined(Tensor(x[perm]), y[perm], model, TrainConfig())
    assert a.l0 == pytest.approx(b.l0, rel=1e-6)
    assert a.l1 == pytest.approx(b.l1, rel=1e-6)


# config ----------------------------------------------------------------------------

@pytest.mark.parametrize(
    "kwargs",
    [{"eta": 0.0}, {"eta": 1.0}, {"lam": -1}, {"batch_size": 1}, {"lr": 0}, {"momentum": 1.0},
     {"baseline": "bayes"}, {"baseline": "ensemble:0"}, {"sort_granularity": "tile"}],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_config_dict_round_trip_and_unknown_keys():
    cfg = TrainConfig(lam=0.5, baseline="ensemble:3")
    d = cfg.to_dict()
    assert d["lambda"] == 0.5 and "lam" not in d
    assert TrainConfig.from_dict(d) == cfg
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_parse_baseline():
    assert parse_baseline("ensemble:3") == ("ensemble", 3)
    assert parse_baseline("ensemble") == ("ensemble", 1)
    assert parse_baseline("care") == ("care", 1)


def test_batches_never_leave_a_singleton():
    rng = np.random.default_rng(0)
    chunks = _batches(17, 8, rng)
    assert sorted(np.concatenate(chunks).tolist()) == list(range(17))
    assert min(len(c) for c in chunks) >= 2


# training ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny(small_dataset):
    x, y = small_dataset.arrays(small_dataset.split_ids("train"))
    return x[:8, :, :16, :16].copy(), y[:8, :16, :16].copy()


def test_zero_epochs_returns_initial_weights(tiny):
    ck = train(*tiny, TrainConfig(phase0_epochs=0, phase1_epochs=0, seed=5))
    assert ck.log == []
    init = build_model(ModelConfig(seed=5)).state_dict()
    assert all(np.array_equal(ck.members[0][k], init[k]) for k in init)


def test_training_is_deterministic_and_logs_phases(tiny):
    cfg = TrainConfig(phase0_epochs=2, phase1_epochs=2, batch_size=4, seed=1)
    a, b = train(*tiny, cfg), train(*tiny, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert [row["phase"] for row in a.log] == [1, 1, 2, 2]
    assert all(row["total"] == row["L0"] for row in a.log[:2])


def test_phase_one_does_not_move_confidence_head(tiny):
    ck = train(*tiny, TrainConfig(phase0_epochs=2, phase1_epochs=0, batch_size=4))
    init = build_model(ModelConfig()).state_dict()
    assert np.array_equal(ck.members[0]["head_c.weight"], init["head_c.weight"])
    assert not np.array_equal(ck.members[0]["head_y.weight"], init["head_y.weight"])


@pytest.mark.parametrize("baseline", ["error_sorting", "absolute_error", "gaussian_nll", "ensemble:2"])
def test_baselines_train(tiny, baseline):
    ck = train(*tiny, TrainConfig(phase0_epochs=1, phase1_epochs=1, batch_size=4, baseline=baseline))
    assert len(ck.members) == (2 if baseline == "ensemble:2" else 1)
    assert all(np.isfinite(row["total"]) for row in ck.log)
    assert len(ck.models()) == len(ck.members)


def test_ensemble_members_differ(tiny):
    ck = train(*tiny, TrainConfig(phase0_epochs=0, phase1_epochs=0, baseline="ensemble:2"))
    assert not np.array_equal(ck.members[0]["enc0.weight"], ck.members[1]["enc0.weight"])


def test_divergence_is_reported_with_context(tiny):
    from care.training import DivergenceError

    with pytest.raises(DivergenceError, match="epoch 0 batch"):
        train(*tiny, TrainConfig(phase0_epochs=1, phase1_epochs=0, lr=1e30, batch_size=4))


def test_train_input_validation(tiny):
    x, y = tiny
    with pytest.raises(ConfigError):
        train(x[:0], y[:0], TrainConfig())
    with pytest.raises(ConfigError):
        train(x, y[:3], TrainConfig())


def test_log_csv(tmp_path, tiny):
    ck = train(*tiny, TrainConfig(phase0_epochs=1, phase1_epochs=1, batch_size=4))
    write_log_csv(ck.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "member,epoch,phase,L0,L1,total"
    assert len(lines) == 3


# checkpoint format ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def ckpt(tiny):
    return train(*tiny, TrainConfig(phase0_epochs=1, phase1_epochs=1, batch_size=4, baseline="ensemble:2"),
                 normalization={"mean": [0.0] * 4, "std": [1.0] * 4})


def test_checkpoint_round_trip_is_byte_identical(tmp_path, ckpt):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for a, b in zip(ckpt.members, loaded.members):
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert loaded.train_config == ckpt.train_config
    assert loaded.model_config == ckpt.model_config
    assert loaded.log == ckpt.log


def test_checkpoint_header_layout(ckpt):
    raw = checkpoint_bytes(ckpt)
    assert raw[:8] == MAGIC
    version, json_len = struct.unpack_from("<IQ", raw, 8)
    assert version == 1
    assert raw[20 : 20 + json_len].startswith(b"{")


@pytest.mark.parametrize("cut", [4, 15, 30, -1, -100])
def test_truncated_checkpoint_names_offset(tmp_path, ckpt, cut):
    raw = checkpoint_bytes(ckpt)
    path = tmp_path / "t.ckpt"
    path.write_bytes(raw[:cut])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(path)


def test_bad_magic_and_version(tmp_path, ckpt):
    raw = bytearray(checkpoint_bytes(ckpt))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTAckpt" + bytes(raw[8:]))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(bad)
    struct.pack_into("<I", raw, 8, 99)
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="unsupported.*99"):
        load_checkpoint(bad)


def test_trailing_bytes_rejected(tmp_path, ckpt):
    path = tmp_path / "x.ckpt"
    path.write_bytes(checkpoint_bytes(ckpt) + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_clip_grad_norm():
    from care.training import clip_grad_norm

    a, b = Tensor(1.0, requires_grad=True), Tensor(1.0, requires_grad=True)
    grads = {a: Tensor(3.0), b: Tensor(4.0)}
    clipped = clip_grad_norm(grads, 1.0)
    assert clipped[a].item() == pytest.approx(0.6) and clipped[b].item() == pytest.approx(0.8)
    assert clip_grad_norm(grads, 10.0) is grads
    assert clip_grad_norm(grads, None) is grads
    with pytest.raises(ConfigError):
        TrainConfig(grad_clip=0.0).validate()
