import dataclasses
import struct

import numpy as np
import pytest

from denseact.branches import (PAPER_NETWORK, ModelState, NetworkConfig, coarse_det_forward,
                               copy_classifier_params, fine_det_forward, fuse_predictions,
                               load_model, ml_clas_forward, ml_rel_forward, read_checkpoint,
                               vid_clas_forward, write_checkpoint)
from denseact.diffcore import SequenceTooShortError, Tensor, finite_difference_check, ops
from denseact.diffcore.tensor import no_grad
from denseact.errors import ConfigurationError, FormatError
from denseact.losses import LossConfig, assistant_loss, core_loss
from denseact.trainloop import Adam


def _state(cfg, seed=0):
    return ModelState(cfg, seed).eval()


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0


@pytest.fixture
def full_small():
    # full-size widths with one block per stage keeps shape tests quick
    return NetworkConfig(**{**PAPER_NETWORK, "B": 1})


# ------------------------------------------------------------------ config

@pytest.mark.parametrize("kw, match", [
    (dict(C_star=8, D_star=16), "C_star"),
    (dict(alpha_fine=0.3, alpha_coarse=0.3), "alpha"),
    (dict(T=20, F=3), "multiple"),
    (dict(coarse_wiring="diagonal"), "coarse_wiring"),
    (dict(H=3), "divisible"),
])
def test_config_validation(kw, match):
    with pytest.raises(ConfigurationError, match=match):
        NetworkConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = NetworkConfig(F=2, T=32, positional="absolute")
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError, match="unknown"):
        NetworkConfig.from_dict({"T": 32, "depth": 3})


# -------------------------------------------------------------- assistant

def test_ml_rel_and_clas_full_size_shapes(full_small):
    state = _state(full_small)
    g = (np.random.default_rng(0).random((256, 157)) < 0.05).astype(np.float32)
    with no_grad():
        g_hat = ml_rel_forward(g, state)
        y = ml_clas_forward(g_hat, state)
    assert g_hat.shape == (256, 512)
    assert y.shape == (256, 157)
    assert ((y.data > 0) & (y.data < 1)).all()


def test_ml_rel_all_zero_labels_finite(tiny_cfg):
    state = _state(tiny_cfg)
    state.assistant.ml_rel.entry.bias.data[...] = 0
    out = ml_rel_forward(np.zeros((16, 5), np.float32), state)
    assert np.isfinite(out.data).all()


def test_ml_rel_too_short(tiny_cfg):
    with pytest.raises(SequenceTooShortError):
        ml_rel_forward(np.zeros((2, 5), np.float32), _state(tiny_cfg))


def test_assistant_gradient_reaches_every_parameter(tiny_cfg):
    state = ModelState(tiny_cfg, 0).eval()
    g = (np.random.default_rng(1).random((16, 5)) < 0.3).astype(np.float32)
    assistant_loss(state.assistant(Tensor(g)), g, LossConfig()).backward()
    for name, p in state.assistant.named_parameters():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_ml_clas_zero_weights_give_half(tiny_cfg):
    state = _state(tiny_cfg)
    _zero(state.assistant.ml_clas)
    y = ml_clas_forward(np.random.default_rng(0).standard_normal((16, 8)), state)
    np.testing.assert_array_equal(y.data, 0.5)


def test_ml_clas_is_per_timestep(tiny_cfg):
    state = _state(tiny_cfg)
    g = np.random.default_rng(0).standard_normal((16, 8)).astype(np.float32)
    a = ml_clas_forward(g, state).data
    g[7] += 1.0
    b = ml_clas_forward(g, state).data
    changed = np.flatnonzero(np.any(a != b, axis=1))
    np.testing.assert_array_equal(changed, [7])


# -------------------------------------------------------------------- core

def test_fine_det_full_size_shape(full_small):
    state = _state(full_small)
    with no_grad():
        out = fine_det_forward(np.random.default_rng(0).standard_normal((256, 1024)), state)
    assert out.shape == (256, 512)


@pytest.mark.parametrize("t", [3, 4, 7, 16, 33])
def test_fine_det_preserves_length(tiny_cfg, t):
    out = fine_det_forward(np.random.default_rng(t).standard_normal((t, 8)), _state(tiny_cfg))
    assert out.shape == (t, 8)


def test_fine_det_eval_deterministic(tiny_cfg):
    state = _state(tiny_cfg)
    x = np.random.default_rng(0).standard_normal((16, 8))
    np.testing.assert_array_equal(fine_det_forward(x, state).data, fine_det_forward(x, state).data)


def test_fine_det_too_short(tiny_cfg):
    with pytest.raises(SequenceTooShortError):
        fine_det_forward(np.zeros((2, 8)), _state(tiny_cfg))


def test_coarse_branch_lengths_full_size(full_small):
    state = _state(full_small)
    fine = Tensor(np.random.default_rng(0).standard_normal((256, 512)).astype(np.float32))
    with no_grad():
        branches = state.core.coarse_branches(fine)
        out = state.core.coarse_features(fine)
    assert [b.shape for b in branches] == [(128, 512), (64, 512), (32, 512)]
    assert out.shape == (256, 512)


def test_coarse_single_branch(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, F=1)
    state = _state(cfg)
    fine = Tensor(np.random.default_rng(0).standard_normal((16, 8)))
    assert [b.shape for b in state.core.coarse_branches(fine)] == [(8, 8)]
    assert coarse_det_forward(fine, state).shape == (16, 8)


def test_coarse_too_short(tiny_cfg):
    with pytest.raises(SequenceTooShortError):
        coarse_det_forward(np.zeros((3, 8)), _state(tiny_cfg))


def test_coarse_zero_input_zero_biases(tiny_cfg):
    state = _state(tiny_cfg)
    for name, p in state.core.named_parameters():
        if name.startswith("coarse") and name.endswith("bias"):
            p.data[...] = 0
    out = coarse_det_forward(np.zeros((16, 8), np.float32), state)
    np.testing.assert_array_equal(out.data, 0.0)


def _branch_outputs(state, fine):
    return [b.data.copy() for b in state.core.coarse_branches(fine)]


@pytest.mark.parametrize("wiring", ["non-hierarchical", "hierarchical"])
def test_branch_independence_distinguishes_wiring(tiny_cfg, wiring):
    cfg = dataclasses.replace(tiny_cfg, F=3, T=16, coarse_wiring=wiring)
    fine = Tensor(np.random.default_rng(9).standard_normal((16, 8)).astype(np.float32))
    for i in range(cfg.F):
        state = _state(cfg, seed=3)
        before = _branch_outputs(state, fine)
        _zero(state.core.coarse[i])
        after = _branch_outputs(state, fine)
        for j in range(cfg.F):
            same = np.array_equal(before[j], after[j])
            if j == i:
                continue
            if wiring == "non-hierarchical" or j < i:
                assert same, (i, j)
            else:
                assert not same, (i, j)


def test_vid_clas_shared_between_heads(tiny_cfg):
    state = _state(tiny_cfg)
    heads = state.core(Tensor(np.random.default_rng(0).standard_normal((16, 8))))
    assert set(heads) == {"fine", "coarse"}
    assert len([n for n, _ in state.core.named_parameters() if "clas" in n]) == 2
    feats = np.random.default_rng(1).standard_normal((16, 8)).astype(np.float32)
    np.testing.assert_array_equal(vid_clas_forward(feats, state).data,
                                  state.core.classify(Tensor(feats)).data)


def test_vid_clas_zero_input_zero_bias(tiny_cfg):
    state = _state(tiny_cfg)
    state.core.vid_clas.bias.data[...] = 0
    np.testing.assert_array_equal(vid_clas_forward(np.zeros((16, 8)), state).data, 0.5)


def test_vid_clas_full_size_shape(full_small):
    state = _state(full_small)
    y = vid_clas_forward(np.random.default_rng(0).standard_normal((256, 512)), state)
    assert y.shape == (256, 157)


@pytest.mark.parametrize("flags, heads", [
    (dict(use_fine=True, use_coarse=True), {"fine", "coarse"}),
    (dict(use_fine=False, use_coarse=True), {"coarse"}),
    (dict(use_fine=True, use_coarse=False), {"fine"}),
    (dict(use_fine=False, use_coarse=False), {"fine"}),
])
def test_detector_ablations_preserve_length(tiny_cfg, flags, heads):
    cfg = dataclasses.replace(tiny_cfg, **flags)
    state = _state(cfg)
    out = state.core(Tensor(np.random.default_rng(0).standard_normal((16, 8))))
    assert set(out) == heads
    assert all(y.shape == (16, 5) for y in out.values())
    assert state.predict(np.zeros((16, 8), np.float32)).shape == (16, 5)


def test_coarse_from_tokens_variant(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, D=6, coarse_input="tokens")
    state = _state(cfg)
    assert state.core.coarse[0].entry.kernel.shape == (3, 6, 8)
    assert state.core(Tensor(np.zeros((16, 6))))["coarse"].shape == (16, 5)


# ------------------------------------------------------------------ fusion

def test_fuse_hand_values():
    yf, yc = Tensor(np.full((2, 3), 0.2)), Tensor(np.full((2, 3), 0.8))
    np.testing.assert_allclose(fuse_predictions(yf, yc, 0.5, 0.5).data, 0.5)
    np.testing.assert_array_equal(fuse_predictions(yf, yc, 1.0, 0.0).data, yf.data)
    np.testing.assert_allclose(fuse_predictions(yf, yc, 0.1, 0.9).data, 0.74)


def test_fuse_rejects_bad_weights():
    with pytest.raises(ConfigurationError):
        fuse_predictions(Tensor([0.1]), Tensor([0.2]), 0.5, 0.6)


# ------------------------------------------------------------- copy/freeze

def test_copy_is_bitwise_and_freezes(tiny_cfg):
    state = ModelState(tiny_cfg, 0)
    state.assistant.ml_clas.kernel.data += 0.25
    copy_classifier_params(state)
    for src, dst in state.classifier_pairs():
        assert np.array_equal(src.data, dst.data)
        assert dst.frozen and not src.frozen
        assert src.data is not dst.data


def test_core_step_leaves_frozen_classifier_untouched(tiny_cfg):
    state = ModelState(tiny_cfg, 0).train()
    opt = Adam(state.core_parameters())
    before = {n: p.data.copy() for n, p in state.core.vid_clas.named_parameters()}
    x = np.random.default_rng(0).standard_normal((16, 8)).astype(np.float32)
    g = (np.random.default_rng(1).random((16, 5)) < 0.3).astype(np.float32)
    for step in range(3):
        opt.zero_grad()
        heads = state.core(Tensor(x), np.random.default_rng(step))
        core_loss(heads, g, LossConfig(), 0.5, 0.5).backward()
        opt.step(1e-2)
    for n, p in state.core.vid_clas.named_parameters():
        assert np.array_equal(p.data, before[n])
    assert state.classifier_matches_snapshot()
    assert state.core.fine_entry.kernel.grad is not None


def test_assistant_disabled_leaves_classifier_trainable(tiny_cfg):
    state = ModelState(dataclasses.replace(tiny_cfg, assistant=False), 0)
    assert not state.core.vid_clas.kernel.frozen
    assert state.copy_snapshot is None


def test_copy_shape_mismatch_is_configuration_error(tiny_cfg):
    state = ModelState(tiny_cfg, 0)
    state.core.vid_clas.kernel.data = np.zeros((1, 8, 4), np.float32)
    with pytest.raises(ConfigurationError, match="classifier shapes"):
        state.copy_classifier_params()


# --------------------------------------------------------- core gradients

def test_core_loss_gradient_composite(tiny_cfg):
    state = ModelState(tiny_cfg, 2).eval()
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((16, 8)).astype(np.float32), requires_grad=True)
    g = (rng.random((16, 5)) < 0.3).astype(np.float32)
    f = lambda: core_loss(state.core(x), g, LossConfig(), 0.5, 0.5)  # noqa: E731
    assert finite_difference_check(f, x, eps=1e-4) < 1e-3


# -------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    state = ModelState(tiny_cfg, 5)
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, state, {"step": 7})
    loaded, meta = load_model(path)
    assert meta == {"step": 7}
    assert loaded.cfg == tiny_cfg
    for (n1, p1), (n2, p2) in zip(state.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data) and p1.frozen == p2.frozen
    x = np.random.default_rng(0).standard_normal((16, 8)).astype(np.float32)
    np.testing.assert_array_equal(state.eval().predict(x).data, loaded.eval().predict(x).data)
    assert loaded.classifier_matches_snapshot()


def test_checkpoint_byte_layout(tmp_path, tiny_cfg):
    state = ModelState(tiny_cfg, 5)
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, state)
    blob = path.read_bytes()
    assert blob[:4] == b"DADC"
    version, hlen = struct.unpack_from("<HI", blob, 4)
    assert version == 1
    (count,) = struct.unpack_from("<I", blob, 10 + hlen)
    assert count == len(state.parameters())
    header, arrays, frozen = read_checkpoint(path)
    assert header["network"]["C"] == 5
    assert frozen["core.vid_clas.kernel"] and not frozen["assistant.ml_clas.kernel"]


def test_checkpoint_rejects_corruption(tmp_path, tiny_cfg):
    path = tmp_path / "model.ckpt"
    write_checkpoint(path, ModelState(tiny_cfg, 0))
    blob = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError) as exc:
        read_checkpoint(tmp_path / "magic.ckpt")
    assert exc.value.offset == 0
    (tmp_path / "short.ckpt").write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(blob + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_checkpoint(tmp_path / "long.ckpt")


def test_length_invariant_end_to_end(tiny_cfg):
    state = _state(tiny_cfg)
    out = state.core(Tensor(np.random.default_rng(0).standard_normal((32, 8))))
    assert out["fine"].shape == out["coarse"].shape == (32, 5)
    assert ops.sum(out["fine"]).shape == ()
