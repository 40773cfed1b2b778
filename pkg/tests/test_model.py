"""Architecture templates, parameter counts, forward/gradient behavior.

The preset parameter counts below were derived by hand from the layer
shapes before this test was first run:

  small_lstm:        4000*256 + (2*256)*(3*2048) + 3*2048 + 2048*256 + 4000
                     = 4,704,160
  large_lstm:        4000*1024 + (2*1024)*(3*2048) + 3*2048 + 2048*1024 + 4000
                     = 18,786,208
  small_transformer: 4000*128 + 30*128 + 6*(4*128^2 + 4*128 + 128*2048 + 2048
                     + 2048*128 + 128) + 2*128 + 4000 = 4,075,168
  large_transformer: 4000*512 + 30*512 + 6*(4*512^2 + 4*512 + 512*2048 + 2048
                     + 2048*512 + 512) + 2*512 + 4000 = 20,970,400
"""

import numpy as np
import pytest

from fedlm import model as M
from fedlm.data import Batch, make_batches
from fedlm.prng import Prng
from fedlm.tensor import GradientTape, finite_diff

EXACT_COUNTS = {
    "small_lstm": 4_704_160,
    "large_lstm": 18_786_208,
    "small_transformer": 4_075_168,
    "large_transformer": 20_970_400,
}

NOMINAL_COUNTS = {
    "small_lstm": 4.7e6,
    "large_lstm": 18.8e6,
    "small_transformer": 4.1e6,
    "large_transformer": 21.0e6,
}


def tiny_lstm():
    return M.ModelConfig("cifg_lstm", vocab_size=11, embed_dim=4, layer_size=6, num_layers=1)


def tiny_transformer():
    return M.ModelConfig("transformer", vocab_size=11, embed_dim=8, layer_size=12, num_layers=2, num_heads=2)


@pytest.mark.parametrize("name", sorted(EXACT_COUNTS))
def test_preset_param_counts_exact(name):
    assert M.count_params(M.preset_config(name)) == EXACT_COUNTS[name]


@pytest.mark.parametrize("name", sorted(NOMINAL_COUNTS))
def test_preset_param_counts_within_two_percent_of_nominal(name):
    count = M.count_params(M.preset_config(name))
    nominal = NOMINAL_COUNTS[name]
    assert abs(count - nominal) / nominal <= 0.02


def test_preset_overrides():
    cfg = M.preset_config("small_lstm", vocab_size=128)
    assert cfg.vocab_size == 128
    with pytest.raises(ValueError):
        M.preset_config("giant_lstm")


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig("rnn", 100, 8, 8, 1).validate()
    with pytest.raises(ValueError):
        M.ModelConfig("cifg_lstm", 4, 8, 8, 1).validate()  # vocab too small
    with pytest.raises(ValueError):
        M.ModelConfig("transformer", 100, 9, 8, 1, num_heads=2).validate()  # 9 % 2 != 0


def test_freezable_excludes_biases_lstm():
    cfg = tiny_lstm()
    freezable = set(M.list_freezable(cfg))
    assert freezable == {"embedding", "lstm0/kernel", "lstm0/proj"}
    all_names = {name for name, *_ in M._template(cfg)}
    assert all_names - freezable == {"lstm0/bias", "output_bias"}


def test_freezable_excludes_biases_transformer():
    cfg = tiny_transformer()
    freezable = set(M.list_freezable(cfg))
    for name in freezable:
        assert not name.endswith("bias") and not name.endswith(("_b1", "_b2"))
    # ln gains are freezable weights, ln biases are not
    assert "block0/ln1_gain" in freezable
    all_names = {name for name, *_ in M._template(cfg)}
    assert "block0/ln1_bias" in all_names - freezable
    assert "output_bias" in all_names - freezable


def test_init_deterministic_and_bounded():
    cfg = tiny_transformer()
    a = M.init_params(cfg, Prng(5).child("model"))
    b = M.init_params(cfg, Prng(5).child("model"))
    c = M.init_params(cfg, Prng(6).child("model"))
    for name in a.names():
        np.testing.assert_array_equal(a[name].value, b[name].value)
    assert any(not np.array_equal(a[n].value, c[n].value) for n in a.names() if a[n].value.std() > 0)
    # uniform(+-sqrt(3/fan_in)) for weights; zeros/ones elsewhere
    e = cfg.embed_dim
    assert np.abs(a["embedding"].value).max() <= np.sqrt(3.0 / e)
    wq = a["block0/attn_wq"].value
    assert np.abs(wq).max() <= np.sqrt(3.0 / e)
    np.testing.assert_array_equal(a["block0/ln1_gain"].value, np.ones(e))
    np.testing.assert_array_equal(a["output_bias"].value, np.zeros(cfg.vocab_size))


def test_params_from_arrays_validates():
    cfg = tiny_lstm()
    good = {name: p.value for name, p in M.init_params(cfg, Prng(0)).items()}
    M.params_from_arrays(cfg, good)  # round trips
    missing = dict(good)
    missing.pop("embedding")
    with pytest.raises(ValueError):
        M.params_from_arrays(cfg, missing)
    extra = dict(good)
    extra["bogus"] = np.zeros(3)
    with pytest.raises(ValueError):
        M.params_from_arrays(cfg, extra)
    bad_shape = dict(good)
    bad_shape["embedding"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        M.params_from_arrays(cfg, bad_shape)


def test_checkpoint_roundtrip(tmp_path):
    from fedlm.params import save_checkpoint

    cfg = tiny_transformer()
    pset = M.init_params(cfg, Prng(9).child("model"))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, pset)
    back = M.params_from_checkpoint(cfg, path)
    for name, p in pset.items():
        np.testing.assert_array_equal(back[name].value, p.value)
        assert back[name].freezable == p.freezable


def _zero_pset(cfg):
    arrays = {name: np.zeros(shape) for name, shape, _, _ in M._template(cfg)}
    return M.params_from_arrays(cfg, arrays)


@pytest.mark.parametrize("cfg_fn", [tiny_lstm, tiny_transformer])
def test_all_zero_model_is_uniform(cfg_fn):
    """Zero weights produce zero logits, so perplexity is exactly vocab size.

    That pins the position averaging: any mis-weighting of padded positions
    would pull the value away from V.
    """
    cfg = cfg_fn()
    pset = _zero_pset(cfg)
    batches = make_batches([[5, 6, 7], [8, 9]], 2, cfg.max_seq_len)
    ppl = M.evaluate_perplexity(pset, cfg, batches)
    assert abs(ppl - cfg.vocab_size) < 1e-9


@pytest.mark.parametrize("cfg_fn", [tiny_lstm, tiny_transformer])
def test_perplexity_invariant_to_batching(cfg_fn):
    cfg = cfg_fn()
    pset = M.init_params(cfg, Prng(10).child("model"))
    seqs = [[4, 5, 6, 7], [8, 9], [10, 4, 5], [6]]
    one = M.evaluate_perplexity(pset, cfg, make_batches(seqs, 4, cfg.max_seq_len))
    many = M.evaluate_perplexity(pset, cfg, make_batches(seqs, 1, cfg.max_seq_len))
    assert abs(one - many) < 1e-9


@pytest.mark.parametrize("cfg_fn", [tiny_lstm, tiny_transformer])
def test_causality(cfg_fn):
    """Changing a future token never changes logits at earlier positions."""
    cfg = cfg_fn()
    pset = M.init_params(cfg, Prng(11).child("model"))
    gen = Prng(12).generator()
    L = 7
    tokens_a = gen.integers(4, cfg.vocab_size, (1, L))
    for cut in (2, 4, 6):
        tokens_b = tokens_a.copy()
        tokens_b[0, cut:] = gen.integers(4, cfg.vocab_size, L - cut)
        tape_a, tape_b = GradientTape(), GradientTape()
        logits_a, _ = M.forward_logits(tape_a, pset, cfg, tokens_a)
        logits_b, _ = M.forward_logits(tape_b, pset, cfg, tokens_b)
        la = logits_a.value.reshape(1, L, cfg.vocab_size)
        lb = logits_b.value.reshape(1, L, cfg.vocab_size)
        np.testing.assert_array_equal(la[0, :cut], lb[0, :cut])
        assert not np.array_equal(la[0, cut:], lb[0, cut:])


@pytest.mark.parametrize("cfg_fn", [tiny_lstm, tiny_transformer])
def test_loss_grads_match_finite_differences(cfg_fn):
    cfg = cfg_fn()
    pset = M.init_params(cfg, Prng(13).child("model"))
    batch = make_batches([[4, 5, 6], [7, 8]], 2, cfg.max_seq_len)[0]

    def loss_of(arrays):
        p = M.params_from_arrays(cfg, arrays)
        loss, _, _ = M.loss_and_grads(p, cfg, batch)
        return loss

    _, got, _ = M.loss_and_grads(pset, cfg, batch)
    arrays = {name: p.value.copy() for name, p in pset.items()}
    want = finite_diff(loss_of, arrays)
    for name in got:
        num = want[name]
        scale = max(1.0, float(np.abs(num).max()), float(np.abs(got[name]).max()))
        err = float(np.abs(got[name] - num).max()) / scale
        assert err < 1e-4, f"{name}: rel err {err:.2e}"


def test_loss_and_grads_covers_only_trainable():
    cfg = tiny_lstm()
    pset = M.init_params(cfg, Prng(14).child("model"))
    pset.set_trainable({"embedding": False})
    batch = make_batches([[4, 5, 6]], 1, cfg.max_seq_len)[0]
    _, grads, positions = M.loss_and_grads(pset, cfg, batch)
    assert "embedding" not in grads
    assert set(grads) == set(pset.trainable_names())
    assert positions == 4.0  # 3 content tokens + eos


@pytest.mark.parametrize("cfg_fn", [tiny_lstm, tiny_transformer])
def test_pad_positions_do_not_leak(cfg_fn):
    """Masked positions must not influence the loss or any gradient.

    Corrupting targets under a zero mask, and input tokens past the last
    supervised position, has to leave everything bit-unchanged.
    """
    cfg = cfg_fn()
    pset = M.init_params(cfg, Prng(15).child("model"))
    clean = make_batches([[4, 5]], 1, cfg.max_seq_len)[0]
    supervised = 3  # bos,4,5 -> targets 4,5,eos
    corrupt = Batch(clean.inputs.copy(), clean.targets.copy(), clean.mask.copy())
    corrupt.targets[0, supervised:] = 9  # mask there is 0
    corrupt.inputs[0, supervised:] = 10  # only affects logits past the mask
    loss_a, grads_a, pos_a = M.loss_and_grads(pset, cfg, clean)
    loss_b, grads_b, pos_b = M.loss_and_grads(pset, cfg, corrupt)
    assert pos_a == pos_b == 3.0
    assert loss_a == loss_b
    for name in grads_a:
        np.testing.assert_array_equal(grads_a[name], grads_b[name])
