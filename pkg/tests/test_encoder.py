import numpy as np
import pytest

from diffgate import tensor as T
from diffgate.data import SynthSpec, as_arrays, generate
from diffgate.encoder import (EncoderConfig, Head, encode, encode_numpy, group_shapes, head_forward, init_params,
                              masked_token_accuracy, param_count, pretrain_mlm)
from diffgate.errors import ConfigError, DimensionError
from diffgate.rng import RngState

from conftest import check_grads, numeric_grad, rel_err

SMALL = EncoderConfig(vocab_size=12, max_seq_len=5, num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=12)


def tensors(params, grad=False):
    return {k: T.Tensor(np.array(v), requires_grad=grad) for k, v in params.items()}


def test_desk_config_shapes_and_count():
    cfg = EncoderConfig()
    shapes = group_shapes(cfg)
    assert shapes["embed.tok"] == (64, 64) and shapes["layer3.ffn.w1"] == (64, 128)
    assert param_count(cfg) == 139_136


def test_invalid_config():
    with pytest.raises(ConfigError):
        EncoderConfig(hidden_dim=10, num_heads=4)


def test_identical_sequences_give_identical_rows():
    p = init_params(SMALL, RngState(0))
    h = encode_numpy(SMALL, p, np.tile([[3, 1, 4, 1, 5]], (4, 1)))
    assert all(np.array_equal(h[0], h[i]) for i in range(1, 4))


def test_batch_equivariance():
    p = init_params(SMALL, RngState(0))
    tok = RngState(1).integers(0, 12, size=(6, 5))
    perm = np.array([3, 0, 5, 1, 4, 2])
    assert np.allclose(encode_numpy(SMALL, p, tok)[perm], encode_numpy(SMALL, p, tok[perm]), rtol=0, atol=1e-13)


def test_forward_finite_across_seeds():
    for seed in range(100):
        r = RngState(seed, "fwd")
        p = init_params(SMALL, r.stream("p"))
        assert np.all(np.isfinite(encode_numpy(SMALL, p, r.integers(0, 12, size=(3, 5)))))


def test_attention_rows_and_layer_norm_moments():
    cfg = EncoderConfig()
    p = init_params(cfg, RngState(2))
    seen = {}
    with T.no_grad():
        encode(cfg, tensors(p), RngState(3).integers(0, 64, size=(4, 16)), inspect=seen)
    for att in seen["attention"]:
        assert np.all(np.abs(att.sum(axis=-1) - 1.0) < 1e-9)
    for x in seen["ln_inputs"]:
        y = T.normalize_only(x)
        assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)
        assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-6)


def test_embedding_row_gradient_fd():
    cfg = EncoderConfig()
    p = tensors(init_params(cfg, RngState(4)))
    tok = np.array([[5, 9, 9, 2] + [7] * 12, [9] * 16])
    row = T.Tensor(p["embed.tok"].data[9].copy(), requires_grad=True)
    onehot = np.eye(64)[:, 9:10]
    # a plain sum of h is constant under the final layer norm, so weight it
    w = RngState(8).normal((2, 64))

    def f():
        table = T.add(T.Tensor(p["embed.tok"].data), T.mul(onehot, T.sub(row, p["embed.tok"].data[9])))
        return T.tsum(T.mul(encode(cfg, {**p, "embed.tok": table}, tok), w))

    check_grads(f, [row])


def test_full_small_encoder_gradients_fd():
    p = tensors(init_params(SMALL, RngState(5)), grad=True)
    tok = np.array([[1, 2, 3, 4, 5], [6, 7, 8, 9, 10]])
    w = RngState(6).normal((2, 8))
    loss = T.tsum(T.mul(encode(SMALL, p, tok), w))
    loss.backward()
    for name, t in p.items():
        fd = numeric_grad(lambda: float(T.tsum(T.mul(encode(SMALL, p, tok), w)).data), t.data)
        assert rel_err(t.grad, fd) < 1e-4, name


def test_token_range_is_checked():
    with pytest.raises(ValueError, match="out of range"):
        encode_numpy(SMALL, init_params(SMALL), np.array([[1, 2, 12, 0, 0]]))


# -- heads -----------------------------------------------------------------------

def test_zero_head_gives_uniform_softmax():
    head = Head.zeros("task", 8, 3)
    logits = head_forward(head, T.Tensor(RngState(0).normal((4, 8))))
    assert np.all(logits.data == 0)
    assert np.allclose(T.softmax(logits).data, 1 / 3)


def test_head_hand_arithmetic():
    W = np.arange(8.0).reshape(4, 2)
    head = Head("task", T.Tensor(W), T.Tensor(np.zeros(2)))
    assert np.array_equal(head_forward(head, T.Tensor([[1.0, 0, 0, 0]])).data, [W[0]])


def test_head_gradients_fd():
    r = RngState(7)
    head = Head.random("adversarial", 6, 3, r, std=0.5)
    h = T.Tensor(r.normal((5, 6)), requires_grad=True)
    check_grads(lambda: T.softmax_cross_entropy(head_forward(head, h), [0, 1, 2, 1, 0]),
                [head.weights, head.bias, h], tol=1e-5)


def test_head_width_mismatch():
    with pytest.raises(DimensionError):
        head_forward(Head.zeros("task", 8, 2), T.Tensor(np.zeros((1, 7))))
    with pytest.raises(ConfigError):
        Head.zeros("critic", 8, 2)


# -- pretraining -------------------------------------------------------------------

def test_zero_steps_returns_seeded_init():
    res = pretrain_mlm(SMALL, np.ones((4, 5), int), 0)
    init = init_params(SMALL, RngState(SMALL.seed, "encoder_init"))
    assert all(np.array_equal(res.params[k], init[k]) for k in init)


def test_pretraining_is_deterministic():
    corpus = RngState(0).integers(1, 12, size=(40, 5))
    a = pretrain_mlm(SMALL, corpus, 5, batch_size=8).params
    b = pretrain_mlm(SMALL, corpus, 5, batch_size=8).params
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_pretrained_params_are_read_only():
    res = pretrain_mlm(SMALL, RngState(0).integers(1, 12, size=(16, 5)), 2, batch_size=8)
    with pytest.raises(ValueError):
        res.params["embed.tok"][0, 0] = 1.0


def test_masked_token_accuracy_beats_chance():
    cfg = EncoderConfig()
    train, dev, _ = generate(SynthSpec())
    res = pretrain_mlm(cfg, as_arrays(train)[0], 150)
    acc = masked_token_accuracy(cfg, res.params, res.mlm_head, as_arrays(dev)[0], RngState(5))
    assert acc > 5 / cfg.vocab_size
