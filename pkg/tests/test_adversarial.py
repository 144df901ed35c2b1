import numpy as np
import pytest

from diffgate import tensor as T
from diffgate.adversarial import AdversarialObjective, adversarial_loss, probe_attribute, probe_features
from diffgate.encoder import EncoderConfig, Head, encode, head_forward, init_params
from diffgate.errors import ConfigError, MetricError
from diffgate.rng import RngState

SMALL = EncoderConfig(vocab_size=12, max_seq_len=5, num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=12)
TOK = RngState(0).integers(1, 12, size=(6, 5))
Y = np.array([0, 1, 0, 1, 1, 0])
A = np.array([1, 1, 0, 0, 1, 0])


def setup(lam):
    r = RngState(1)
    params = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in init_params(SMALL, r.stream("p")).items()}
    obj = AdversarialObjective(lam, Head.random("task", 8, 2, r.stream("t"), 0.5),
                               Head.random("adversarial", 8, 2, r.stream("a"), 0.5))
    return params, obj


def grads(tensors):
    return [None if t.grad is None else t.grad.copy() for t in tensors]


def branch_grads(params, head, labels):
    for t in list(params.values()) + head.parameters():
        t.grad = None
    T.softmax_cross_entropy(head_forward(head, encode(SMALL, params, TOK)), labels).backward()
    return grads(params.values()), grads(head.parameters())


def test_zero_lambda_matches_task_only_bitwise():
    params, obj = setup(0.0)
    total, _, _ = adversarial_loss(obj, encode(SMALL, params, TOK), Y, A)
    total.backward()
    combined = grads(params.values())
    task_only, _ = branch_grads(params, obj.task_head, Y)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(combined, task_only))


def test_encoder_gradient_is_task_minus_attribute():
    params, obj = setup(1.0)
    total, _, _ = adversarial_loss(obj, encode(SMALL, params, TOK), Y, A)
    total.backward()
    combined = grads(params.values())
    g_task, _ = branch_grads(params, obj.task_head, Y)
    g_attr, _ = branch_grads(params, obj.adv_head, A)
    for c, t, a in zip(combined, g_task, g_attr):
        assert np.allclose(c, t - a, rtol=1e-10, atol=1e-14)


def test_adv_head_gradient_unaffected_by_reversal():
    params, obj = setup(2.5)
    total, _, _ = adversarial_loss(obj, encode(SMALL, params, TOK), Y, A)
    total.backward()
    with_grl = grads(obj.adv_head.parameters())
    _, plain = branch_grads(params, obj.adv_head, A)
    assert all(np.allclose(a, b, rtol=1e-12, atol=0) for a, b in zip(with_grl, plain))


def test_forward_loss_independent_of_lambda():
    vals = []
    for lam in (0.0, 1.0, 7.0):
        params, obj = setup(lam)
        total, task, adv = adversarial_loss(obj, encode(SMALL, params, TOK), Y, A)
        vals.append((total.item(), task, adv))
    assert vals[0] == vals[1] == vals[2]


def test_task_term_can_be_dropped():
    params, obj = setup(1.0)
    obj.include_task_loss = False
    total, task, adv = adversarial_loss(obj, encode(SMALL, params, TOK), Y, A)
    assert total.item() == adv and np.isfinite(task)


def test_objective_validation():
    h = Head.zeros("task", 8, 2)
    with pytest.raises(ConfigError):
        AdversarialObjective(1.0, h, h)
    with pytest.raises(ConfigError):
        AdversarialObjective(-1.0, h, Head.zeros("adversarial", 8, 2))
    _, obj = setup(1.0)
    with pytest.raises(ValueError):
        adversarial_loss(obj, T.Tensor(np.zeros((3, 8))), Y, A)


# -- probe ---------------------------------------------------------------------------

def test_probe_on_shuffled_labels_is_chance():
    r = RngState(2)
    h = r.normal((2000, 16))
    a = r.permutation(np.arange(2000) % 2)
    _, bac = probe_features(h[:1000], a[:1000], h[1000:], a[1000:], 200, r.stream("probe"))
    assert abs(bac - 0.5) < 0.05


def test_probe_finds_attribute_coordinate():
    r = RngState(3)
    a = np.arange(1000) % 2
    tokens = np.column_stack([a, r.integers(0, 5, size=1000)])

    def producer(tok):
        noise = RngState(int(tok[:, 1].sum()), "n").normal((len(tok), 7))
        return np.column_stack([tok[:, :1].astype(float), noise])

    bac = probe_attribute(producer, (tokens[:500], a[:500]), (tokens[500:], a[500:]), probe_epochs=100)
    assert bac > 0.95


def test_probe_single_class_rejected():
    h = np.zeros((4, 2))
    with pytest.raises(MetricError):
        probe_features(h, [1, 1, 1, 1], h, [0, 1, 0, 1], 5, RngState(0))
    with pytest.raises(MetricError):
        probe_features(h, [0, 1, 0, 1], h, [1, 1, 1, 1], 5, RngState(0))
