import math

import pytest
import torch

from lyric2melody import neural as nn_ops
from lyric2melody.diagnostics import operator_cases
from lyric2melody.neural import (
    Schedule,
    ShapeError,
    TransformerStack,
    adam_step,
    gradcheck,
    init_weights,
    lr_schedule,
    make_adam,
)


def _rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_()


def test_softmax_symmetric():
    out = nn_ops.softmax(torch.zeros(2, dtype=torch.float64))
    assert out.tolist() == [0.5, 0.5]


def test_softmax_rows_sum_to_one():
    rows = nn_ops.softmax(_rand(50, 17) * 30)
    assert torch.all((rows.sum(-1) - 1).abs() < 1e-12)


def test_cross_entropy_confident_correct_is_zero():
    logits = torch.full((1, 3, 5), -1e4, dtype=torch.float64)
    targets = torch.tensor([[1, 2, 0]])
    logits[0, 0, 1] = logits[0, 1, 2] = 0.0
    assert nn_ops.cross_entropy(logits, targets).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_ignores_pad():
    logits = _rand(1, 3, 5)
    a = nn_ops.cross_entropy(logits, torch.tensor([[1, 2, 0]]))
    b = nn_ops.cross_entropy(logits[:, :2], torch.tensor([[1, 2]]))
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nn_ops.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    with pytest.raises(ShapeError):
        nn_ops.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(ShapeError):
        nn_ops.layer_norm(torch.zeros(2, 3), torch.ones(4), torch.zeros(4))
    with pytest.raises(ShapeError):
        nn_ops.embedding_lookup(torch.zeros(4, 2), torch.tensor([4]))


def _attention_params(d, seed=1):
    return (_rand(3 * d, d, seed=seed) * 0.3, _rand(3 * d, seed=seed + 1) * 0.1,
            _rand(d, d, seed=seed + 2) * 0.3, _rand(d, seed=seed + 3) * 0.1)


@pytest.mark.parametrize("t", range(8))
def test_causal_attention_ignores_future(t):
    x = _rand(1, 8, 8).detach()
    params = [p.detach() for p in _attention_params(8)]
    base = nn_ops.causal_multihead_attention(x, *params, heads=2)
    y = x.clone()
    y[0, t:] += torch.randn(8 - t, 8, dtype=torch.float64) * 5
    moved = nn_ops.causal_multihead_attention(y, *params, heads=2)
    assert torch.equal(base[0, :t], moved[0, :t])
    if t < 7:
        assert not torch.allclose(base[0, t:], moved[0, t:])


def test_bidirectional_attention_sees_future():
    x = _rand(1, 6, 8).detach()
    params = [p.detach() for p in _attention_params(8)]
    base = nn_ops.bidirectional_multihead_attention(x, *params, heads=2)
    y = x.clone()
    y[0, 5] += 1.0
    assert not torch.allclose(base[0, 0], nn_ops.bidirectional_multihead_attention(y, *params, heads=2)[0, 0])


def test_key_padding_hides_keys():
    x = _rand(1, 6, 8).detach()
    params = [p.detach() for p in _attention_params(8)]
    pad = torch.tensor([[False] * 4 + [True] * 2])
    base = nn_ops.bidirectional_multihead_attention(x, *params, heads=2, key_padding=pad)
    y = x.clone()
    y[0, 4:] = 99.0
    moved = nn_ops.bidirectional_multihead_attention(y, *params, heads=2, key_padding=pad)
    assert torch.equal(base[0, :4], moved[0, :4])


@pytest.mark.parametrize("name", sorted(operator_cases()))
def test_operator_gradchecks(name):
    fn, params = operator_cases()[name]
    report = gradcheck(fn, params)
    assert report.passed, f"{name}\n{report}"


def test_gradcheck_identity_loss():
    p = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)
    report = gradcheck(lambda: p.sum(), {"p": p})
    assert report.errors["p"] < 1e-9


def test_gradcheck_reports_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g

    p = torch.tensor([1.5, -2.0], dtype=torch.float64, requires_grad=True)
    report = gradcheck(lambda: Wrong.apply(p).sum(), {"p": p})
    assert not report.passed and "p" in report.failures


def _tiny_decoder(seed):
    torch.manual_seed(seed)
    stack = TransformerStack(layers=2, d=16, heads=2, d_ff=32)
    emb = torch.nn.Embedding(11, 16)
    head = torch.nn.Linear(16, 11)
    mods = torch.nn.ModuleList([stack, emb, head])
    init_weights(mods, seed)
    mods.double()
    ids = torch.randint(1, 11, (2, 7), generator=torch.Generator().manual_seed(seed))
    pos = nn_ops.sinusoidal_positions(6, 16, torch.float64)

    def loss():
        h = emb(ids[:, :-1]) + pos
        return nn_ops.cross_entropy(head(stack(h, causal=True)), ids[:, 1:])

    return loss, dict(mods.named_parameters())


@pytest.mark.parametrize("seed", range(5))
def test_tiny_decoder_gradcheck(seed):
    loss, params = _tiny_decoder(seed)
    report = gradcheck(loss, params, tolerance=1e-5, max_entries=12, seed=seed)
    assert report.passed, str(report)


def test_adam_zero_gradient_keeps_parameters():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = make_adam([p])
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        adam_step(opt, 0.1)
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    p = torch.nn.Parameter(torch.tensor([3.0], dtype=torch.float64))
    opt = make_adam([p])
    p.grad = torch.ones_like(p)
    adam_step(opt, 0.01)
    assert p.item() == pytest.approx(3.0 - 0.01, abs=1e-9)


def test_adam_converges_on_quadratic():
    # short moment memories and a decaying rate damp the end-game oscillation
    p = torch.nn.Parameter(torch.tensor([5.0], dtype=torch.float64))
    opt = make_adam([p], betas=(0.5, 0.9))
    for step in range(100):
        opt.zero_grad()
        ((p - 2.0) ** 2).sum().backward()
        adam_step(opt, 0.5 * 0.95**step)
    assert abs(p.item() - 2.0) < 1e-3


def test_schedule_values():
    assert lr_schedule(0) == 0.0
    assert lr_schedule(100) == pytest.approx(5e-5)
    assert lr_schedule(200) == pytest.approx(1e-4)
    assert lr_schedule(200 + 150_000) == pytest.approx(5e-6)
    assert lr_schedule(10**6) == pytest.approx(5e-6)
    mid = lr_schedule(200 + 75_000)
    assert mid == pytest.approx((1e-4 + 5e-6) / 2)
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_schedule_monotone_after_warmup():
    values = [lr_schedule(s, Schedule(decay_steps=1000)) for s in range(200, 1300, 7)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_training_determinism():
    def run():
        torch.set_num_threads(1)
        stack = TransformerStack(2, 16, 2, 32)
        init_weights(stack, 11)
        opt = make_adam(stack.parameters())
        x = torch.randn(2, 5, 16, generator=torch.Generator().manual_seed(4))
        for step in range(5):
            opt.zero_grad()
            stack(x, causal=True).pow(2).mean().backward()
            adam_step(opt, 1e-3)
        return [p.detach().clone() for p in stack.parameters()]

    a, b = run(), run()
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_sinusoidal_positions_shape_and_start():
    pe = nn_ops.sinusoidal_positions(10, 6)
    assert pe.shape == (10, 6)
    assert pe[0, 0::2].abs().max() == 0 and torch.all(pe[0, 1::2] == 1)
    assert math.isclose(pe[1, 0].item(), math.sin(1.0), rel_tol=1e-6)


def test_incremental_steps_match_full_forward():
    stack = TransformerStack(2, 16, 2, 32)
    init_weights(stack, 5)
    stack.double().eval()
    x = torch.randn(3, 9, 16, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    extra = torch.randn(3, 9, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    full = stack(x, causal=True, layer_input=extra)
    caches = [{} for _ in stack.blocks]
    steps = [stack.step(x[:, t : t + 1], caches, extra[:, t : t + 1]) for t in range(9)]
    assert torch.allclose(torch.cat(steps, dim=1), full, atol=1e-12)
