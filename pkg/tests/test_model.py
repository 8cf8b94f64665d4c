import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interlock import tensor as T
from interlock.errors import ConfigurationError, DimensionError
from interlock.model import ArchitectureSpec, build, component_losses, forward, predict_logits
from interlock.nn import BatchNorm, Conv2d, Ctx, Linear, MaxPool, Residual
from interlock.tensor import Tape, Tensor


def layer_kinds(layers):
    return [type(layer).__name__ for layer in layers]


def test_toy_conv_depth3_layout():
    model = build(ArchitectureSpec("toy_conv", (3, 32, 32), 10, depth=3), seed=0)
    assert model.n == 3
    c1, c2, c3 = model.components
    assert layer_kinds(c1.body.layers) == ["Conv2d", "BatchNorm", "ReLU"]
    assert c1.body.layers[0].weight.shape[0] == 32
    assert layer_kinds(c2.body.layers) == ["Conv2d", "BatchNorm", "ReLU", "MaxPool"]
    assert c2.body.layers[0].weight.shape[0] == 64
    assert layer_kinds(c3.body.layers) == ["Conv2d", "BatchNorm", "ReLU", "MaxPool", "Flatten", "Linear"]
    assert c3.body.layers[0].weight.shape[0] == 64
    assert c3.head is None
    for c in (c1, c2):
        assert layer_kinds(c.head.layers) == ["Flatten", "Linear"]


def test_toy_conv_depth10_repeats_small_block():
    model = build(ArchitectureSpec("toy_conv", (3, 16, 16), 10, depth=10), seed=0)
    assert model.n == 10
    for k in range(3, 9):
        body = model.components[k - 1].body.layers
        assert layer_kinds(body) == ["Conv2d", "BatchNorm", "ReLU"]
        assert body[0].weight.shape[:2] == (32, 32)


def test_mlp_rebuild_is_identical():
    spec = ArchitectureSpec("mlp", (3,), 2, widths=(4, 4, 4))
    a, b = build(spec, seed=5), build(spec, seed=5)
    assert a.n == 3
    assert all(len(c.body.layers) == 2 for c in a.components[:-1])
    assert a.param_count() == b.param_count()
    for p, q in zip(a.params(), b.params()):
        assert p.id == q.id
        np.testing.assert_array_equal(p.value, q.value)


def test_different_seeds_give_different_weights():
    spec = ArchitectureSpec("mlp", (3,), 2, widths=(4, 4))
    a, b = build(spec, seed=1), build(spec, seed=2)
    assert not np.array_equal(a.params()[0].value, b.params()[0].value)


def test_conv_head_layout():
    spec = ArchitectureSpec("resnet_lite", (3, 8, 8), 4, blocks=3, aux_head="conv_head", res_width=4, head_filters=(6, 5))
    model = build(spec, seed=0)
    head = model.components[0].head
    assert layer_kinds(head.layers) == [
        "Conv2d", "BatchNorm", "ReLU", "Conv2d", "BatchNorm", "ReLU", "GlobalAvgPool", "Linear",
    ]
    assert isinstance(model.components[1].body.layers[0], Residual)


@pytest.mark.parametrize(
    "spec, field",
    [
        (ArchitectureSpec("toy_conv", depth=2), "model.depth"),
        (ArchitectureSpec("mlp", (3,), widths=()), "model.widths"),
        (ArchitectureSpec("resnet_lite", blocks=0), "model.blocks"),
        (ArchitectureSpec("wide"), "model.preset"),
        (ArchitectureSpec(aux_head="mlp"), "model.aux_head"),
    ],
)
def test_invalid_specs_name_the_violated_constraint(spec, field):
    with pytest.raises(ConfigurationError, match=field):
        build(spec)


def test_toy_conv_rejects_flat_input():
    with pytest.raises(ConfigurationError, match="input shape"):
        build(ArchitectureSpec("toy_conv", (12,)))


def conv_out(h, w, pool):
    # 3x3 conv with padding 1 keeps the size; 2x2 pool at stride 1 shrinks by one
    return (h - 1, w - 1) if pool else (h, w)


def test_toy_conv_d6_activation_shapes():
    spec = ArchitectureSpec("toy_conv", (3, 9, 7), 10, depth=6)
    model = build(spec, seed=0)
    res = forward(model, np.random.default_rng(0).standard_normal((4, 3, 9, 7)), train=False)
    h, w = 9, 7
    expected = []
    for k in range(1, 5):
        expected.append((4, 32, h, w))
    h, w = conv_out(h, w, True)
    expected.append((4, 64, h, w))
    h, w = conv_out(h, w, True)
    expected.append((4, 10))
    assert [a.shape for a in res.activations] == expected
    assert all(lg.shape == (4, 10) for lg in res.logits)


def test_component_shapes_chain():
    for spec in [
        ArchitectureSpec("toy_conv", (3, 8, 8), 5, depth=5),
        ArchitectureSpec("mlp", (6,), 3, widths=(5, 4, 3)),
        ArchitectureSpec("resnet_lite", (2, 6, 6), 3, blocks=3, res_width=4),
    ]:
        model = build(spec)
        for lo, hi in zip(model.components, model.components[1:]):
            assert lo.out_shape == hi.in_shape
        assert [c.index for c in model.components] == list(range(1, model.n + 1))


def test_body_and_head_params_are_disjoint():
    model = build(ArchitectureSpec("toy_conv", (3, 6, 6), 4, depth=4, filters=(4, 6)))
    for c in model.components:
        assert not {id(p) for p in c.body_params()} & {id(p) for p in c.head_params()}
    ids = [p.id for p in model.params()]
    assert len(ids) == len(set(ids))


def test_single_component_equals_plain_stack():
    model = build(ArchitectureSpec("mlp", (4,), 3, widths=(6,)), seed=2)
    x = np.random.default_rng(0).standard_normal((5, 4))
    res = forward(model, x)
    plain = model.components[0].body(Tensor(x), Ctx())
    np.testing.assert_array_equal(res.logits[0].data, plain.data)


def test_detaching_every_boundary_leaves_values_unchanged():
    model = build(ArchitectureSpec("toy_conv", (3, 6, 6), 4, depth=4, filters=(4, 6)), seed=1)
    x = np.random.default_rng(1).standard_normal((3, 3, 6, 6))
    plain = forward(model, x, tape=Tape(), update_stats=False)
    cut = forward(model, x, tape=Tape(), cut=range(1, model.n + 1), update_stats=False)
    for a, b in zip(plain.logits, cut.logits):
        np.testing.assert_array_equal(a.data, b.data)
    for a, d in zip(plain.activations, plain.detached):
        np.testing.assert_array_equal(a.data, d.data)


def test_forward_shape_error_names_component():
    model = build(ArchitectureSpec("mlp", (4,), 3, widths=(6, 6)))
    with pytest.raises(DimensionError, match="component 1"):
        forward(model, np.zeros((2, 5)))
    with pytest.raises(DimensionError, match="component 2"):
        from interlock.model import run_component

        run_component(model.components[1], Tensor(np.zeros((2, 5))), Ctx())


def test_uniform_logits_give_log_classes_at_every_head():
    model = build(ArchitectureSpec("mlp", (4,), 10, widths=(6, 6, 6)))
    logits = [Tensor(np.zeros((3, 10))) for _ in range(3)]
    losses = component_losses(model, logits, np.array([0, 4, 9]))
    for loss in losses:
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_identical_logits_give_identical_losses():
    model = build(ArchitectureSpec("mlp", (4,), 5, widths=(6, 6, 6)))
    z = np.random.default_rng(0).standard_normal((4, 5))
    losses = component_losses(model, [Tensor(z)] * 3, np.array([0, 1, 2, 3]))
    assert losses[0].item() == losses[1].item() == losses[2].item()


def test_component_losses_needs_every_head():
    model = build(ArchitectureSpec("mlp", (4,), 5, widths=(6, 6, 6)))
    with pytest.raises(ValueError):
        component_losses(model, [Tensor(np.zeros((1, 5)))], np.array([0]))


def test_final_loss_matches_unpartitioned_copy():
    model = build(ArchitectureSpec("toy_conv", (3, 6, 6), 4, depth=4, filters=(4, 6)), seed=3)
    x = np.random.default_rng(3).standard_normal((4, 3, 6, 6))
    y = np.array([0, 1, 2, 3])
    res = forward(model, x, train=False)
    final = component_losses(model, res.logits, y)[-1].item()
    stack = model.flat_stack()
    ref = T.softmax_cross_entropy(stack(Tensor(x), Ctx(train=False)), y).item()
    assert final == ref


@settings(max_examples=15, deadline=None)
@given(
    widths=st.lists(st.integers(1, 6), min_size=1, max_size=5),
    seed=st.integers(0, 2**16),
    batch=st.integers(1, 4),
)
def test_partition_transparency_mlp(widths, seed, batch):
    model = build(ArchitectureSpec("mlp", (3,), 4, widths=tuple(widths)), seed=seed)
    x = np.random.default_rng(seed).standard_normal((batch, 3))
    res = forward(model, x)
    flat = model.flat_stack()(Tensor(x), Ctx())
    np.testing.assert_array_equal(res.logits[-1].data, flat.data)


@settings(max_examples=5, deadline=None)
@given(depth=st.integers(3, 5), seed=st.integers(0, 1000))
def test_partition_transparency_conv(depth, seed):
    model = build(ArchitectureSpec("toy_conv", (2, 5, 5), 3, depth=depth, filters=(3, 4)), seed=seed)
    x = np.random.default_rng(seed).standard_normal((2, 2, 5, 5))
    res = forward(model, x, train=False)
    flat = model.flat_stack()(Tensor(x), Ctx(train=False))
    np.testing.assert_array_equal(res.logits[-1].data, flat.data)


def test_head_isolation():
    model = build(ArchitectureSpec("toy_conv", (3, 6, 6), 4, depth=4, filters=(4, 6)), seed=0)
    x = np.random.default_rng(0).standard_normal((3, 3, 6, 6))
    y = np.array([0, 1, 2])
    for k in range(1, model.n + 1):
        tape = Tape()
        res = forward(model, x, tape=tape, update_stats=False)
        loss = T.softmax_cross_entropy(res.logits[k - 1], y)
        T.zero_grads(model.params())
        tape.backward(loss)
        for j in range(1, model.n + 1):
            for p in model.head_params(j):
                if j == k:
                    continue
                assert not tape.reaches(p, loss)
                assert not p.grad.any()
        T.zero_grads(model.params())


def test_predict_logits_batches_agree_with_single_pass():
    model = build(ArchitectureSpec("toy_conv", (3, 6, 6), 4, depth=3, filters=(4, 6)), seed=0)
    x = np.random.default_rng(0).standard_normal((7, 3, 6, 6))
    a = predict_logits(model, x, batch_size=3)
    b = [lg.data for lg in forward(model, x, train=False).logits]
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=0, atol=1e-12)


def test_layers_use_expected_building_blocks():
    model = build(ArchitectureSpec("toy_conv", (3, 6, 6), 4, depth=3, filters=(4, 6)))
    kinds = {type(l) for c in model.components for l in c.body.layers}
    assert {Conv2d, BatchNorm, MaxPool, Linear} <= kinds
