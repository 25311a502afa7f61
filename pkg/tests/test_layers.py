import numpy as np
import pytest

import autodiff as ad
from autodiff import Tape, Tensor
from errors import ShapeError
from layers import (BatchNorm, Dense, Dropout, ForwardContext, GaussianNoise, batchnorm_forward,
                    dense_forward, instance_norm_input, stochastic_forward)
from optimizers import AdamState, adam_step


def test_dense_identity_and_bias():
    params = {"weight": Tensor(np.eye(3)), "bias": Tensor(np.zeros(3))}
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(dense_forward(params, Tensor(x)).data, x)

    params["bias"] = Tensor([1.0, -2.0, 0.5])
    out = dense_forward(params, Tensor(np.zeros((4, 3)))).data
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_dense_matches_naive_product(rng):
    layer = Dense(4, 3, rng)
    layer.bias = Tensor(rng.normal(size=3))
    x = rng.normal(size=(5, 4))
    w, b = layer.weight.data, layer.bias.data
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            expected[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(4))
    np.testing.assert_allclose(layer(Tensor(x)).data, expected, rtol=1e-12)


def test_dense_rejects_wrong_width(rng):
    with pytest.raises(ShapeError, match="dense"):
        Dense(4, 3, rng)(Tensor(np.ones((2, 5))))


def test_batchnorm_train_mode_standardizes(rng):
    bn = BatchNorm(3)
    x = rng.normal(loc=4.0, scale=3.0, size=(64, 3))
    out = batchnorm_forward(bn, Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)


def test_batchnorm_updates_running_stats(rng):
    bn = BatchNorm(2, momentum=0.9)
    x = rng.normal(size=(10, 2))
    batchnorm_forward(bn, Tensor(x))
    np.testing.assert_allclose(bn.running_mean[0], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.running_var[0], 0.9 + 0.1 * x.var(axis=0, ddof=1))

    before = [v.copy() for v in bn.running_mean]
    batchnorm_forward(bn, Tensor(x), update_stats=False)
    np.testing.assert_array_equal(bn.running_mean[0], before[0])


def test_conditional_batchnorm_with_equal_sets_gives_equal_outputs(rng):
    bn = BatchNorm(3, n_sets=2)
    x = Tensor(rng.normal(size=(8, 3)))
    out1 = batchnorm_forward(bn, x, hypothesis_id=1, update_stats=False).data
    out2 = batchnorm_forward(bn, x, hypothesis_id=2, update_stats=False).data
    np.testing.assert_array_equal(out1, out2)


def test_conditional_batchnorm_selects_parameter_set(rng):
    bn = BatchNorm(2, n_sets=2)
    bn.shifts[1] = Tensor([5.0, 5.0], requires_grad=True)
    x = Tensor(rng.normal(size=(6, 2)))
    out1 = batchnorm_forward(bn, x, 1, update_stats=False).data
    out2 = batchnorm_forward(bn, x, 2, update_stats=False).data
    np.testing.assert_allclose(out2 - out1, 5.0)
    with pytest.raises(ValueError):
        batchnorm_forward(bn, x, 3)


def test_gradient_step_through_one_set_leaves_the_other_untouched(rng):
    bn = BatchNorm(3, n_sets=2)
    x = Tensor(rng.normal(size=(8, 3)))
    params = bn.parameters()
    frozen_before = {k: v.data.copy() for k, v in params.items() if k.endswith(".1")}
    with Tape() as tape:
        out = batchnorm_forward(bn, x, hypothesis_id=1)
        loss = ad.sum_(out * Tensor(rng.normal(size=(8, 3))))
    names = list(params)
    grads = dict(zip(names, ad.gradients(tape, loss, [params[n] for n in names])))
    assert not np.any(grads["scale.1"]) and not np.any(grads["shift.1"])
    adam_step(AdamState(), params, grads)
    for name, value in frozen_before.items():
        assert np.array_equal(params[name].data, value)
    assert not np.array_equal(params["shift.0"].data, np.zeros(3))


def test_batchnorm_eval_mode_uses_running_stats(rng):
    bn = BatchNorm(2, eps=1e-5)
    bn.running_mean[0] = np.array([1.0, -2.0])
    bn.running_var[0] = np.array([4.0, 0.25])
    bn.scales[0] = Tensor([2.0, 1.0])
    bn.shifts[0] = Tensor([0.5, 0.0])
    bn.eval()
    x = np.array([[3.0, -1.5]])
    out = batchnorm_forward(bn, Tensor(x)).data
    expected = [2.0 * (3.0 - 1.0) / np.sqrt(4.0 + 1e-5) + 0.5, (-1.5 + 2.0) / np.sqrt(0.25 + 1e-5)]
    np.testing.assert_allclose(out[0], expected, rtol=1e-12)


def test_batchnorm_rejects_single_sample_batch_in_train_mode():
    with pytest.raises(ShapeError, match="size 1"):
        batchnorm_forward(BatchNorm(2), Tensor(np.ones((1, 2))))


def test_batchnorm_on_images_normalizes_per_channel(rng):
    bn = BatchNorm(3)
    x = rng.normal(loc=2.0, size=(4, 3, 5, 5))
    out = batchnorm_forward(bn, Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)


def test_dropout_rate_zero_and_eval_mode_are_identity(rng):
    x = Tensor(rng.normal(size=(4, 5)))
    assert stochastic_forward("dropout", x, 0.0, rng) is x
    assert stochastic_forward("dropout", x, 0.7, rng, training=False) is x
    layer = Dropout(0.5).eval()
    assert layer(x, ForwardContext(rng=rng)) is x


def test_dropout_mask_is_reproducible():
    x = Tensor(np.ones((6, 6)))
    a = stochastic_forward("dropout", x, 0.5, np.random.default_rng(9)).data
    b = stochastic_forward("dropout", x, 0.5, np.random.default_rng(9)).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_dropout_preserves_expectation():
    x = Tensor(np.full(100_000, 3.0))
    out = stochastic_forward("dropout", x, 0.5, np.random.default_rng(0)).data
    assert abs(out.mean() - 3.0) < 0.03


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_rejects_bad_rate(rate):
    with pytest.raises(ValueError):
        Dropout(rate)


def test_gaussian_noise(rng):
    x = Tensor(np.zeros((200, 50)))
    out = stochastic_forward("gaussian-noise", x, 2.0, np.random.default_rng(1)).data
    assert abs(out.std() - 2.0) < 0.05
    assert GaussianNoise(1.0).eval()(x, ForwardContext(rng=rng)) is x
    layer = GaussianNoise(1.0)
    assert layer(x, ForwardContext(rng=rng, stochastic=False)) is x
    with pytest.raises(ValueError):
        GaussianNoise(-1.0)


def _standardized(rng, shape):
    x = rng.normal(size=shape)
    x = x - x.mean(axis=(2, 3), keepdims=True)
    return x / x.std(axis=(2, 3), keepdims=True)


def test_instance_norm_keeps_standardized_input(rng):
    x = _standardized(rng, (3, 2, 6, 6))
    np.testing.assert_allclose(instance_norm_input(x), x, atol=1e-5)


def test_instance_norm_is_invariant_to_channel_affine_maps(rng):
    x = rng.normal(size=(4, 3, 8, 8))
    scale = np.array([3.0, 2.0, 10.0]).reshape(1, 3, 1, 1)
    shift = np.array([7.0, -2.0, 0.25]).reshape(1, 3, 1, 1)
    np.testing.assert_allclose(instance_norm_input(scale * x + shift), instance_norm_input(x), atol=1e-5)


def test_instance_norm_matches_two_pass_oracle(rng):
    x = rng.uniform(size=(2, 3, 4, 4))
    out = instance_norm_input(x)
    for n in range(2):
        for c in range(3):
            plane = x[n, c]
            mu = plane.sum() / plane.size
            var = ((plane - mu) ** 2).sum() / plane.size
            np.testing.assert_allclose(out[n, c], (plane - mu) / np.sqrt(var + 1e-6), rtol=1e-10, atol=1e-12)


def test_instance_norm_maps_constant_planes_to_zero():
    np.testing.assert_array_equal(instance_norm_input(np.full((1, 2, 3, 3), 5.0)), 0.0)


def test_instance_norm_rejects_flat_input():
    with pytest.raises(ShapeError):
        instance_norm_input(np.ones((2, 3)))
