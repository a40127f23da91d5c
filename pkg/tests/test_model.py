import numpy as np
import pytest

from fedlips import model as md
from fedlips import numerics as nm
from conftest import rel_err

GRAD_RTOL = 1e-4
FD_EPS = 1e-5


def loss_of(model, inputs, labels):
    return md.forward_backward(model, inputs, labels)[0]


def loss_with_block(model, name, attr, value, inputs, labels):
    """Loss after swapping one parameter block, leaving the model untouched."""
    swapped = model.clone()
    setattr(swapped.layer(name), attr, value.reshape(getattr(model.layer(name), attr).shape))
    return loss_of(swapped, inputs, labels)


def fd_at_coords(f, x, coords, eps=FD_EPS):
    """Central differences at a subset of flat coordinates."""
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    out = np.zeros(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * eps)
    return out


# ---------------------------------------------------------------------------
# build_model
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("arch,shape", [("mlp", (12,)), ("vgg_mini", (3, 8, 8)), ("resnet_mini", (3, 8, 8))])
def test_build_deterministic(arch, shape):
    m1 = md.build_model(arch, shape, 10, seed=7)
    m2 = md.build_model(arch, shape, 10, seed=7)
    for l1, l2 in zip(m1.layers, m2.layers):
        assert np.array_equal(l1.weights, l2.weights)
        assert l1.bias is None or np.array_equal(l1.bias, l2.bias)


def test_build_distinct_seeds_differ():
    m1 = md.build_model("mlp", (12,), 10, seed=1)
    m2 = md.build_model("mlp", (12,), 10, seed=2)
    assert any(not np.array_equal(a.weights, b.weights) for a, b in zip(m1.layers, m2.layers))


def test_unknown_arch_rejected():
    with pytest.raises(ValueError, match="unknown arch"):
        md.build_model("transformer", (12,), 10, seed=0)


def test_vgg_mini_layer_listing_matches_declared_table():
    m = md.build_model("vgg_mini", (3, 8, 8), 10, seed=0)
    convs = [l.name for l in m.layers if l.kind == "conv"]
    linears = [l.name for l in m.layers if l.kind == "linear"]
    bns = [l.name for l in m.layers if l.kind == "batchnorm"]
    assert convs == ["conv1", "conv2", "conv3", "conv4"]
    assert linears == ["fc"]
    assert bns == ["bn1", "bn2", "bn3", "bn4"]
    assert m.layer("conv1").role == "first"
    assert m.layer("fc").role == "last"
    assert m.middle_weight_layers() == ["conv2", "conv3", "conv4"]


@pytest.mark.parametrize("arch,shape", [("mlp", (12,)), ("vgg_mini", (3, 8, 8)), ("resnet_mini", (3, 8, 8))])
def test_role_partition(arch, shape):
    m = md.build_model(arch, shape, 10, seed=0)
    non_bn = m.weight_layers()
    assert sum(l.role == "first" for l in non_bn) == 1
    assert sum(l.role == "last" for l in non_bn) == 1
    for l in m.bn_layers():
        assert l.role == "middle"
        assert not l.shareable
    for l in non_bn:
        assert l.shareable


def test_bn_init_identity():
    m = md.build_model("vgg_mini", (3, 8, 8), 10, seed=0)
    for l in m.bn_layers():
        assert np.array_equal(l.weights, np.ones_like(l.weights))
        assert np.array_equal(l.bias, np.zeros_like(l.bias))
        assert np.array_equal(l.running_mean, np.zeros_like(l.running_mean))
        assert np.array_equal(l.running_var, np.ones_like(l.running_var))


# ---------------------------------------------------------------------------
# forward_backward
# ---------------------------------------------------------------------------

def test_zero_classifier_gives_uniform_loss(rng):
    m = md.build_model("mlp", (6,), 5, seed=3)
    fc3 = m.layer("fc3")
    fc3.weights = np.zeros_like(fc3.weights)
    fc3.bias = np.zeros_like(fc3.bias)
    x = rng.normal(size=(4, 6))
    y = rng.integers(0, 5, size=4)
    loss, _, _, _ = md.forward_backward(m, x, y)
    assert abs(loss - np.log(5)) < 1e-12


def test_forward_backward_deterministic(rng):
    m = md.build_model("vgg_mini", (3, 8, 8), 10, seed=3)
    x = rng.normal(size=(4, 3, 8, 8))
    y = rng.integers(0, 10, size=4)
    r1 = md.forward_backward(m, x, y)
    r2 = md.forward_backward(m, x, y)
    assert r1[0] == r2[0]
    for name in r1[1]:
        assert np.array_equal(r1[1][name][0], r2[1][name][0])


def test_duplicated_batch_same_loss(rng):
    m = md.build_model("mlp", (6,), 4, seed=1)
    x = rng.normal(size=(3, 6))
    y = rng.integers(0, 4, size=3)
    loss1 = loss_of(m, x, y)
    loss2 = loss_of(m, np.concatenate([x, x]), np.concatenate([y, y]))
    assert abs(loss1 - loss2) < 1e-12


def test_grad_norm_is_weight_grad_l2(rng):
    m = md.build_model("mlp", (6,), 4, seed=1)
    x = rng.normal(size=(5, 6))
    y = rng.integers(0, 4, size=5)
    _, grads, norms, _ = md.forward_backward(m, x, y)
    for name, (dw, _) in grads.items():
        assert norms[name] == pytest.approx(float(np.linalg.norm(dw)), rel=0, abs=0)


def test_mlp_grads_match_finite_diff(rng):
    m = md.build_model("mlp", (6,), 4, seed=5)
    x = rng.normal(size=(4, 6))
    y = rng.integers(0, 4, size=4)
    _, grads, _, _ = md.forward_backward(m, x, y)
    for name in m.layer_names():
        layer = m.layer(name)
        fdw = nm.finite_diff_grad(
            lambda v: loss_with_block(m, name, "weights", v, x, y), layer.weights, FD_EPS)
        assert rel_err(grads[name][0], fdw) < GRAD_RTOL, name
        fdb = nm.finite_diff_grad(
            lambda v: loss_with_block(m, name, "bias", v, x, y), layer.bias, FD_EPS)
        assert rel_err(grads[name][1], fdb) < GRAD_RTOL, name


@pytest.mark.parametrize("arch", ["vgg_mini", "resnet_mini"])
def test_conv_model_grads_match_sampled_finite_diff(arch, rng):
    m = md.build_model(arch, (2, 4, 4), 3, seed=5)
    x = rng.normal(size=(3, 2, 4, 4))
    y = rng.integers(0, 3, size=3)
    _, grads, _, _ = md.forward_backward(m, x, y)
    for layer in m.layers:
        dw = grads[layer.name][0].ravel()
        coords = rng.choice(dw.size, size=min(6, dw.size), replace=False)
        fdw = fd_at_coords(
            lambda v: loss_with_block(m, layer.name, "weights", v, x, y), layer.weights, coords)
        assert rel_err(dw[coords], fdw) < GRAD_RTOL, layer.name


def test_bn_updates_returned_not_applied(rng):
    m = md.build_model("vgg_mini", (3, 8, 8), 10, seed=3)
    before = {l.name: l.running_mean.copy() for l in m.bn_layers()}
    x = rng.normal(size=(4, 3, 8, 8))
    y = rng.integers(0, 10, size=4)
    _, _, _, bn_updates = md.forward_backward(m, x, y)
    for l in m.bn_layers():
        assert np.array_equal(l.running_mean, before[l.name])
        assert l.name in bn_updates
        assert not np.array_equal(bn_updates[l.name][0], before[l.name])
    m2 = md.apply_bn_updates(m, bn_updates)
    for l in m2.bn_layers():
        assert np.array_equal(l.running_mean, bn_updates[l.name][0])


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------

def _unit_grads(model, fill=0.0):
    return {l.name: (np.full_like(l.weights, fill),
                     None if l.bias is None else np.full_like(l.bias, fill))
            for l in model.layers}


def test_sgd_zero_lr_is_identity(rng):
    m = md.build_model("mlp", (6,), 4, seed=1)
    x = rng.normal(size=(4, 6))
    y = rng.integers(0, 4, size=4)
    _, grads, _, _ = md.forward_backward(m, x, y)
    m2 = md.sgd_step(m, grads, lr=0.0)
    for l1, l2 in zip(m.layers, m2.layers):
        assert np.array_equal(l1.weights, l2.weights)


def test_sgd_arithmetic():
    m = md.build_model("mlp", (2,), 2, seed=0)
    fc1 = m.layer("fc1")
    fc1.weights = np.ones_like(fc1.weights)
    grads = _unit_grads(m)
    grads["fc1"] = (np.full_like(fc1.weights, 0.5), np.zeros_like(fc1.bias))
    m2 = md.sgd_step(m, grads, lr=0.1)
    assert np.allclose(m2.layer("fc1").weights, 0.95)


def test_sgd_two_steps_equal_double_lr():
    m = md.build_model("mlp", (3,), 2, seed=2)
    grads = _unit_grads(m, fill=0.25)
    one = md.sgd_step(md.sgd_step(m, grads, 0.1), grads, 0.1)
    two = md.sgd_step(m, grads, 0.2)
    for l1, l2 in zip(one.layers, two.layers):
        assert np.allclose(l1.weights, l2.weights, atol=1e-15)


def test_sgd_misaligned_grads_rejected():
    m = md.build_model("mlp", (3,), 2, seed=2)
    grads = _unit_grads(m)
    del grads["fc2"]
    with pytest.raises(ValueError, match="misaligned"):
        md.sgd_step(m, grads, 0.1)
    grads = _unit_grads(m)
    grads["fc2"] = (np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(ValueError, match="misaligned"):
        md.sgd_step(m, grads, 0.1)


def test_sgd_preserves_structure_and_running_stats(rng):
    m = md.build_model("vgg_mini", (3, 8, 8), 10, seed=1)
    x = rng.normal(size=(4, 3, 8, 8))
    y = rng.integers(0, 10, size=4)
    _, grads, _, _ = md.forward_backward(m, x, y)
    m2 = md.sgd_step(m, grads, 0.1)
    assert m2.layer_names() == m.layer_names()
    for l1, l2 in zip(m.layers, m2.layers):
        assert l1.weights.shape == l2.weights.shape
        if l1.kind == "batchnorm":
            assert np.array_equal(l1.running_mean, l2.running_mean)
            assert np.array_equal(l1.running_var, l2.running_var)


# ---------------------------------------------------------------------------
# layer_weight_vector
# ---------------------------------------------------------------------------

def test_weight_vector_roundtrip(rng):
    m = md.build_model("mlp", (6,), 4, seed=1)
    v = md.layer_weight_vector(m, "fc2")
    assert np.array_equal(v.reshape(m.layer("fc2").weights.shape).ravel(), v)
    assert v.size == m.layer("fc2").weights.size


def test_weight_vector_row_major_order():
    m = md.build_model("mlp", (2,), 2, seed=0)
    fc1 = m.layer("fc1")
    fc1.weights = np.arange(1.0, 1.0 + fc1.weights.size).reshape(fc1.weights.shape)
    v = md.layer_weight_vector(m, "fc1")
    assert np.array_equal(v[:4], np.array([1.0, 2.0, 3.0, 4.0]))


def test_weight_vector_unknown_layer():
    m = md.build_model("mlp", (2,), 2, seed=0)
    with pytest.raises(ValueError, match="unknown layer"):
        md.layer_weight_vector(m, "nope")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    m = md.build_model("resnet_mini", (3, 8, 8), 10, seed=9)
    x = rng.normal(size=(4, 3, 8, 8))
    y = rng.integers(0, 10, size=4)
    _, grads, _, bn = md.forward_backward(m, x, y)
    m = md.apply_bn_updates(md.sgd_step(m, grads, 0.1), bn)

    path = tmp_path / "ckpt.npz"
    md.save_model(m, path)
    m2 = md.load_model(path)
    assert m2.arch_id == m.arch_id
    assert m2.layer_names() == m.layer_names()
    for l1, l2 in zip(m.layers, m2.layers):
        assert (l1.kind, l1.role, l1.shareable) == (l2.kind, l2.role, l2.shareable)
        assert np.array_equal(l1.weights, l2.weights)
        if l1.running_mean is not None:
            assert np.array_equal(l1.running_mean, l2.running_mean)
            assert np.array_equal(l1.running_var, l2.running_var)
    logits1 = md.predict(m, x)
    logits2 = md.predict(m2, x)
    assert np.array_equal(logits1, logits2)
