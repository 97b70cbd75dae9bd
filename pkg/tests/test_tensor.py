import io
import os
import shutil
import tempfile

import numpy as np
import pytest

from stv.exceptions import DataError, DegenerateInputError, DomainError, GraphError, ShapeError
from stv.tensor import (Tensor, add, backward, concat, elementwise_and_reduce, getitem,
                        hadamard_mul, hinge_clamp, l2_normalize, load_tensor, matmul, no_grad,
                        read_tensor, relu, reshape, save_tensor, scale, softmax, sqrt, square,
                        sub, tensor_mean, tensor_sum, write_tensor)


def test_add_mul_gradients():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    loss = tensor_sum(a * b + a)
    grads = backward(loss)
    assert np.allclose(grads[a], [5.0, 6.0, 7.0])
    assert np.allclose(grads[b], [1.0, 2.0, 3.0])
    assert np.allclose(a.grad, grads[a])


def test_grad_accumulates_across_calls():
    a = Tensor([1.0, -2.0], requires_grad=True)
    backward(tensor_sum(a * 3.0))
    backward(tensor_sum(a * 3.0))
    assert np.allclose(a.grad, [6.0, 6.0])
    a.zero_grad()
    assert a.grad is None


def test_shape_mismatch():
    with pytest.raises(ShapeError) as e:
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    assert e.value.shapes == ((2,), (3,))


def test_backward_needs_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(a * 2.0)
    with pytest.raises(GraphError):
        backward(Tensor(1.0))


def test_sqrt_domain_and_zero_subgradient():
    with pytest.raises(DomainError):
        sqrt(Tensor([-1.0]))
    a = Tensor([0.0, 4.0], requires_grad=True)
    g = backward(tensor_sum(sqrt(a)))[a]
    assert g[0] == 0.0
    assert np.isclose(g[1], 0.25)


def test_hinge_clamp_kink():
    a = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    out = hinge_clamp(a)
    assert list(out.numpy()) == [0.0, 0.0, 2.0]
    assert list(backward(tensor_sum(out))[a]) == [0.0, 0.0, 1.0]


def test_mean_axis():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    m = tensor_mean(a, axis=0)
    assert np.allclose(m.numpy(), [1.5, 2.5, 3.5])
    g = backward(tensor_sum(m))[a]
    assert np.allclose(g, 0.5)


def test_matmul_gradient():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]], requires_grad=True)
    grads = backward(tensor_sum(matmul(a, b)))
    assert np.allclose(grads[a], [[3.0, 4.0]])
    assert np.allclose(grads[b], [[1.0], [2.0]])
    with pytest.raises(ShapeError):
        matmul(a, a)


def test_l2_normalize():
    v = Tensor([[3.0, 4.0], [0.0, 2.0]])
    out = l2_normalize(v).numpy()
    assert np.allclose(out, [[0.6, 0.8], [0.0, 1.0]])
    with pytest.raises(DegenerateInputError):
        l2_normalize(Tensor([0.0, 0.0]))


def test_softmax_rows_sum_to_one():
    out = softmax(Tensor([[1000.0, 1000.0], [0.0, np.log(3.0)]])).numpy()
    assert np.allclose(out, [[0.5, 0.5], [0.25, 0.75]])
    with pytest.raises(DomainError):
        softmax(Tensor([np.inf, 0.0]))


def test_getitem_scatters_gradient():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    picked = getitem(a, np.array([0, 0, 2]))
    g = backward(tensor_sum(picked))[a]
    assert list(g) == [2.0, 0.0, 1.0]


def test_concat_and_reshape():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.zeros((2, 1)), requires_grad=True)
    c = concat([a, b], axis=1)
    assert c.shape == [2, 3]
    r = reshape(c, (3, 2))
    grads = backward(tensor_sum(r * 2.0))
    assert np.allclose(grads[a], 2.0)
    assert grads[b].shape == (2, 1)
    with pytest.raises(ShapeError):
        concat([a, Tensor(np.ones((3, 1)))], axis=1)


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        out = a * 2.0
    assert out.node is None
    assert not out.requires_grad
    assert (a * 2.0).node is not None


def test_data_is_read_only():
    a = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        a.data[0] = 5.0
    a.assign([3.0, 4.0])
    assert list(a.numpy()) == [3.0, 4.0]
    with pytest.raises(ShapeError):
        a.assign([1.0])


def test_tensor_container():
    arr = np.arange(24.0).reshape(2, 3, 4) / 7.0
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    assert np.array_equal(read_tensor(buf).numpy(), arr)

    tmp_dir = tempfile.mkdtemp()
    path = os.path.join(tmp_dir, 'x.tensor')
    save_tensor(path, Tensor(arr))
    assert np.array_equal(load_tensor(path).numpy(), arr)
    shutil.rmtree(tmp_dir)


def test_tensor_container_corruption():
    buf = io.BytesIO()
    write_tensor(buf, np.ones((2, 2)))
    raw = buf.getvalue()
    with pytest.raises(DataError):
        read_tensor(io.BytesIO(raw[:-3]))
    with pytest.raises(DataError):
        read_tensor(io.BytesIO(raw.replace(b'TENSOR v1', b'TENSOR v9')))
    with pytest.raises(DataError):
        read_tensor(io.BytesIO(b'garbage\n'))


def test_elementwise_and_reduce_dispatch():
    x = np.array([0.5, 1.0, 2.0])
    y = np.array([3.0, -1.0, 0.25])
    binary = {'add': add, 'sub': sub, 'hadamard_mul': hadamard_mul}
    unary = {'sqrt': sqrt, 'square': square, 'relu': relu, 'hinge_clamp': hinge_clamp,
             'sum': tensor_sum, 'mean': tensor_mean}

    def run(fn, *arrays, **kwargs):
        inputs = [Tensor(v, requires_grad=True) for v in arrays]
        out = tensor_sum(fn(*inputs, **kwargs))
        grads = backward(out)
        return out.numpy(), [grads[t] for t in inputs]

    for kind, fn in sorted(binary.items()):
        value, grads = run(lambda *t: elementwise_and_reduce(kind, *t), x, y)
        expected, expected_grads = run(fn, x, y)
        assert np.allclose(value, expected)
        assert all(np.allclose(g, e) for g, e in zip(grads, expected_grads))
    for kind, fn in sorted(unary.items()):
        value, grads = run(lambda t: elementwise_and_reduce(kind, t), y if kind != 'sqrt' else x)
        expected, expected_grads = run(fn, y if kind != 'sqrt' else x)
        assert np.allclose(value, expected)
        assert np.allclose(grads[0], expected_grads[0])

    value, grads = run(lambda t: elementwise_and_reduce('scale', t, factor=-2.0), x)
    expected, expected_grads = run(scale, x, c=-2.0)
    assert np.allclose(value, expected) and np.allclose(value, -7.0)
    assert np.allclose(grads[0], [-2.0, -2.0, -2.0])
    assert np.allclose(grads[0], expected_grads[0])

    with pytest.raises(DomainError):
        elementwise_and_reduce('cube', Tensor(x))


def main():
    test_add_mul_gradients()
    test_grad_accumulates_across_calls()
    test_shape_mismatch()
    test_backward_needs_scalar()
    test_sqrt_domain_and_zero_subgradient()
    test_hinge_clamp_kink()
    test_mean_axis()
    test_matmul_gradient()
    test_l2_normalize()
    test_softmax_rows_sum_to_one()
    test_getitem_scatters_gradient()
    test_concat_and_reshape()
    test_no_grad_records_nothing()
    test_data_is_read_only()
    test_tensor_container()
    test_tensor_container_corruption()
    test_elementwise_and_reduce_dispatch()


if __name__ == '__main__':
    main()
