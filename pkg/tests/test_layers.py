import numpy as np
import pytest

from stv.exceptions import GeometryError, LayerConfigError, ShapeError
from stv.layers import (LayerParams, batchnorm2d, batchnorm_params, center_crop, conv2d,
                        conv_output_extent, conv_params, crop, deconv2d, deconv_params, dropout,
                        fc_params, fully_connected, haar_split, haar_split_merge, inception_lite,
                        inception_params, inception_split, maxpool2d, maxunpool2d,
                        pool_output_extent)
from stv.tensor import Tensor, backward, tensor_sum


def test_output_extents():
    assert conv_output_extent(48, 5, 1, 0) == 44
    assert conv_output_extent(7, 3, 2, 1) == 4
    with pytest.raises(GeometryError):
        conv_output_extent(6, 3, 2, 0)
    with pytest.raises(GeometryError):
        conv_output_extent(2, 5, 1, 0)
    assert pool_output_extent(5, 2, 2) == 2


def test_conv2d_sums_channels():
    params = conv_params(2, 1, 1)
    params.weight.assign(np.ones((1, 2, 1, 1)))
    params.bias.assign([0.5])
    x = Tensor(np.ones((1, 2, 3, 3)))
    out = conv2d(x, params)
    assert out.shape == [1, 1, 3, 3]
    assert np.allclose(out.numpy(), 2.5)
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 3, 3, 3))), params)


def test_conv2d_weight_gradient():
    params = conv_params(1, 1, 3)
    x = Tensor(np.ones((1, 1, 5, 5)))
    grads = backward(tensor_sum(conv2d(x, params)))
    # every kernel tap sees 9 ones
    assert np.allclose(grads[params.weight], 9.0)
    assert np.allclose(grads[params.bias], 9.0)


def test_deconv2d_shape():
    params = deconv_params(2, 3, 3, padding=1)
    out = deconv2d(Tensor(np.ones((2, 2, 4, 5))), params)
    assert out.shape == [2, 3, 4, 5]
    with pytest.raises(GeometryError):
        deconv2d(Tensor(np.ones((1, 2, 4, 4))), deconv_params(2, 3, 3, padding=3))


def test_maxpool_and_unpool():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4), requires_grad=True)
    out, idx = maxpool2d(x, 2)
    assert out.numpy()[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]
    assert idx[0, 0].tolist() == [[5, 7], [13, 15]]
    g = backward(tensor_sum(out))[x]
    assert g.sum() == 4.0
    assert g[0, 0, 1, 1] == 1.0

    up = maxunpool2d(out, idx, (1, 1, 4, 4)).numpy()
    assert up[0, 0, 3, 3] == 15.0
    assert up[0, 0, 0, 0] == 0.0
    assert up.sum() == 5.0 + 7.0 + 13.0 + 15.0
    with pytest.raises(ShapeError):
        maxunpool2d(out, idx[:, :, :1], (1, 1, 4, 4))


def test_maxpool_padding_keeps_extent():
    x = Tensor(-np.ones((1, 1, 4, 4)))
    out, _ = maxpool2d(x, 3, stride=1, padding=1)
    assert out.shape == [1, 1, 4, 4]
    # padded cells never win
    assert np.allclose(out.numpy(), -1.0)


def test_batchnorm_train_and_eval():
    rng = np.random.default_rng(3)
    params = batchnorm_params(2)
    x = Tensor(rng.normal(3.0, 2.0, (4, 2, 3, 3)))
    out = batchnorm2d(x, params, mode='train').numpy()
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    assert np.allclose(params.running_mean, 0.1 * x.numpy().mean(axis=(0, 2, 3)))

    params.running_mean = np.zeros(2)
    params.running_var = np.ones(2)
    evald = batchnorm2d(x, params, mode='eval').numpy()
    assert np.allclose(evald, x.numpy() / np.sqrt(1.0 + params.hyper['eps']))


def test_dropout_modes():
    x = Tensor(np.ones((4, 10)))
    assert dropout(x, 0.5, mode='eval') is x
    out = dropout(x, 0.5, rng=1).numpy()
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert np.array_equal(out, dropout(x, 0.5, rng=1).numpy())
    with pytest.raises(LayerConfigError):
        dropout(x, 1.0)


def test_fully_connected_flattens():
    params = fc_params(12, 4)
    out = fully_connected(Tensor(np.ones((2, 3, 2, 2))), params)
    assert out.shape == [2, 4]
    assert fully_connected(Tensor(np.ones(12)), params).shape == [4]
    with pytest.raises(ShapeError):
        fully_connected(Tensor(np.ones((2, 5))), params)


def test_crop():
    x = Tensor(np.arange(25.0).reshape(1, 1, 5, 5))
    assert crop(x, 1, 2, 2, 2).numpy()[0, 0].tolist() == [[7.0, 8.0], [12.0, 13.0]]
    assert center_crop(x, 3, 3).numpy()[0, 0, 0, 0] == 6.0
    with pytest.raises(GeometryError):
        crop(x, 4, 0, 2, 2)


def test_haar_split_merge():
    left = np.zeros((1, 1, 2, 4))
    left[..., :2] = 1.0
    maps = haar_split(Tensor(left), 'two_rect_horizontal')
    assert len(maps) == 2
    assert np.allclose(haar_split_merge(maps, 'two_rect_horizontal').numpy(), 1.0)

    quads = haar_split(Tensor(np.ones((1, 1, 4, 4))), 'four_rect_checker')
    assert [q.shape for q in quads] == [[1, 1, 2, 2]] * 4
    assert np.allclose(haar_split_merge(quads, 'four_rect_checker').numpy(), 0.0)
    with pytest.raises(ShapeError):
        haar_split_merge(quads[:2], 'four_rect_checker')
    with pytest.raises(LayerConfigError):
        haar_split(Tensor(left), 'diagonal')


def test_inception_lite():
    params = inception_params(3, out_channels=8)
    assert params.out_channels == 8
    out = inception_lite(Tensor(np.ones((1, 3, 6, 5))), params)
    assert out.shape == [1, 8, 6, 5]
    assert len(list(params.named_parameters())) == 8
    with pytest.raises(LayerConfigError):
        inception_split(10)


def test_layer_params_validation():
    with pytest.raises(LayerConfigError):
        LayerParams('pooling')
    with pytest.raises(LayerConfigError):
        LayerParams('fully_connected', Tensor(np.ones((2, 2, 2))))


def main():
    test_output_extents()
    test_conv2d_sums_channels()
    test_conv2d_weight_gradient()
    test_deconv2d_shape()
    test_maxpool_and_unpool()
    test_maxpool_padding_keeps_extent()
    test_batchnorm_train_and_eval()
    test_dropout_modes()
    test_fully_connected_flattens()
    test_crop()
    test_haar_split_merge()
    test_inception_lite()
    test_layer_params_validation()


if __name__ == '__main__':
    main()
