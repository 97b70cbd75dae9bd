import numpy as np
import pytest

from stv.exceptions import GradientCheckError
from stv.gradcheck import (LAYER_CHECKS, LOSS_CHECKS, finite_difference_check, format_results,
                           run_gradient_suite)
from stv.tensor import Tensor, square, tensor_sum


def test_finite_difference_on_polynomial():
    x = Tensor([0.5, -1.5, 2.0], requires_grad=True)
    err = finite_difference_check(lambda: tensor_sum(square(x) * x), [x])
    assert err < 1e-6
    # parameters and grad slots are restored
    assert list(x.numpy()) == [0.5, -1.5, 2.0]
    assert x.grad is None


def test_finite_difference_rejects_bad_input():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(GradientCheckError):
        finite_difference_check(lambda: tensor_sum(x), [x], eps=0.5)
    with pytest.raises(GradientCheckError):
        finite_difference_check(lambda: tensor_sum(x), [Tensor([1.0])])
    rng = np.random.default_rng(0)
    with pytest.raises(GradientCheckError):
        finite_difference_check(lambda: tensor_sum(x * float(rng.normal())), [x])


def test_suite_covers_losses_and_layers():
    names = [name for name, _ in LOSS_CHECKS + LAYER_CHECKS]
    for expected in ('conv2d', 'maxpool2d', 'batchnorm2d', 'inception_lite'):
        assert any(n.startswith(expected) for n in names)
    assert len(LOSS_CHECKS) >= 5


def test_suite_passes():
    results = run_gradient_suite(seed=0, points=2)
    failed = [r for r in results if not r.passed]
    assert not failed, format_results(failed)
    text = format_results(results)
    assert text.count('PASS') == len(results)


def main():
    test_finite_difference_on_polynomial()
    test_finite_difference_rejects_bad_input()
    test_suite_covers_losses_and_layers()
    test_suite_passes()


if __name__ == '__main__':
    main()
