import numpy as np
import pytest

from evstate import optim
from evstate.autodiff import Tensor
from evstate.errors import NumericError


def test_zero_gradient_no_decay_leaves_params():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    adam = optim.Adam({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2, dtype=np.float32)
    adam.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_first_step_magnitude_is_lr():
    # constant gradient g: bias-corrected m/sqrt(v) = sign(g) on step 1
    p = Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)
    adam = optim.Adam({"p": p}, lr=0.05, weight_decay=0.0)
    p.grad = np.array([3.7])
    adam.step()
    assert abs(p.data[0] + 0.05) < 1e-6


def test_quadratic_bowl_convergence():
    p = Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
    adam = optim.Adam({"p": p}, lr=0.05, weight_decay=0.0)
    for _ in range(200):
        p.grad = 2.0 * p.data  # d/dw of w^2
        adam.step()
    assert abs(p.data[0]) < 1e-2


def test_decoupled_weight_decay_applies_before_update():
    p = Tensor(np.array([2.0], dtype=np.float64), requires_grad=True)
    adam = optim.Adam({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    adam.step()
    # decay shrinks by lr*wd*p = 0.1; zero gradient adds nothing
    assert p.data[0] == pytest.approx(1.9)


def test_non_finite_gradient_names_parameter():
    p = Tensor(np.array([1.0]), requires_grad=True)
    adam = optim.Adam({"spatial.ls.w": p})
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError) as err:
        adam.step()
    assert "spatial.ls.w" in str(err.value)


def test_clip_grad_norm():
    p1 = Tensor(np.zeros(3), requires_grad=True)
    p2 = Tensor(np.zeros(4), requires_grad=True)
    p1.grad = np.full(3, 3.0, dtype=np.float32)
    p2.grad = np.full(4, 4.0, dtype=np.float32)
    params = {"a": p1, "b": p2}
    norm = optim.clip_grad_norm(params, 5.0)
    assert norm == pytest.approx(np.sqrt(9 * 3 + 16 * 4))
    new_norm = np.sqrt(sum(float((p.grad**2).sum()) for p in params.values()))
    assert new_norm == pytest.approx(5.0, rel=1e-5)
