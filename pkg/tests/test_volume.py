import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masflow.volume import (
    VectorField,
    Volume,
    check_shape,
    div,
    divergence,
    grad,
    gradient,
    gradient_magnitude_sq,
)


def ramp(values, sx=1.0):
    return Volume(np.asarray(values, float).reshape(-1, 1, 1), (sx, 1.0, 1.0))


def test_constant_has_zero_gradient():
    g = gradient(Volume(np.full((4, 3, 2), 7.5)))
    assert np.array_equal(g.components, np.zeros((3, 4, 3, 2)))


@pytest.mark.parametrize("sx, expected", [(1.0, [1, 1, 0]), (2.0, [0.5, 0.5, 0])])
def test_ramp_gradient(sx, expected):
    g = gradient(ramp([0, 1, 2], sx))
    assert np.allclose(g.x.ravel(), expected)
    assert not g.y.any() and not g.z.any()


def test_divergence_of_zero_field():
    f = VectorField(np.zeros((3, 4, 3, 2)))
    assert not divergence(f).values.any()


def test_divergence_hand_stencil():
    comps = np.zeros((3, 3, 1, 1))
    comps[0, :, 0, 0] = [1, 1, 0]
    d = divergence(VectorField(comps))
    assert np.allclose(d.values.ravel(), [1, 0, -1])


def test_gradient_magnitude_sq_ramp_and_constant():
    assert np.allclose(gradient_magnitude_sq(ramp([0, 1, 2])).values.ravel(), [1, 1, 0])
    assert not gradient_magnitude_sq(Volume(np.ones((3, 3, 3)))).values.any()


def test_gradient_magnitude_sq_matches_components():
    rng = np.random.default_rng(3)
    v = Volume(rng.normal(size=(5, 4, 3)), (0.7, 1.3, 2.1))
    g = gradient(v).components
    assert np.allclose(gradient_magnitude_sq(v).values, (g**2).sum(axis=0))


def _inner_products(u, f, spacing):
    lhs = float(np.sum(grad(u, spacing) * f))
    rhs = float(np.sum(u * div(f, spacing)))
    scale = np.linalg.norm(grad(u, spacing)) * np.linalg.norm(f) + np.linalg.norm(u) * np.linalg.norm(div(f, spacing))
    return lhs, rhs, scale


def test_adjoint_on_small_random_grid():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(4, 3, 2))
    f = rng.normal(size=(3, 4, 3, 2))
    lhs, rhs, scale = _inner_products(u, f, (1.0, 1.0, 1.0))
    assert abs(lhs + rhs) < 1e-10 * scale


shapes = st.tuples(*[st.integers(1, 7)] * 3)
spacings = st.tuples(*[st.floats(0.2, 5.0)] * 3)


@settings(max_examples=60, deadline=None)
@given(shape=shapes, spacing=spacings, seed=st.integers(0, 2**32 - 1))
def test_adjointness_property(shape, spacing, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=shape)
    f = rng.normal(size=(3,) + shape)
    lhs, rhs, scale = _inner_products(u, f, spacing)
    assert abs(lhs + rhs) <= 1e-10 * max(scale, 1e-300)


@settings(max_examples=40, deadline=None)
@given(shape=shapes, a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1))
def test_gradient_linearity(shape, a, b, seed):
    rng = np.random.default_rng(seed)
    u, w = rng.normal(size=shape), rng.normal(size=shape)
    sp = (0.5, 1.5, 2.0)
    assert np.allclose(grad(a * u + b * w, sp), a * grad(u, sp) + b * grad(w, sp), atol=1e-12)


def test_spacing_covariance():
    rng = np.random.default_rng(1)
    u = rng.normal(size=(4, 5, 3))
    sp = np.array([0.8, 1.1, 2.5])
    assert np.allclose(grad(u, 2 * sp), 0.5 * grad(u, sp))


def test_batched_operators_match_single():
    rng = np.random.default_rng(2)
    stack = rng.normal(size=(2, 3, 4, 3, 2))
    sp = (1.0, 2.0, 0.5)
    g = grad(stack, sp)
    assert g.shape == (2, 3, 3, 4, 3, 2)
    assert np.allclose(g[1, 2], grad(stack[1, 2], sp))
    assert np.allclose(div(g, sp)[0, 1], div(g[0, 1], sp))


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        check_shape((2, 0, 1))
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.values[0, 0, 0] = 1.0
