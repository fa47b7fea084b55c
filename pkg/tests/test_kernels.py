import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimic import _kernels_py, kernels

compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")


def splat_case(seed, n=300, size=12):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-3, size + 3, n)
    v = rng.uniform(-3, size + 3, n)
    z = rng.choice([1.0, 2.0, 2.5, 7.0], n)  # many depth ties
    rgb = rng.choice([0.0, 0.25, 0.5, 1.0], size=(n, 3))
    return u, v, z, rgb, size


def brute_splat(u, v, z, rgb, w, h, px):
    """Per pixel, the smallest (tier, z, r, g, b) over every splat square covering it.

    Tier 0 is the pixel containing the projection; even-sized squares extend
    toward the side of that pixel the projection falls on.
    """
    best = {}
    for i in range(len(u)):
        nu, nv = math.floor(u[i] + 0.5), math.floor(v[i] + 0.5)
        u0 = nu - (px - 1) // 2 - (1 if px % 2 == 0 and u[i] < nu else 0)
        v0 = nv - (px - 1) // 2 - (1 if px % 2 == 0 and v[i] < nv else 0)
        for y in range(v0, v0 + px):
            for x in range(u0, u0 + px):
                if 0 <= x < w and 0 <= y < h:
                    key = (0 if (x, y) == (nu, nv) else 1, z[i], *rgb[i])
                    if (y, x) not in best or key < best[(y, x)]:
                        best[(y, x)] = key
    return best


@pytest.mark.parametrize("impl", ["python", pytest.param("compiled", marks=compiled)])
@pytest.mark.parametrize("px", [1, 2, 3, 4])
def test_splat_matches_brute_force(impl, px):
    fn = _kernels_py.splat_zbuffer if impl == "python" else kernels.splat_zbuffer
    u, v, z, rgb, size = splat_case(px)
    img, cov = fn(u, v, z, rgb, size, size, px)
    best = brute_splat(u, v, z, rgb, size, size, px)
    assert set(map(tuple, np.argwhere(cov))) == set(best)
    for (y, x), key in best.items():
        assert img[y, x].tolist() == list(key[2:])
    assert np.all(img[~cov] == 0.0)


@compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_splat_backends_bitwise_equal(seed, px):
    u, v, z, rgb, size = splat_case(seed)
    a = _kernels_py.splat_zbuffer(u, v, z, rgb, size, size, px)
    b = kernels.splat_zbuffer(u, v, z, rgb, size, size, px)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 5))
def test_kmeans_assign_backends_bitwise_equal(seed, K, D):
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 4, size=(50, D)).astype(float)  # integer grid: plenty of distance ties
    c = rng.integers(-3, 4, size=(K, D)).astype(float)
    la, da = _kernels_py.kmeans_assign(x, c)
    lb, db = kernels.kmeans_assign(x, c)
    assert np.array_equal(la, lb) and np.array_equal(da, db)


@pytest.mark.parametrize("impl", ["python", pytest.param("compiled", marks=compiled)])
def test_kmeans_assign_ties_go_to_lowest_index(impl):
    fn = _kernels_py.kmeans_assign if impl == "python" else kernels.kmeans_assign
    labels, d2 = fn(np.array([[0.0], [1.0]]), np.array([[-1.0], [1.0], [-1.0]]))
    assert labels.tolist() == [0, 1]
    assert d2.tolist() == [1.0, 0.0]


@compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_polyline_distance_backends_bitwise_equal(seed, n):
    rng = np.random.default_rng(seed)
    poly = rng.normal(size=(n, 2))
    if n > 2:
        poly[1] = poly[0]  # a zero-length segment
    pts = rng.normal(scale=2.0, size=(30, 2))
    assert np.array_equal(_kernels_py.polyline_distance(poly, pts), kernels.polyline_distance(poly, pts))


def test_polyline_distance_examples():
    poly = np.array([[0.0, 0.0], [2.0, 0.0]])
    d = _kernels_py.polyline_distance(poly, np.array([[1.0, 1.0], [3.0, 0.0], [-1.0, -1.0]]))
    assert np.allclose(d, [1.0, 1.0, np.sqrt(2.0)])
    assert np.allclose(_kernels_py.polyline_distance(poly[:1], np.array([[3.0, 4.0]])), [5.0])


def test_pure_python_switch():
    code = "import mimic.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, MIMIC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    if kernels.compiled_available():
        env.pop("MIMIC_PURE_PYTHON")
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "compiled"
