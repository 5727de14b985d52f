import math

import numpy as np
import pytest
import scipy.sparse as sp

from cpxg.objectives import (
    DistributedProblem,
    SmoothComponent,
    dump_sparse_dataset,
    format_metadata,
    global_objective,
    load_sparse_dataset,
    parse_sparse_lines,
    synth_problem,
    top_eigenvalue_gram,
)
from cpxg.prox import ProxSpec

from oracles import finite_difference_grad, logistic_value


def test_logistic_gradient_example():
    c = SmoothComponent("logistic", np.array([[1.0, 0.0]]), np.array([1.0]))
    np.testing.assert_allclose(c.gradient([0.0, 0.0]), [-0.5, 0.0], atol=1e-15)
    assert c.value([0.0, 0.0]) == pytest.approx(math.log(2), rel=1e-15)


def test_least_squares_gradient_identity():
    c = SmoothComponent("least_squares", np.eye(3), np.zeros(3))
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(c.gradient(x), x)
    assert c.value(x) == pytest.approx(0.5 * x @ x)


def test_logistic_no_overflow_at_large_margin():
    c = SmoothComponent("logistic", np.array([[40.0], [-40.0]]), np.array([-1.0, 1.0]))
    for x in ([1.0], [-1.0], [100.0]):
        v, g = c.value(x), c.gradient(x)
        assert np.isfinite(v) and np.all(np.isfinite(g))
    assert c.value([1.0]) == pytest.approx(40.0, rel=1e-12)


def test_lipschitz_examples():
    c = SmoothComponent("logistic", np.array([[2.0, 0.0]]), np.array([1.0]))
    assert c.lipschitz_constant() == pytest.approx(1.0, rel=1e-12)
    assert SmoothComponent("least_squares", np.eye(4), np.ones(4)).lipschitz_constant() == pytest.approx(1.0)
    assert SmoothComponent("logistic", np.zeros((3, 2)), np.ones(3)).lipschitz_constant() == 0.0


def test_all_zero_problem_rejected():
    with pytest.raises(ValueError, match="zero"):
        DistributedProblem([SmoothComponent("logistic", np.zeros((3, 2)), np.ones(3))], ProxSpec.zero())


def test_gradient_bound_examples():
    c = SmoothComponent("logistic", np.array([[3.0, 4.0], [0.0, 0.0]]), np.array([1.0, -1.0]))
    assert c.gradient_bound() == pytest.approx(2.5)
    ls = SmoothComponent("least_squares", np.eye(2), np.zeros(2))
    assert ls.gradient_bound(10.0) == pytest.approx(10.0)
    with pytest.raises(ValueError, match="radius"):
        ls.gradient_bound()
    p = DistributedProblem([ls], ProxSpec.zero())
    assert p.G_g == pytest.approx(10.0) and not p.G_g_global


def test_global_objective_example():
    p = DistributedProblem([SmoothComponent("least_squares", np.eye(2), np.zeros(2))], ProxSpec.l1(1.0))
    assert global_objective(p, [1.0, 0.0]) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        global_objective(p, [1.0, 0.0, 0.0])


def test_component_validation():
    with pytest.raises(ValueError, match="unknown"):
        SmoothComponent("hinge", np.eye(2), np.ones(2))
    with pytest.raises(ValueError, match="targets"):
        SmoothComponent("logistic", np.eye(2), np.ones(3))
    with pytest.raises(ValueError, match="-1 or \\+1"):
        SmoothComponent("logistic", np.eye(2), np.array([1.0, 0.0]))
    c = SmoothComponent("logistic", np.eye(2), np.ones(2))
    with pytest.raises(ValueError, match="dimension"):
        c.gradient([1.0])


@pytest.mark.parametrize("kind", ["logistic", "least_squares"])
def test_gradient_matches_finite_differences(kind):
    p = synth_problem(3, 6, 8, kind, lam=0.1, seed=5)
    rng = np.random.default_rng(0)
    for c in p.components:
        x = rng.normal(size=6)
        np.testing.assert_allclose(c.gradient(x), finite_difference_grad(c.value, x), rtol=1e-6, atol=1e-7)
    x = rng.normal(size=6)
    np.testing.assert_allclose(p.smooth_gradient(x), finite_difference_grad(p.smooth_value, x), rtol=1e-6, atol=1e-7)


def test_logistic_value_matches_oracle():
    p = synth_problem(2, 5, 7, "logistic", seed=1)
    x = np.random.default_rng(3).normal(size=5)
    for c in p.components:
        assert c.value(x) == pytest.approx(logistic_value(c.A, c.b, x), rel=1e-13)


@pytest.mark.parametrize("kind", ["logistic", "least_squares"])
def test_lipschitz_certificate_and_convexity(kind):
    p = synth_problem(4, 8, 12, kind, lam=0.05, seed=2)
    rng = np.random.default_rng(1)
    for i, c in enumerate(p.components):
        for _ in range(30):
            x, y = rng.normal(size=8) * 3, rng.normal(size=8) * 3
            gx, gy = c.gradient(x), c.gradient(y)
            assert np.linalg.norm(gx - gy) <= p.lipschitz[i] * np.linalg.norm(x - y) * (1 + 1e-9)
            # first-order convexity
            assert c.value(y) >= c.value(x) + gx @ (y - x) - 1e-12


def test_top_eigenvalue_matches_dense():
    A = np.random.default_rng(0).normal(size=(30, 12))
    assert top_eigenvalue_gram(A) == pytest.approx(np.linalg.eigvalsh(A.T @ A)[-1], rel=1e-9)
    assert top_eigenvalue_gram(sp.csr_matrix(A)) == pytest.approx(np.linalg.eigvalsh(A.T @ A)[-1], rel=1e-9)


def test_synth_problem_deterministic():
    a = synth_problem(5, 10, 7, seed=42)
    b = synth_problem(5, 10, 7, seed=42)
    for ca, cb in zip(a.components, b.components):
        np.testing.assert_array_equal(ca.A, cb.A)
        np.testing.assert_array_equal(ca.b, cb.b)
    c = synth_problem(5, 10, 7, seed=43)
    assert not np.array_equal(a.components[0].A, c.components[0].A)
    assert a.m == 5 and a.d == 10 and a.kind == "logistic" and a.G_g_global


def test_synth_zero_lambda_gives_zero_regulariser():
    p = synth_problem(2, 3, 4, lam=0.0, seed=0)
    assert p.h.kind == "zero" and p.G_h == 0.0


def test_synth_rejects_bad_sizes():
    with pytest.raises(ValueError):
        synth_problem(0, 3, 4)
    with pytest.raises(ValueError):
        synth_problem(2, 3, 4, kind="hinge")


def test_parse_sparse_lines():
    rows, cols, vals, labels, d = parse_sparse_lines(["+1 1:0.5 3:2", "# comment", "", "-1 2:1.5"])
    assert labels == [1.0, -1.0] and d == 3
    assert rows == [0, 0, 1] and cols == [0, 2, 1] and vals == [0.5, 2.0, 1.5]


@pytest.mark.parametrize("line,msg", [
    ("+1 0:1.0", "1-based"),
    ("+1 2", "index:value"),
    ("+1 a:1", "malformed"),
    ("x 1:1", "bad label"),
    ("+1 1:nan", "non-finite"),
])
def test_parse_errors_name_the_line(line, msg):
    with pytest.raises(ValueError, match=f"f.txt:2: .*{msg}"):
        parse_sparse_lines(["+1 1:1", line], source="f.txt")


def test_dataset_split_near_equal(tmp_path):
    path = tmp_path / "data.txt"
    lines = [f"{'+1' if i % 2 else '-1'} {1 + i % 4}:{i + 1}" for i in range(11)]
    path.write_text("\n".join(lines) + "\n")
    p = load_sparse_dataset(path, 3, lam=0.1)
    sizes = [c.n_samples for c in p.components]
    assert sizes == [4, 4, 3] and p.d == 4
    assert sp.issparse(p.components[0].A)
    with pytest.raises(ValueError, match="cannot be split"):
        load_sparse_dataset(path, 12, lam=0.1)


def test_dataset_roundtrip(tmp_path):
    p = synth_problem(3, 6, 5, seed=9)
    path = tmp_path / "d.txt"
    path.write_text(dump_sparse_dataset(p))
    q = load_sparse_dataset(path, 3, lam=p.lam, n_features=6)
    for a, b in zip(p.components, q.components):
        np.testing.assert_array_equal(a.A, b.A.toarray())
        np.testing.assert_array_equal(a.b, b.b)
    x = np.random.default_rng(0).normal(size=6)
    assert q.objective(x) == pytest.approx(p.objective(x), rel=1e-14)


def test_normalize_scales_columns(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("+1 1:4 2:-2\n-1 1:2 2:1\n")
    p = load_sparse_dataset(path, 1, lam=0.0, normalize=True)
    np.testing.assert_allclose(p.components[0].A.toarray(), [[1.0, -1.0], [0.5, 0.5]])


def test_metadata_block():
    p = synth_problem(2, 3, 4, seed=1)
    text = format_metadata(p.metadata())
    keys = [line.split("=")[0] for line in text.splitlines()]
    assert keys[:4] == ["m", "d", "kind", "lambda"]
    assert "L=" + format(p.L, ".17g") in text
