import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from geonode import lie
from geonode.errors import ContractViolation, InvalidAlgebraError, OutOfChartError
from geonode.lie import SE3, SE3xR6, SO3, ProductElement, Vec


def hat_se3(a):
    return SE3.hat(a)


def test_hat_so3_basis():
    np.testing.assert_array_equal(SO3.hat([1, 0, 0]), [[0, 0, 0], [0, 0, -1], [0, 1, 0]])
    np.testing.assert_array_equal(SO3.hat([0, 0, 0]), np.zeros((3, 3)))


def test_hat_se3_translation_entry():
    m = SE3.hat([0, 0, 0, 1, 0, 0])
    expect = np.zeros((4, 4))
    expect[0, 3] = 1
    np.testing.assert_array_equal(m, expect)


def test_hat_dimension_mismatch():
    with pytest.raises(ContractViolation):
        SO3.hat([1, 2])


def test_vee_inverse_and_errors():
    np.testing.assert_array_equal(SO3.vee(SO3.hat([1, 2, 3])), [1, 2, 3])
    np.testing.assert_array_equal(SO3.vee(np.zeros((3, 3))), np.zeros(3))
    with pytest.raises(InvalidAlgebraError):
        SO3.vee(np.eye(3))
    with pytest.raises(InvalidAlgebraError):
        SE3.vee(np.eye(4))


def test_ad_examples():
    np.testing.assert_array_equal(SO3.ad([0, 0, 1]), SO3.hat([0, 0, 1]))
    np.testing.assert_array_equal(Vec(6).ad(np.arange(6.0)), np.zeros((6, 6)))
    ad = SE3.ad([1, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(ad[3:, :3], SO3.hat([0, 1, 0]))


@pytest.mark.parametrize("G", [SO3, SE3, SE3xR6])
def test_ad_is_commutator_on_basis(G):
    E = np.eye(G.dim)
    for a in E:
        for b in E:
            lhs = G.ad(a) @ b
            ha, hb = G.hat(a), G.hat(b)
            np.testing.assert_allclose(lhs, G.vee(ha @ hb - hb @ ha), atol=0)


def test_exp_examples():
    R = SO3.exp([np.pi / 2, 0, 0])
    np.testing.assert_allclose(R, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)
    # truncated power series as the oracle
    w = np.array([np.pi / 2, 0, 0])
    A, term, S = SO3.hat(w), np.eye(3), np.eye(3)
    for k in range(1, 30):
        term = term @ A / k
        S = S + term
    np.testing.assert_allclose(R, S, atol=1e-14)
    H = SE3.exp([0, 0, 0, 1, 2, 3])
    np.testing.assert_array_equal(H.R, np.eye(3))
    np.testing.assert_array_equal(H.p, [1, 2, 3])
    np.testing.assert_array_equal(SO3.exp(np.zeros(3)), np.eye(3))


def test_exp_matches_expm(rng):
    for a in rng.normal(size=(20, 6)):
        np.testing.assert_allclose(SE3.as_matrix(SE3.exp(a)), expm(SE3.hat(a)), atol=1e-12)
    for a in rng.normal(size=(5, 12)):
        np.testing.assert_allclose(SE3xR6.as_matrix(SE3xR6.exp(a)), expm(SE3xR6.hat(a)), atol=1e-12)


def test_exp_small_angle_branch(rng):
    for scale in (1e-5, 1e-7, 0.0):
        a = scale * rng.normal(size=6) + np.r_[0, 0, 0, 1, -1, 0.5]
        np.testing.assert_allclose(SE3.as_matrix(SE3.exp(a)), expm(SE3.hat(a)), atol=1e-14)


def test_log_examples():
    np.testing.assert_array_equal(SO3.log(np.eye(3)), np.zeros(3))
    w = np.array([0.3, -0.2, 0.1])
    np.testing.assert_allclose(SO3.log(SO3.exp(w)), w, atol=1e-15)
    with pytest.raises(OutOfChartError):
        SO3.log(np.diag([1.0, -1.0, -1.0]))


@settings(max_examples=200, deadline=None)
@given(arrays(float, 6, elements=st.floats(-1.7, 1.7)))
def test_log_exp_roundtrip_se3(a):
    np.testing.assert_allclose(SE3.log(SE3.exp(a)), a, atol=1e-9)


def test_dexp_examples(rng):
    np.testing.assert_array_equal(SE3.dexp(np.zeros(6)), np.eye(6))
    np.testing.assert_array_equal(SO3.dexp(np.zeros(3)), np.eye(3))
    q = np.r_[0, 0, 0, 0.3, -1.0, 2.0]
    np.testing.assert_allclose(SE3.dexp(q), np.eye(6) - 0.5 * SE3.ad(q), atol=1e-15)
    q = rng.normal(size=3)
    q *= 0.5 / np.linalg.norm(q)
    np.testing.assert_allclose(SO3.dexp(q), _fd_dexp(SO3, q), atol=1e-6)


def _fd_dexp(G, q, eps=1e-6):
    # column i: vee(exp(q)^-1 d/de exp(q + e e_i))
    g0 = G.as_matrix(G.exp(q))
    cols = []
    for e in np.eye(G.dim):
        d = (G.as_matrix(G.exp(q + eps * e)) - G.as_matrix(G.exp(q - eps * e))) / (2 * eps)
        cols.append(G.vee(np.linalg.solve(g0, d), tol=1e-6))
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("G", [SO3, SE3, SE3xR6])
def test_dexp_defining_relation(G, rng):
    for _ in range(10):
        q = rng.normal(size=G.dim)
        q[:3] *= 2.0 / max(1.0, np.linalg.norm(q[:3]))
        np.testing.assert_allclose(G.dexp(q), _fd_dexp(G, q), atol=1e-5)


@pytest.mark.parametrize("G", [SO3, SE3])
def test_dexp_closed_form_matches_series(G, rng):
    for _ in range(10):
        q = 0.8 * rng.normal(size=G.dim)
        np.testing.assert_allclose(G.dexp(q), G.dexp_series(q, order=30), atol=1e-12)


@pytest.mark.parametrize("G", [SO3, SE3, SE3xR6])
def test_dexp_solve_inverts(G, rng):
    q = rng.normal(size=(50, G.dim))
    q[:, :3] *= 2.5 / np.linalg.norm(q[:, :3], axis=-1, keepdims=True)
    xi = rng.normal(size=(50, G.dim))
    x = G.dexp_solve(q, xi)
    np.testing.assert_allclose(np.einsum("bij,bj->bi", G.dexp(q), x), xi, atol=1e-10)


def test_compose_inverse(rng):
    g = SE3.exp(rng.normal(size=6))
    e = SE3.compose(g, SE3.inverse(g))
    np.testing.assert_allclose(SE3.as_matrix(e), np.eye(4), atol=1e-12)
    a = rng.normal(size=6)
    np.testing.assert_allclose(SE3.as_matrix(SE3.inverse(SE3.exp(a))),
                               SE3.as_matrix(SE3.exp(-a)), atol=1e-12)
    I = SE3.identity()
    np.testing.assert_allclose(SE3.as_matrix(SE3.compose(I, g)), SE3.as_matrix(g), atol=0)


def test_product_compose():
    g = ProductElement(SE3.exp([0.1, 0, 0, 1, 0, 0]), np.arange(6.0))
    h = ProductElement(SE3.exp([0, 0.2, 0, 0, 1, 0]), np.ones(6))
    gh = SE3xR6.compose(g, h)
    np.testing.assert_allclose(SE3.as_matrix(gh.pose),
                               SE3.as_matrix(g.pose) @ SE3.as_matrix(h.pose), atol=1e-15)
    np.testing.assert_array_equal(gh.mom, np.arange(6.0) + 1)


def test_compose_keeps_rotation_invariants(rng):
    R = np.eye(3)
    for w in 0.3 * rng.normal(size=(10000, 3)):
        R = SO3.compose(R, SO3.exp(w), reorthonormalize=False)
    # accumulation is measured here; re-orthonormalisation is off
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


def test_perturbation_jacobian(rng):
    J = SE3.perturbation_jacobian(SE3.identity())
    for i, e in enumerate(np.eye(6)):
        m = SE3.hat(e)
        np.testing.assert_array_equal(J[:, i], np.r_[m[:3, :3].ravel(), m[:3, 3]])
    H = SE3.exp(rng.normal(size=6))
    J = SE3.perturbation_jacobian(H)
    col = J[:, 2]
    np.testing.assert_allclose(col[:9], (H.R @ SO3.hat([0, 0, 1])).ravel(), atol=1e-15)
    np.testing.assert_array_equal(col[9:], 0)
    q = rng.normal(size=6)
    eps = 1e-6
    fd = (SE3.entries(SE3.compose(H, SE3.exp(eps * q))) - SE3.entries(SE3.compose(H, SE3.exp(-eps * q)))) / (2 * eps)
    np.testing.assert_allclose(J @ q, fd, atol=1e-8)


def test_intrinsic_gradient_examples(rng):
    H = SE3.exp(rng.normal(size=6))
    np.testing.assert_array_equal(lie.intrinsic_gradient(np.zeros(12), H), np.zeros(6))
    # f = Tr(H) at the identity
    g = lie.intrinsic_gradient(np.r_[np.eye(3).ravel(), np.zeros(3)], SE3.identity())
    np.testing.assert_array_equal(g, np.zeros(6))
    # f = |p|^2
    g = lie.intrinsic_gradient(lambda e: np.r_[np.zeros(9), 2 * e[9:]], H)
    np.testing.assert_allclose(g[:3], 0, atol=1e-15)
    np.testing.assert_allclose(g[3:], 2 * H.R.T @ H.p, atol=1e-14)


def test_intrinsic_gradient_matches_chart_gradient(rng):
    # V(H) = a^T vec(R) + b^T p;  d_g V = K(q)^-T dV/dq in every chart
    from geonode import atlas
    a, b = rng.normal(size=9), rng.normal(size=3)

    def V(H):
        return a @ H.R.ravel() + b @ H.p

    for _ in range(5):
        H = SE3.exp(rng.normal(size=6))
        g = lie.intrinsic_gradient(np.r_[a, b], H)
        for j in range(4):
            if atlas.partition(H, SE3)[j] < 0.05:
                continue
            q = atlas.to_chart(H, j, SE3)
            eps = 1e-6
            dq = np.array([(V(atlas.from_chart(q + eps * e, j, SE3))
                            - V(atlas.from_chart(q - eps * e, j, SE3))) / (2 * eps) for e in np.eye(6)])
            np.testing.assert_allclose(np.linalg.solve(SE3.dexp(q).T, dq), g, atol=1e-6)


def test_group_tags():
    assert lie.group("se3") is SE3
    assert lie.group("vec4") == Vec(4)
    with pytest.raises(ContractViolation):
        lie.group("so4")


def test_rotation_angle(rng):
    for th in (0.0, 1e-9, 0.5, np.pi - 1e-9, np.pi):
        assert abs(lie.rotation_angle(SO3.exp([0, th, 0])) - th) < 1e-12
    R = lie.random_rotation(rng, 100)
    assert all(lie.is_rotation(r) for r in R)
