import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from qgcn.errors import DegenerateFrame, ShapeMismatch
from qgcn.losses import (
    LossWeights,
    aad2d_loss,
    aad_loss,
    combine,
    maad_metric,
    mpjpe,
    p_mpjpe,
    projected_angles,
    root_error,
    similarity_align,
    wrap_angle,
)
from qgcn.numerics import Tensor, gradcheck
from qgcn.quatkin import IDENTITY, project_rotations_2d, quat_from_axis_angle, rotation_angles

from .conftest import random_unit_quats


def horn_align(X, Y):
    """Similarity alignment of X onto Y via Horn's unit-quaternion method."""
    mx, my = X.mean(0), Y.mean(0)
    A, B = X - mx, Y - my
    S = A.T @ B
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    N = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    w, v = np.linalg.eigh(N)
    q = v[:, -1]
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    rotated = A @ R.T
    s = np.sum(rotated * B) / np.sum(A * A)
    return s * rotated + my


def random_similarity(rng):
    R = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    return R, rng.uniform(0.3, 3.0), rng.normal(size=3)


# ---------------------------------------------------------------- MPJPE


def test_mpjpe_examples(rng):
    gt = rng.normal(size=(1, 17, 3))
    assert mpjpe(gt, gt).item() == 0.0
    pred = gt.copy()
    pred[0, 5] += [3.0, 4.0, 0.0]
    assert mpjpe(pred, gt).item() == pytest.approx(5.0 / 17.0, abs=1e-15)
    shift = rng.normal(size=3)
    assert mpjpe(pred + shift, gt + shift, root=0).item() == pytest.approx(mpjpe(pred, gt, root=0).item(), abs=1e-15)


def test_mpjpe_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        mpjpe(rng.normal(size=(2, 17, 3)), rng.normal(size=(2, 16, 3)))


def test_root_error(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert root_error(a, b).item() == pytest.approx(np.mean(np.sum((a - b) ** 2, -1)))


# ---------------------------------------------------------------- P-MPJPE


def test_p_mpjpe_absorbs_similarity(rng):
    gt = rng.normal(size=(5, 17, 3))
    for _ in range(5):
        R, s, t = random_similarity(rng)
        pred = s * gt @ R.T + t
        assert p_mpjpe(pred, gt) <= 1e-9


def test_p_mpjpe_invariance(rng):
    pred, gt = rng.normal(size=(4, 17, 3)), rng.normal(size=(4, 17, 3))
    base = p_mpjpe(pred, gt)
    R, s, t = random_similarity(rng)
    # transforming the prediction leaves the error unchanged
    assert abs(p_mpjpe(s * pred @ R.T + t, gt) - base) <= 1e-9
    # transforming the target scales the error with it
    assert abs(p_mpjpe(pred, gt @ R.T + t) - base) <= 1e-9
    assert abs(p_mpjpe(pred, s * gt) - s * base) <= 1e-9


def test_p_mpjpe_below_mpjpe(rng):
    for _ in range(20):
        pred, gt = rng.normal(size=(3, 17, 3)), rng.normal(size=(3, 17, 3))
        assert p_mpjpe(pred, gt) <= mpjpe(pred, gt).item() + 1e-12


def test_p_mpjpe_matches_horn_oracle(rng):
    gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.3, 0.1, 1.5]])
    R, s, t = random_similarity(rng)
    pred = s * gt @ R.T + t + rng.normal(scale=0.05, size=gt.shape)
    ours = similarity_align(pred, gt)
    oracle = horn_align(pred, gt)
    assert np.max(np.abs(ours - oracle)) <= 1e-9
    expected = np.mean(np.linalg.norm(oracle - gt, axis=-1))
    assert abs(p_mpjpe(pred, gt) - expected) <= 1e-9
    # and on larger random frames
    for _ in range(10):
        X, Y = rng.normal(size=(17, 3)), rng.normal(size=(17, 3))
        assert np.max(np.abs(similarity_align(X, Y) - horn_align(X, Y))) <= 1e-9


def test_p_mpjpe_no_reflection(rng):
    gt = rng.normal(size=(17, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned = similarity_align(mirrored, gt)
    # the best proper rotation cannot undo a reflection of a generic point set
    assert np.mean(np.linalg.norm(aligned - gt, axis=-1)) > 1e-3


def test_p_mpjpe_degenerate():
    with pytest.raises(DegenerateFrame):
        p_mpjpe(np.zeros((2, 17, 3)), np.ones((2, 17, 3)))


# ---------------------------------------------------------------- AAD


def test_aad_examples(rng):
    q = random_unit_quats(rng, (3, 16))
    assert aad_loss(q, q).item() == pytest.approx(0.0, abs=1e-5)
    assert aad_loss(-q, q).item() == pytest.approx(0.0, abs=1e-5)
    rz = quat_from_axis_angle([0.0, 0.0, 1.0], np.pi / 2)
    assert aad_loss(rz[None, None], IDENTITY[None, None]).item() == pytest.approx(np.pi / 2, abs=1e-12)
    assert maad_metric(rz[None, None], IDENTITY[None, None]) == pytest.approx(np.pi / 2, abs=1e-12)
    assert maad_metric(q, q) == pytest.approx(0.0, abs=1e-7)
    assert maad_metric(-q, q) == pytest.approx(0.0, abs=1e-7)


def test_aad_range_symmetry_identity(rng):
    a, b = random_unit_quats(rng, (200, 16)), random_unit_quats(rng, (200, 16))
    v = aad_loss(a, b).item()
    assert 0.0 <= v <= np.pi
    assert v == pytest.approx(aad_loss(b, a).item(), abs=1e-12)
    assert v > 0.1
    assert maad_metric(a, b) == pytest.approx(v, abs=1e-12)


def test_aad_renormalizes(rng):
    q = random_unit_quats(rng, (4, 16))
    assert aad_loss(q * 3.0, q).item() == pytest.approx(0.0, abs=1e-5)


def test_maad_bone_subset(rng):
    a, b = random_unit_quats(rng, (10, 16)), random_unit_quats(rng, (10, 16))
    sub = [0, 3, 7]
    assert maad_metric(a, b, bones=sub) == pytest.approx(maad_metric(a[:, sub], b[:, sub]))


def test_aad_gradcheck(rng):
    a = Tensor(random_unit_quats(rng, (3, 5)), requires_grad=True)
    b = random_unit_quats(rng, (3, 5))
    rep = gradcheck(lambda t: aad_loss(t, b), [a], tol=1e-4)
    assert rep.passed, rep.summary()


def test_aad_gradient_next_to_kink():
    # |<q, q_gt>| has a kink where the two are orthogonal; just beside it the
    # central difference needs a small step, and then agrees with the tape
    gt = np.array([[[1.0, 0.0, 0.0, 0.0]]])
    q = Tensor(np.array([[[3e-6, 0.6, 0.0, 0.8]]]), requires_grad=True)
    coarse = gradcheck(lambda t: aad_loss(t, gt), [q], tol=1e-4, step=1e-5)
    fine = gradcheck(lambda t: aad_loss(t, gt), [q], tol=1e-4, step=1e-8)
    assert not coarse.passed
    assert fine.passed, fine.summary()


# ---------------------------------------------------------------- 2D AAD


def test_aad2d_wrap_example():
    v = aad2d_loss(np.array([np.pi - 0.1]), np.array([-np.pi + 0.1])).item()
    assert v == pytest.approx(0.2, abs=1e-12)
    assert aad2d_loss(np.array([0.7]), np.array([0.7])).item() == 0.0


def test_aad2d_matches_loop(rng):
    pred = rng.uniform(-np.pi, np.pi, (6, 16))
    gt = rng.uniform(-np.pi, np.pi, (6, 16))
    total = 0.0
    for i in range(6):
        for j in range(16):
            d = abs(pred[i, j] - gt[i, j]) % (2 * np.pi)
            total += min(d, 2 * np.pi - d)
    assert aad2d_loss(pred, gt).item() == pytest.approx(total / 96, abs=1e-12)
    pairs = np.stack([np.cos(gt), np.sin(gt)], -1)
    assert aad2d_loss(pred, pairs).item() == pytest.approx(total / 96, abs=1e-12)


def test_aad2d_is_circle_metric(rng):
    a, b, c = (rng.uniform(-np.pi, np.pi, 5000) for _ in range(3))
    d = lambda x, y: np.abs(wrap_angle(x - y))  # noqa: E731
    assert np.allclose(d(a, b), d(b, a))
    assert np.all(d(a, c) <= d(a, b) + d(b, c) + 1e-12)
    assert np.all(d(a, b) <= np.pi)


def test_aad2d_gradcheck(rng):
    p = Tensor(rng.uniform(-3, 3, (4, 5)), requires_grad=True)
    gt = rng.uniform(-3, 3, (4, 5))
    rep = gradcheck(lambda t: aad2d_loss(t, gt), [p], tol=1e-4)
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------- projected angles


def test_projected_angles_match_numpy(h36m, rng):
    q = random_unit_quats(rng, (5, h36m.n_bones))
    got = projected_angles(q, h36m).data
    want = rotation_angles(project_rotations_2d(q, h36m))
    assert np.max(np.abs(wrap_angle(got - want))) <= 1e-12


def test_projected_angles_gradcheck(h36m, rng):
    q = Tensor(random_unit_quats(rng, (2, h36m.n_bones)), requires_grad=True)
    target = rng.uniform(-3, 3, (2, h36m.n_bones))
    rep = gradcheck(lambda t: aad2d_loss(projected_angles(t, h36m), target), [q], tol=1e-4)
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------- bundles


def test_combine_weighted_total(rng):
    w = LossWeights(pose=0.5, aad=2.0, aad2d=0.25)
    parts = {k: Tensor(np.array(v)) for k, v in
             {"mpjpe": 0.3, "root": 0.1, "aad": 0.7, "aad2d": 1.1, "mpjpe_unlabeled": 0.2}.items()}
    b = combine(w, **parts)
    expected = 0.5 * (0.3 + 0.1 + 0.2) + 2.0 * 0.7 + 0.25 * 1.1
    assert abs(b.weighted_total - expected) <= 1e-12
    assert abs(b.recompute_total() - b.weighted_total) <= 1e-12
    assert b.total.item() == pytest.approx(expected, abs=1e-12)
    assert set(b.as_record()) == {"mpjpe", "root", "aad", "aad2d", "mpjpe_unlabeled", "weighted_total"}


def test_zero_aad_weight_matches_pose_only(rng):
    parts = {"mpjpe": Tensor(np.array(0.3)), "root": Tensor(np.array(0.1)), "aad": Tensor(np.array(0.9))}
    with_zero = combine(LossWeights(aad=0.0), **parts)
    pose_only = combine(LossWeights(), mpjpe=parts["mpjpe"], root=parts["root"])
    assert with_zero.weighted_total == pose_only.weighted_total


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_wrap_angle_range(a, b):
    d = float(np.abs(wrap_angle(a - b)))
    assert 0.0 <= d <= np.pi + 1e-12
    assert abs(np.cos(a - b) - np.cos(d)) <= 1e-9
