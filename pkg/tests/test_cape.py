import math

import numpy as np
import pytest
import torch

from oracles import compute_4dof_cape, compute_6dof_cape
from mvcape.cape import (
    CapeConfig,
    Mode,
    RadiusVariant,
    Role,
    angles_4dof,
    apply_blocks,
    apply_cape,
    apply_cape_4dof,
    apply_cape_6dof,
    apply_block,
    batch_blocks,
    cape_matrix,
    cape_pair_logit,
    psi_from_angles,
)
from mvcape.pose import Pose4, Pose6, RadiusBounds, compose_6dof, inverse_6dof, spherical_to_se3

from conftest import random_pose4, random_pose6

CFG4 = CapeConfig(Mode.FOUR_DOF, RadiusBounds(1.5, 4.0))
CFG6 = CapeConfig(Mode.SIX_DOF)
N_DRAWS = 1000


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def rotate_angles(v, angles):
    return apply_block(v, psi_from_angles(angles))


class TestFourDoF:
    def test_zero_pose_is_identity(self, rng):
        v = rng.normal(size=32)
        out = apply_cape_4dof(v, Pose4(0, 0, 0, CFG4.bounds.r_min), CFG4)
        np.testing.assert_array_equal(out, v)

    def test_norm_preserved(self, rng):
        for _ in range(200):
            v = rng.normal(size=64)
            out = apply_cape_4dof(v, random_pose4(rng), CFG4)
            assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-12

    def test_norm_preserved_float32(self, rng):
        for _ in range(50):
            v = rng.normal(size=64).astype(np.float32)
            psi = torch.as_tensor(batch_blocks([random_pose4(rng)], CFG4)[Role.KEY], dtype=torch.float32)
            out = apply_blocks(torch.as_tensor(v)[None, None], psi[0])[0, 0]
            assert abs(out.norm().item() - np.linalg.norm(v)) / np.linalg.norm(v) < 1e-6

    def test_basis_vector_against_oracle(self):
        e1 = np.zeros(8)
        e1[0] = 1.0
        pose = Pose4(math.pi / 2, 0.0, 0.0, CFG4.bounds.r_min)
        got = apply_cape_4dof(e1, pose, CFG4)
        # oracle radius angle s*log(1) = 0 matches f(r_min) = 0
        want = compute_4dof_cape(e1.copy(), [math.pi / 2, 0.0, 0.0, 1.0], 0.001)
        assert got.tobytes() == want.tobytes()
        # row convention: block acts as rotation by -alpha on (x0, x1)
        np.testing.assert_allclose(got, [0, -1, 0, 0, 0, 0, 0, 0], atol=1e-15)

    @pytest.mark.parametrize("d", [4, 12, 0])
    def test_rejects_bad_dimension(self, d):
        with pytest.raises(ValueError):
            apply_cape_4dof(np.ones(d), Pose4(0, 0, 0, 2), CFG4)

    def test_angle_relative_invariance(self, rng):
        """<pi(v1, th1), pi(v2, th2)> == <pi(v1, th1 - th2), pi(v2, 0)> per component."""
        worst = 0.0
        for _ in range(N_DRAWS):
            v1, v2 = rng.normal(size=(2, 32))
            th1, th2 = rng.uniform(-2 * math.pi, 2 * math.pi, (2, 4))
            lhs = rotate_angles(v1, th1) @ rotate_angles(v2, th2)
            rhs = rotate_angles(v1, th1 - th2) @ rotate_angles(v2, np.zeros(4))
            worst = max(worst, rel_err(lhs, rhs))
        assert worst < 1e-9

    def test_radius_relative_invariance(self, rng):
        """Difference form of the radius condition: the anchor is r_min (angle 0)."""
        worst = 0.0
        rmin = CFG4.bounds.r_min
        for _ in range(N_DRAWS):
            v1, v2 = rng.normal(size=(2, 16))
            a, b, g = rng.uniform(0, 2 * math.pi, 3)
            r1, r2 = np.exp(rng.uniform(-1, 2.5, 2))
            lhs = apply_cape_4dof(v1, Pose4(a, b, g, r1), CFG4) @ apply_cape_4dof(v2, Pose4(a, b, g, r2), CFG4)
            rhs = apply_cape_4dof(v1, Pose4(a, b, g, rmin * r1 / r2), CFG4) @ apply_cape_4dof(
                v2, Pose4(a, b, g, rmin), CFG4
            )
            worst = max(worst, rel_err(lhs, rhs))
        assert worst < 1e-9

    def test_literal_unit_anchor_when_r_min_is_one(self, rng):
        cfg = CapeConfig(Mode.FOUR_DOF, RadiusBounds(1.0, 5.0))
        v1, v2 = rng.normal(size=(2, 8))
        lhs = apply_cape_4dof(v1, Pose4(0, 0, 0, 3.0), cfg) @ apply_cape_4dof(v2, Pose4(0, 0, 0, 2.0), cfg)
        rhs = apply_cape_4dof(v1, Pose4(0, 0, 0, 1.5), cfg) @ apply_cape_4dof(v2, Pose4(0, 0, 0, 1.0), cfg)
        assert rel_err(lhs, rhs) < 1e-12

    def test_logit_invariant_to_common_shift_and_scale(self, rng):
        for _ in range(200):
            q, k = rng.normal(size=(2, 16))
            p1, p2 = random_pose4(rng), random_pose4(rng)
            delta, scale = rng.uniform(-10, 10), math.exp(rng.uniform(-2, 2))
            # shift only azimuth/roll: colatitude is stored mod pi, the encoding has period 2 pi
            s1 = Pose4(p1.azimuth + delta, p1.elevation, p1.roll + delta, p1.radius * scale)
            s2 = Pose4(p2.azimuth + delta, p2.elevation, p2.roll + delta, p2.radius * scale)
            a = cape_pair_logit(q, k, p1, p2, CFG4)
            b = cape_pair_logit(q, k, s1, s2, CFG4)
            assert rel_err(a, b) < 1e-9

    def test_jacobian_matches_finite_differences(self, rng):
        pose, d, h = random_pose4(rng), 16, 1e-6
        J = cape_matrix(pose, CFG4, d)
        v = rng.normal(size=d)
        fd = np.stack(
            [(apply_cape_4dof(v + h * e, pose, CFG4) - apply_cape_4dof(v - h * e, pose, CFG4)) / (2 * h) for e in np.eye(d)],
            axis=1,
        )
        assert np.max(np.abs(fd - J)) / np.max(np.abs(J)) < 1e-6
        np.testing.assert_allclose(J @ v, apply_cape_4dof(v, pose, CFG4), atol=1e-12)
        np.testing.assert_allclose(J.T @ J, np.eye(d), atol=1e-12)


class TestSixDoF:
    @pytest.mark.parametrize("role", list(Role))
    def test_identity_pose(self, rng, role):
        v = rng.normal(size=16)
        np.testing.assert_array_equal(apply_cape_6dof(v, Pose6.identity(), role, CFG6), v)

    def test_pure_rotation_preserves_norm(self, rng):
        for _ in range(100):
            v = rng.normal(size=16)
            p = Pose6(random_pose6(rng).rotation, np.zeros(3))
            out = apply_cape_6dof(v, p, Role.KEY, CFG6)
            assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-12

    def test_translation_breaks_norm(self, rng):
        v = np.ones(4)
        p = Pose6(np.eye(3), [100.0, 0.0, 0.0])
        assert abs(np.linalg.norm(apply_cape_6dof(v, p, Role.KEY, CFG6)) - 2.0) > 1e-3

    def test_rejects_bad_dimension(self):
        with pytest.raises(ValueError):
            apply_cape_6dof(np.ones(6), Pose6.identity(), Role.KEY, CFG6)

    def test_relative_pose_identity(self, rng):
        """<cape(v1, P1, key), cape(v2, P2, query)> == <cape(v1, P1 P2^-1, key), v2>."""
        worst = 0.0
        for _ in range(N_DRAWS):
            v1, v2 = rng.normal(size=(2, 16))
            p1, p2 = random_pose6(rng), random_pose6(rng)
            lhs = apply_cape_6dof(v1, p1, Role.KEY, CFG6) @ apply_cape_6dof(v2, p2, Role.QUERY, CFG6)
            rel = compose_6dof(p1, inverse_6dof(p2))
            rhs = apply_cape_6dof(v1, rel, Role.KEY, CFG6) @ v2
            worst = max(worst, rel_err(lhs, rhs))
        assert worst < 1e-9

    def test_column_form_chain(self, rng):
        """The block-diagonal derivation written with column vectors and dense matrices:
        (phi(P2^-1 P1) v1)^T v2 == (phi(P1) v1)^T (phi(P2^-T) v2)."""
        d = 12
        worst = 0.0
        for _ in range(N_DRAWS):
            v1, v2 = rng.normal(size=(2, d))
            m1 = random_pose6(rng).matrix
            m2 = random_pose6(rng).matrix
            for m in (m1, m2):
                m[:3, 3] *= CFG6.s

            def phi(m):
                return np.kron(np.eye(d // 4), m)

            lhs = (phi(np.linalg.inv(m2) @ m1) @ v1) @ v2
            mid = (v1 @ phi(m1.T @ np.linalg.inv(m2).T)) @ v2
            rhs = (phi(m1) @ v1) @ (phi(np.linalg.inv(m2).T) @ v2)
            worst = max(worst, rel_err(lhs, mid), rel_err(lhs, rhs))
        assert worst < 1e-9

    def test_logit_invariant_to_world_frame_change(self, rng):
        for _ in range(200):
            q, k = rng.normal(size=(2, 16))
            p1, p2, g = random_pose6(rng), random_pose6(rng), random_pose6(rng)
            a = cape_pair_logit(q, k, p1, p2, CFG6)
            b = cape_pair_logit(q, k, compose_6dof(p1, g), compose_6dof(p2, g), CFG6)
            assert rel_err(a, b) < 1e-9

    def test_left_multiplication_is_not_invariant(self, rng):
        # documents the operand order fixed by the row convention
        q, k = rng.normal(size=(2, 16))
        p1, p2, g = random_pose6(rng), random_pose6(rng), random_pose6(rng)
        a = cape_pair_logit(q, k, p1, p2, CFG6)
        b = cape_pair_logit(q, k, compose_6dof(g, p1), compose_6dof(g, p2), CFG6)
        assert rel_err(a, b) > 1e-6

    def test_composition_homomorphism(self, rng):
        for _ in range(200):
            v = rng.normal(size=16)
            p1, p2 = random_pose6(rng), random_pose6(rng)
            twice = apply_cape_6dof(apply_cape_6dof(v, p2, Role.KEY, CFG6), p1, Role.KEY, CFG6)
            once = apply_cape_6dof(v, compose_6dof(p2, p1), Role.KEY, CFG6)
            np.testing.assert_allclose(twice, once, rtol=1e-9, atol=1e-9)

    def test_jacobian_matches_finite_differences(self, rng):
        pose, d, h = random_pose6(rng), 16, 1e-6
        for role in Role:
            J = cape_matrix(pose, CFG6, d, role)
            v = rng.normal(size=d)
            fd = np.stack(
                [
                    (apply_cape_6dof(v + h * e, pose, role, CFG6) - apply_cape_6dof(v - h * e, pose, role, CFG6)) / (2 * h)
                    for e in np.eye(d)
                ],
                axis=1,
            )
            assert np.max(np.abs(fd - J)) / np.max(np.abs(J)) < 1e-6


class TestPairLogit:
    def test_same_pose_gives_plain_dot(self, rng):
        for cfg, make in ((CFG4, random_pose4), (CFG6, random_pose6)):
            for _ in range(50):
                q, k = rng.normal(size=(2, 16))
                p = make(rng)
                assert rel_err(cape_pair_logit(q, k, p, p, cfg), q @ k) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cape_pair_logit(np.ones(8), np.ones(16), Pose4(0, 0, 0, 2), Pose4(0, 0, 0, 2), CFG4)

    def test_wrong_pose_type(self):
        with pytest.raises(TypeError):
            apply_cape(np.ones(8), Pose6.identity(), CFG4)


class TestNumpyOracle:
    def test_4dof_bit_for_bit(self, rng):
        cfg = CapeConfig(Mode.FOUR_DOF, radius_variant=RadiusVariant.LOG_SCALED, s=0.001)
        for _ in range(100):
            v = rng.normal(size=8 * int(rng.integers(1, 9)))
            p = random_pose4(rng)
            want = compute_4dof_cape(v.copy(), [p.azimuth, p.elevation, p.roll, p.radius], cfg.s)
            assert apply_cape(v, p, cfg).tobytes() == want.tobytes()

    def test_6dof_bit_for_bit(self, rng):
        for _ in range(100):
            v = rng.normal(size=4 * int(rng.integers(1, 17)))
            p = random_pose6(rng)
            for role, key in ((Role.KEY, True), (Role.QUERY, False)):
                want = compute_6dof_cape(v.copy(), p.matrix, s=CFG6.s, key=key)
                assert apply_cape_6dof(v, p, role, CFG6).tobytes() == want.tobytes()

    def test_normalized_variant_differs_from_log_scaled(self):
        p = Pose4(0, 0, 0, 3.0)
        a = angles_4dof(p, CFG4)[3]
        b = angles_4dof(p, CapeConfig(radius_variant="log_scaled"))[3]
        assert a != b


class TestBatchedPath:
    def test_torch_blocks_match_numpy(self, rng):
        for cfg, make in ((CFG4, random_pose4), (CFG6, random_pose6)):
            poses = [make(rng) for _ in range(5)]
            blocks = batch_blocks(poses, cfg)
            x = torch.as_tensor(rng.normal(size=(5, 3, 16)))
            for role in Role:
                out = apply_blocks(x, blocks[role])
                for i, p in enumerate(poses):
                    for j in range(3):
                        want = apply_cape(x[i, j].numpy(), p, cfg, role)
                        np.testing.assert_allclose(out[i, j].numpy(), want, rtol=1e-12, atol=1e-12)

    def test_spherical_poses_6dof_relative(self, rng):
        # CaPE on extrinsics derived from spherical cameras
        q, k = rng.normal(size=(2, 8))
        p1 = spherical_to_se3(random_pose4(rng))
        p2 = spherical_to_se3(random_pose4(rng))
        g = random_pose6(rng)
        a = cape_pair_logit(q, k, p1, p2, CFG6)
        b = cape_pair_logit(q, k, compose_6dof(p1, g), compose_6dof(p2, g), CFG6)
        assert rel_err(a, b) < 1e-9
