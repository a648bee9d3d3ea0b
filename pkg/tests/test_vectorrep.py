"""Factorized vector features versus an explicit dense-grid oracle.

The oracle materializes the full HR grid by broadcasting the two 1-D
vectors and reads it with the same interpolation; the factorized path
must agree to near machine precision without ever building the grid.
"""

import numpy as np
import pytest

from vectorbev.errors import ContractError, ShapeError
from vectorbev.numerics import bilinear_sample, check_gradients, tensor
from vectorbev.vectorrep import (AXIS_X, AXIS_Y, SparseHrSet, VectorQueryPair,
                                 compose_sparse_hr, init_vector_queries,
                                 sample_pe, sample_vector)


def dense_oracle(vq, combine):
    """Materialize the [h_hr, w_hr, C] grid the pair factorizes."""
    vx = vq.vx.data[None, :, :]
    vy = vq.vy.data[:, None, :]
    return vx + vy if combine == "add" else vx * vy


@pytest.fixture
def vq():
    return init_vector_queries(w_hr=12, h_hr=9, C=6, seed=11)


class TestPairContracts:
    def test_combine_mode_checked(self):
        with pytest.raises(ContractError):
            init_vector_queries(8, 8, 4, seed=0, combine="concat")

    def test_channel_mismatch_rejected(self):
        a = init_vector_queries(8, 8, 4, seed=0)
        with pytest.raises(ShapeError):
            VectorQueryPair(vx=a.vx, vy=tensor(np.zeros((8, 5))),
                            pex=a.pex, pey=tensor(np.zeros((8, 5))))

    def test_init_is_seeded(self):
        a = init_vector_queries(8, 8, 4, seed=3)
        b = init_vector_queries(8, 8, 4, seed=3)
        assert np.array_equal(a.vx.data, b.vx.data)
        assert np.array_equal(a.pey.data, b.pey.data)


class TestSampleVector:
    def test_cell_centers_reproduce_rows(self, vq):
        x = np.arange(12) + 0.5
        out = sample_vector(vq.vx, x).data
        assert np.allclose(out, vq.vx.data, atol=1e-15)

    def test_midpoints_average_neighbours(self, vq):
        out = sample_vector(vq.vx, np.array([1.0])).data
        assert np.allclose(out[0], 0.5 * (vq.vx.data[0] + vq.vx.data[1]),
                           atol=1e-15)

    def test_differentiable_in_coordinates(self, vq):
        x = tensor(np.array([1.3, 4.6, 7.2]), requires_grad=True)
        w = tensor(np.random.default_rng(0).normal(size=(3, 6)))

        def f():
            return (sample_vector(vq.vx, x) * w).sum()
        rep = check_gradients(f, [("x", x), ("vx", vq.vx)])
        assert rep.max_rel_err < 1e-7


class TestFactorizationMatchesDenseOracle:
    def test_add_and_multiply_at_random_coords(self):
        for combine in ("add", "multiply"):
            for seed in range(10):
                rng = np.random.default_rng(seed)
                vq = init_vector_queries(w_hr=14, h_hr=10, C=5, seed=seed,
                                         combine=combine)
                dense = tensor(dense_oracle(vq, combine))
                coords = np.stack([rng.uniform(0.5, 13.5, 40),
                                   rng.uniform(0.5, 9.5, 40)], axis=1)
                got = compose_sparse_hr(vq, coords).feats.data
                want = bilinear_sample(dense, tensor(coords)).data
                tol = 1e-12 if combine == "add" else 1e-10
                assert np.abs(got - want).max() < tol, (combine, seed)

    def test_multiply_agrees_only_on_vector_lines(self):
        # Interpolating the dense product differs from the product of
        # interpolations off the lattice; on a lattice line the x sample is
        # exact, so the two coincide. This pins where the add/multiply
        # factorizations are interchangeable with a dense grid.
        vq = init_vector_queries(w_hr=8, h_hr=8, C=4, seed=2,
                                 combine="multiply")
        dense = tensor(dense_oracle(vq, "multiply"))
        on_line = np.array([[3.5, 2.75], [6.5, 1.2]])
        got = compose_sparse_hr(vq, on_line).feats.data
        want = bilinear_sample(dense, tensor(on_line)).data
        assert np.allclose(got, want, atol=1e-14)

    def test_gradients_via_coordinates(self):
        rng = np.random.default_rng(9)
        vq = init_vector_queries(w_hr=10, h_hr=8, C=4, seed=9)
        coords = tensor(np.stack([rng.uniform(0.6, 9.4, 12),
                                  rng.uniform(0.6, 7.4, 12)], axis=1),
                        requires_grad=True)
        w = tensor(rng.normal(size=(12, 4)))

        def f():
            return (compose_sparse_hr(vq, coords).feats * w).sum()
        rep = check_gradients(
            f, [("coords", coords), ("vx", vq.vx), ("vy", vq.vy)])
        assert rep.max_rel_err < 1e-7


class TestSparseSet:
    def test_owner_ordering_and_counts(self, vq):
        coords = np.array([[1.5, 0.5], [2.5, 0.5], [0.5, 3.5], [0.5, 4.5]])
        ax = np.array([AXIS_X, AXIS_X, AXIS_Y, AXIS_Y], dtype=np.uint8)
        ix = np.array([1, 2, 3, 4])
        s = compose_sparse_hr(vq, coords, ax, ix)
        assert s.n_x == 2
        sizes = s.group_sizes(vq.w_hr, vq.h_hr)
        assert sizes.sum() == 4
        assert sizes[1] == 1 and sizes[2] == 1
        assert sizes[12 + 3] == 1 and sizes[12 + 4] == 1

    def test_field_length_mismatch_rejected(self, vq):
        coords = np.zeros((3, 2))
        feats = compose_sparse_hr(vq, coords).feats
        with pytest.raises(ShapeError):
            SparseHrSet(coords, feats, np.zeros(2, dtype=np.uint8),
                        np.zeros(3, dtype=np.int64))

    def test_empty_set_allowed(self, vq):
        s = compose_sparse_hr(vq, np.zeros((0, 2)))
        assert s.feats.shape == (0, 6)
        assert s.n_x == 0


class TestPositionalEmbeddings:
    def test_sampled_at_component_coordinates(self, vq):
        coords = np.array([[2.5, 3.5], [7.5, 0.5]])
        pe_x, pe_y = sample_pe(vq, coords)
        assert np.allclose(pe_x.data[0], vq.pex.data[2], atol=1e-15)
        assert np.allclose(pe_y.data[0], vq.pey.data[3], atol=1e-15)
        assert np.allclose(pe_x.data[1], vq.pex.data[7], atol=1e-15)
