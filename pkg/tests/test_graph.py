import numpy as np
import pytest
from numpy.testing import assert_allclose

from rrrlearn import graph as G


class TestBuildLayered:
    def test_majority_architecture_edge_count(self):
        g = G.build_layered([13, 26, 26, 2])
        assert g.n_edges == 13 * 26 + 26 * 26 + 26 * 2 == 1066
        assert g.n_nodes == 13 + 26 + 26 + 2
        assert g.roles == ("data", "hidden", "hidden", "class")
        g.validate()

    def test_smallest_graph(self):
        g = G.build_layered([1, 1])
        assert g.n_edges == 1
        assert g.outdeg[0] == 1
        assert [tuple(e) for e in g.edges] == [(0, 1)]

    def test_cyclic_autoencoder_graph(self):
        g = G.build_layered([784, 200, 10, 200, 784],
                            roles=["data", "hidden", "code", "hidden"],
                            cyclic=True)
        assert g.n_nodes == 784 + 200 + 10 + 200
        assert g.n_edges == 784 * 200 + 200 * 10 + 10 * 200 + 200 * 784
        assert g.layer_of_role(G.ROLE_CODE) == 2
        assert len(g.node_ids(2)) == 10
        # wrap block feeds back into the data layer
        assert g.block_dst(g.n_blocks - 1) == 0
        g.validate()

    def test_empty_widths_rejected(self):
        with pytest.raises(ValueError):
            G.build_layered([])

    def test_cyclic_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            G.build_layered([4, 3, 5], roles=["data", "hidden"], cyclic=True)

    def test_outdeg_matches_edges(self):
        g = G.build_layered([3, 4, 2])
        counts = np.zeros(g.n_nodes, dtype=int)
        for i, _ in g.edges:
            counts[i] += 1
        assert np.array_equal(g.outdeg, counts)


class TestHyperParams:
    def test_defaults_valid(self):
        hp = G.HyperParams()
        assert hp.beta == 1.0 and hp.gamma == 1.0

    @pytest.mark.parametrize("kw", [
        {"beta": 0.0}, {"beta": 2.0}, {"gamma": 0.0}, {"omega": 0.0},
        {"delta": -0.1}, {"upsilon": 0.0}, {"tol": -1.0}, {"rrr_iter": -1},
        {"batch_size": 0}, {"ee": 1.0}, {"fpa": -0.2}, {"admm_alpha": 2.0},
    ])
    def test_out_of_range_rejected(self, kw):
        with pytest.raises(ValueError):
            G.HyperParams(**kw)


class TestActivation:
    def test_apply_relu(self):
        act = G.Activation("relu")
        assert_allclose(act.apply(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_apply_step(self):
        act = G.Activation("step", delta=0.4)
        assert_allclose(act.apply(np.array([-0.3, 0.0, 0.3])), [0.0, 0.0, 1.0])

    def test_apply_zigmoid(self):
        act = G.Activation("zigmoid", delta=0.4)
        assert_allclose(act.apply(np.array([-0.3, 0.0, 0.1, 0.3])),
                        [0.0, 0.5, 0.75, 1.0])

    def test_margin_kinds_need_delta(self):
        with pytest.raises(ValueError):
            G.Activation("step")
        with pytest.raises(ValueError):
            G.Activation("zigmoid", delta=0.0)
        with pytest.raises(ValueError):
            G.Activation("sigmoid")


class TestFeedForward:
    def test_identity_net(self):
        g = G.build_layered([1, 1], roles=["data", "hidden"])
        cons = G.ConsensusState(w_blocks=[np.array([[2.0]])],
                                b_layers=[None, np.zeros(1)])
        ys, xs = G.feed_forward(g, cons, G.Activation("relu"),
                                np.array([[0.5]]), omega=2.0)
        assert ys[1][0, 0] == 0.5
        assert xs[1][0, 0] == 0.5

    def test_matches_dense_matrix_oracle(self):
        rng = np.random.default_rng(10)
        g = G.build_layered([4, 5, 3], roles=["data", "hidden", "class"])
        w1 = rng.standard_normal((4, 5))
        w2 = rng.standard_normal((5, 3))
        b1 = rng.standard_normal(5)
        b2 = rng.standard_normal(3)
        cons = G.ConsensusState(w_blocks=[w1, w2], b_layers=[None, b1, b2])
        data = rng.standard_normal((6, 4))
        omega = 2.0
        ys, xs = G.feed_forward(g, cons, G.Activation("relu"), data, omega)
        # independent recomputation, one item at a time
        for k in range(6):
            h = np.maximum(data[k] @ w1 / omega - b1, 0.0)
            out = h @ w2 / omega - b2
            assert_allclose(ys[1][k], data[k] @ w1 / omega, atol=1e-12)
            assert_allclose(xs[1][k], h, atol=1e-12)
            assert_allclose(xs[2][k], out, atol=1e-12)

    def test_relu_scale_invariance_exact(self):
        rng = np.random.default_rng(11)
        g = G.build_layered([3, 4, 2], roles=["data", "hidden", "class"])
        w1 = rng.standard_normal((3, 4))
        w2 = rng.standard_normal((4, 2))
        b = [None, rng.standard_normal(4), rng.standard_normal(2)]
        data = rng.standard_normal((5, 3))
        c = 2.0  # power of two keeps the rescaling exact in floats
        base = G.feed_forward(g, G.ConsensusState([w1, w2], b),
                              G.Activation("relu"), data, omega=1.5)
        scaled = G.feed_forward(g, G.ConsensusState([c * w1, c * w2], b),
                                G.Activation("relu"), data, omega=c * 1.5)
        for xs_a, xs_b in zip(base[1][1:], scaled[1][1:]):
            assert np.array_equal(xs_a, xs_b)

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        g = G.build_layered([3, 3, 3])
        cons = G.ConsensusState([rng.standard_normal((3, 3)) for _ in range(2)],
                                [None, rng.standard_normal(3), rng.standard_normal(3)])
        data = rng.standard_normal((4, 3))
        a = G.feed_forward(g, cons, G.Activation("relu"), data)
        b = G.feed_forward(g, cons, G.Activation("relu"), data)
        for xa, xb in zip(a[1][1:], b[1][1:]):
            assert np.array_equal(xa, xb)

    def test_rejects_nan_input(self):
        g = G.build_layered([2, 2])
        cons = G.ConsensusState([np.eye(2)], [None, np.zeros(2)])
        with pytest.raises(ValueError):
            G.feed_forward(g, cons, G.Activation("relu"),
                           np.array([[np.nan, 0.0]]))

    def test_single_vector_input(self):
        g = G.build_layered([2, 2], roles=["data", "hidden"])
        cons = G.ConsensusState([np.eye(2)], [None, np.zeros(2)])
        ys, xs = G.feed_forward(g, cons, G.Activation("relu"), np.array([1.0, -1.0]))
        assert xs[1].shape == (2,)
        assert_allclose(xs[1], [1.0, 0.0])


class TestLayout:
    def test_views_partition_vector(self):
        g = G.build_layered([2, 3, 2])
        lay = G.Layout(g, n_items=4, yb_layers=(1, 2))
        vec = np.arange(lay.dim, dtype=float)
        seen = []
        for blk in range(g.n_blocks):
            seen.append(lay.x(vec, blk).ravel())
            seen.append(lay.w(vec, blk).ravel())
        for layer in (1, 2):
            seen.append(lay.y(vec, layer).ravel())
            seen.append(lay.b(vec, layer).ravel())
        joined = np.concatenate(seen)
        assert joined.size == lay.dim
        assert np.array_equal(np.sort(joined), vec)

    def test_views_are_writable(self):
        g = G.build_layered([2, 2])
        lay = G.Layout(g, n_items=1, yb_layers=(1,))
        vec = lay.new_vector()
        lay.w(vec, 0)[:] = 7.0
        assert np.all(lay.w(vec, 0) == 7.0)
        assert vec.sum() == 7.0 * 4
