import math

import numpy as np
import pytest

from mgfusion.dataset import Segment, SyntheticSpec, generate_synthetic_corpus
from mgfusion.graphs import build_adjacency_set
from mgfusion.model import Model, ModelConfig, forward_pair, is_regression_param
from mgfusion.numeric import ParamStore, Tape, finite_diff_check
from mgfusion.training import (AdamState, OffsetTarget, ProposalCache, TrainConfig, TrainingDiverged,
                               adam_step, encode_offsets, make_batch, regression_loss,
                               regression_loss_var, train, train_step, triplet_loss,
                               triplet_loss_var, write_history)


def tiny_corpus(seed=0):
    return generate_synthetic_corpus(SyntheticSpec(num_classes=4, train_classes=3, test_classes=1,
                                                   videos_per_class=4, feature_dim=6,
                                                   video_length_range=(12, 20),
                                                   action_length_range=(4, 8), seed=seed))


def tiny_config(**kw):
    base = dict(T=6, ks=(1, 2), L=1, batch_size=4, epochs=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTripletLoss:
    def test_satisfied_margin(self):
        assert triplet_loss(0.9, -0.8, None, 0.5, 0.0) == 0.0

    def test_equal_scores_give_margin(self):
        assert triplet_loss([0.3, -0.2], [0.3, -0.2], None, 0.5, 0.0) == pytest.approx(1.0)

    def test_arithmetic(self):
        assert triplet_loss(0.2, 0.1, None, 0.5, 0.0) == pytest.approx(0.4)

    def test_regularization_counts_every_entry(self):
        store = ParamStore()
        store.add("a", [[1.0, 2.0]])
        store.add("b", [[3.0]])
        assert triplet_loss(0.9, -0.8, store, 0.5, 0.1) == pytest.approx(1.4)

    def test_tape_matches_numpy(self):
        store = ParamStore()
        store.add("w", [[0.5, -1.0]])
        tape = Tape(store)
        sp, sn = tape.const([[0.2], [0.7]]), tape.const([[0.1], [-0.5]])
        out = triplet_loss_var(tape, sp, sn, store, 0.5, 5e-3)
        assert out.value[0, 0] == pytest.approx(triplet_loss([0.2, 0.7], [0.1, -0.5], store, 0.5, 5e-3))

    def test_kink_has_zero_gradient(self):
        tape = Tape()
        sp, sn = tape.const([[0.5]]), tape.const([[0.0]])
        g = tape.backward(triplet_loss_var(tape, sp, sn, ParamStore(), 0.5, 0.0), wrt=[sp])
        assert g[sp.id][0, 0] == 0.0


class TestOffsets:
    def test_identity(self):
        assert encode_offsets(Segment(3, 9), Segment(3, 9)) == OffsetTarget(0.0, 0.0)

    def test_double_length(self):
        t = encode_offsets(Segment(0, 20), Segment(5, 15))
        assert t.T_c_star == 0.0 and t.T_l_star == pytest.approx(math.log(2), abs=1e-15)

    def test_shift_one_length(self):
        assert encode_offsets(Segment(10, 20), Segment(0, 10)) == OffsetTarget(1.0, 0.0)

    def test_zero_length_gt(self):
        with pytest.raises(ValueError):
            encode_offsets(Segment(0, 4), type("S", (), {"start": 2, "end": 2})())


class TestRegressionLoss:
    def test_equal(self):
        assert regression_loss([(0.3, -1.0)], [OffsetTarget(0.3, -1.0)]) == 0.0

    def test_single(self):
        assert regression_loss([(0.0, 0.0)], [(1.0, -2.0)]) == 3.0

    def test_mean(self):
        assert regression_loss([(0.0, 0.0), (0.0, 0.0)], [(1.0, 0.0), (2.0, -1.0)]) == 2.0

    def test_empty(self):
        with pytest.raises(ValueError):
            regression_loss([], [])

    def test_tape_matches(self):
        tape = Tape()
        out = regression_loss_var(tape, tape.const([[0.0, 0.0], [0.0, 0.0]]),
                                  np.array([[1.0, 0.0], [2.0, -1.0]]))
        assert out.value[0, 0] == 2.0


class TestAdam:
    def test_first_step(self):
        store = ParamStore()
        store.add("theta", [[1.0]])
        store.grads["theta"][:] = 1.0
        adam_step(AdamState(0.1), store)
        # m_hat = 1, v_hat = 1, step = 0.1 * 1 / (1 + 1e-8)
        assert store["theta"][0, 0] == pytest.approx(0.9, abs=1e-8)

    def test_zero_gradient(self):
        store = ParamStore()
        store.add("theta", [[1.0, -2.0]])
        before = store["theta"].copy()
        adam_step(AdamState(0.1), store)
        assert store["theta"].tobytes() == before.tobytes()

    def test_filter(self):
        m = Model(ModelConfig(input_dim=4, hidden=4, num_graphs=1, head_widths=(2, 1)))
        for name in m.params.names():
            m.params.grads[name][:] = 1.0
        before = {n: m.params[n].copy() for n in m.params.names()}
        adam_step(AdamState(0.1), m.params, is_regression_param)
        for name in m.params.names():
            same = m.params[name].tobytes() == before[name].tobytes()
            assert same != is_regression_param(name)

    def test_does_not_write_in_place(self):
        store = ParamStore()
        store.add("theta", [[1.0]])
        old = store["theta"]
        store.grads["theta"][:] = 1.0
        adam_step(AdamState(0.1), store)
        assert old[0, 0] == 1.0


def test_gradient_isolation_over_ten_steps():
    config = tiny_config()
    model = Model(ModelConfig(input_dim=6, fusion_layers=1, num_graphs=2, init_seed=0))
    adj = build_adjacency_set(config.T, config.ks)
    rng = np.random.default_rng(0)
    reg_opt = AdamState(config.lr_regression)
    q, p = rng.standard_normal((2, 4, 6, 6))
    targets = rng.standard_normal((4, 2))
    before = {n: model.params[n].copy() for n in model.params.names() if not is_regression_param(n)}
    for _ in range(10):
        tape = Tape(model.params)
        _, off = forward_pair(tape, model, q, p, adj, training=True, rng=rng, detach_regression=True)
        model.params.zero_grad()
        tape.backward(regression_loss_var(tape, off, targets))
        adam_step(reg_opt, model.params, is_regression_param)
    changed = [n for n, v in before.items() if model.params[n].tobytes() != v.tobytes()]
    assert changed == []


def test_inactive_hinge_has_zero_gradient():
    tape = Tape()
    sp, sn = tape.const([[0.9], [0.7]]), tape.const([[-0.8], [0.1]])
    g = tape.backward(triplet_loss_var(tape, sp, sn, ParamStore(), 0.5, 0.0), wrt=[sp, sn])
    assert not g[sp.id].any() and not g[sn.id].any()


def test_zero_score_slope_leaves_shared_layers_alone():
    corpus = tiny_corpus()
    config = tiny_config(lam=0.0)
    model = Model(ModelConfig(input_dim=6, fusion_layers=1, num_graphs=2, dropout=0.0))
    # A zero final score weight blocks every triplet gradient before it reaches the trunk,
    # and the regression step only touches its own head.
    last = model.num_stages - 1
    model.params.set(f"score.{last}.W", np.zeros_like(model.params[f"score.{last}.W"]))
    cache = ProposalCache(config.T, config.window_fractions, config.stride_fraction)
    batch = make_batch(corpus, np.random.default_rng(0), config, cache)
    shared = {n: model.params[n].copy() for n in model.params.names()
              if not n.startswith(("score.", "regression."))}
    train_step(model, batch, build_adjacency_set(config.T, config.ks), config,
               AdamState(config.lr_triplet), AdamState(config.lr_regression), np.random.default_rng(1))
    for name, value in shared.items():
        assert model.params[name].tobytes() == value.tobytes(), name


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    model = Model(ModelConfig(input_dim=5, fusion_layers=1, num_graphs=2, dropout=0.0, init_seed=3))
    adj = build_adjacency_set(4, (1, 2))
    q, p, n = rng.standard_normal((3, 3, 4, 5))
    targets = rng.standard_normal((3, 2))

    def tri():
        tape = Tape(model.params)
        s, _ = forward_pair(tape, model, np.concatenate([q, q]), np.concatenate([p, n]), adj, training=True)
        return tape, triplet_loss_var(tape, tape.slice(s, 0, 3), tape.slice(s, 3, 6), model.params, 0.5, 5e-3)

    def reg():
        tape = Tape(model.params)
        _, off = forward_pair(tape, model, q, p, adj, training=True)
        return tape, regression_loss_var(tape, off, targets)

    assert finite_diff_check(tri, model.params, samples=60, rng=np.random.default_rng(0)) <= 1e-4
    assert finite_diff_check(reg, model.params, samples=60, rng=np.random.default_rng(1)) <= 1e-4


class TestTrainLoop:
    def test_history_shape_and_determinism(self):
        corpus = tiny_corpus()
        a = train(tiny_config(), corpus)
        b = train(tiny_config(), corpus)
        assert [h[0] for h in a.history] == [1, 2, 3]
        assert a.history == b.history
        for name, value in a.model.state().items():
            assert b.model.state()[name].tobytes() == value.tobytes()

    def test_joint_flag_changes_updates(self):
        corpus = tiny_corpus()
        a = train(tiny_config(epochs=1), corpus)
        b = train(tiny_config(epochs=1, joint_regression=True), corpus)
        assert a.model.params["lstm.W_x"].tobytes() != b.model.params["lstm.W_x"].tobytes()

    def test_divergence_names_epoch(self):
        corpus = tiny_corpus()
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="epoch 1"):
            train(tiny_config(lr_triplet=1e300, lam=1e300), corpus)

    def test_periodic_checkpoints(self, tmp_path):
        train(tiny_config(epochs=4, checkpoint_every=2), tiny_corpus(), out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint_epoch00002.txt",
                                                             "checkpoint_epoch00004.txt"]

    def test_history_csv(self, tmp_path):
        write_history([(1, 2.5, 0.25)], tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text() == "epoch,mean_triplet_loss,mean_regression_loss\n1,2.5,0.25\n"

    @pytest.mark.parametrize("field,value", [("gamma", 0.0), ("lam", -1.0), ("mu", -0.5), ("batch_size", 0)])
    def test_invalid_config(self, field, value):
        with pytest.raises(ValueError, match=field):
            tiny_config(**{field: value}).validate()
