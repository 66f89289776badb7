import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pbpk_sciml import allometry as al
from pbpk_sciml import autodiff as ad
from pbpk_sciml import synthdata as sd
from pbpk_sciml.autodiff import Tensor
from pbpk_sciml.pkode import SolverConfig

TINY = al.AllometryConfig(epochs=2, hidden=16, drug_dim=8, species_dim=4, batch_size=6)


@pytest.fixture(scope="module")
def d3():
    return sd.gen_crossspecies(8, 0)


@pytest.fixture(scope="module")
def loso(d3):
    return al.train_loso(d3, "Human", TINY, 0)


def poisoned(data, species="Human"):
    bad = copy.deepcopy(data)
    for r in bad.records:
        if r.species == species:
            r.conc_norm[:] = np.nan
            r.profile.concentrations[:] = np.nan
    return bad


def test_mean_adjacency_rows():
    g = sd.make_drug_graph(0, 0)
    a = al.mean_adjacency(g)
    np.testing.assert_allclose(a.sum(axis=1), 1.0)
    assert np.all(np.diag(a) > 0)
    np.testing.assert_array_equal(a > 0, (a > 0).T)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 200), st.randoms(use_true_random=False))
def test_gnn_permutation_invariant(drug, rnd):
    model = al.AllometryModel.init(al.AllometryConfig(), 0)
    g = sd.make_drug_graph(drug, 0)
    perm = list(range(g.n_nodes))
    rnd.shuffle(perm)
    np.testing.assert_allclose(al.gnn_encode(g.permuted(perm), model), al.gnn_encode(g, model), atol=1e-12)


def test_batched_encoding_matches_single():
    model = al.AllometryModel.init(al.AllometryConfig(), 1)
    graphs = [sd.make_drug_graph(i, 0) for i in range(4)]
    batched = model.encode(graphs).data
    for i, g in enumerate(graphs):
        np.testing.assert_allclose(batched[i], al.gnn_encode(g, model), atol=1e-13)
    assert batched.shape == (4, 16)


def test_rhs_input_width():
    assert al.AllometryConfig().rhs_input_dim == 26
    model = al.AllometryModel.init(al.AllometryConfig(), 0)
    assert model.params["rhs.w0"].shape == (26, 64)
    assert model.params["species"].shape == (3, 8)


def test_integrate_with_injected_field():
    grid = np.linspace(0.0, 1.0, 21)
    rate = Tensor([[1.5], [0.3]])
    traj = al.integrate_neural(lambda c, tau, zd, zs: ad.neg(c * rate), [1.0, 2.0], grid,
                               np.zeros((2, 1)), np.zeros((2, 1)), SolverConfig(substeps=1))
    assert traj.shape == (2, 21)
    expect = np.array([[1.0], [2.0]]) * np.exp(-np.array([[1.5], [0.3]]) * grid)
    np.testing.assert_allclose(traj.data, expect, rtol=1e-6)


def test_end_to_end_gradcheck_through_neural_ode():
    cfg = al.AllometryConfig(hidden=6, drug_dim=4, species_dim=3)
    model = al.AllometryModel.init(cfg, 2)
    graphs = [sd.make_drug_graph(i, 0) for i in range(2)]
    tau = np.linspace(0.0, 1.0, 6)
    target = np.exp(-np.outer([1.0, 2.0], tau))

    def loss():
        return ad.mse_loss(al._trajectory(model, graphs, [0, 1], [1.0, 1.0], tau), target)

    leaves = [model.params["gnn.w0"], model.params["species"], model.params["rhs.w0"], model.params["rhs.b3"]]
    assert ad.check_gradients(loss, leaves) <= 1e-4


def test_training_view_excludes_holdout(d3):
    view = al.TrainingView.build(d3, "human")
    assert view.conc.shape == (16, 50)
    assert 2 not in set(view.species_idx.tolist())


def test_loso_needs_two_training_species(d3):
    only_two = sd.Dataset3(d3.graphs, [r for r in d3.records if r.species != "Dog"], d3.times, d3.species)
    with pytest.raises(ValueError, match="two"):
        al.TrainingView.build(only_two, "Human")


def test_poisoned_holdout_never_read_during_training(d3):
    clean_model, clean_history = al.fit_loso(d3, "Human", TINY, 0)
    model, history = al.fit_loso(poisoned(d3), "Human", TINY, 0)
    for k, p in model.params.items():
        assert np.all(np.isfinite(p.data)), k
        np.testing.assert_array_equal(p.data, clean_model.params[k].data)
    assert history == clean_history
    assert all(math.isfinite(x) for x in history)


def test_holdout_embedding_untouched(loso):
    model, _ = loso
    init = al.AllometryModel.init(TINY, 0)
    np.testing.assert_array_equal(model.params["species"].data[2], init.params["species"].data[2])
    assert not np.array_equal(model.params["species"].data[0], init.params["species"].data[0])


def test_report_fields(loso):
    _, rep = loso
    assert rep.held_out == "Human"
    assert len(rep.epoch_loss) == TINY.epochs
    assert len(rep.predictions) == 8
    for v in (rep.test_mse, rep.baseline_mse, rep.interpolated_mse):
        assert math.isfinite(v) and v >= 0


def test_interpolated_embedding_is_linear_in_log_weight():
    model = al.AllometryModel.init(al.AllometryConfig(species_dim=2), 0)
    model.params["species"].data[:] = [[0.0, 1.0], [1.0, 3.0], [9.0, 9.0]]
    rat, dog, human = sd.SPECIES
    z = al.interpolated_species_embedding(model, [rat, dog], human)
    frac = (math.log(70) - math.log(0.25)) / (math.log(10) - math.log(0.25))
    np.testing.assert_allclose(z, [frac, 1.0 + 2.0 * frac])


def test_predict_profile(loso, d3):
    model, rep = loso
    prof = al.predict_profile(model, d3.graphs[0], "Human", d3.times)
    assert prof.concentrations[0] == 1.0
    assert prof.meta["species"] == "Human"
    np.testing.assert_allclose(prof.concentrations, rep.predictions[d3.graphs[0].drug_id], atol=1e-12)


def test_checkpoint_round_trip(loso, d3, tmp_path):
    model, _ = loso
    model.save(tmp_path / "a.ckpt")
    again = al.AllometryModel.load(tmp_path / "a.ckpt")
    assert again.meta["held_out"] == "Human"
    a = al.predict_profile(again, d3.graphs[1], "Rat", d3.times).concentrations
    b = al.predict_profile(model, d3.graphs[1], "Rat", d3.times).concentrations
    np.testing.assert_array_equal(a, b)


def test_empty_graph_rejected():
    with pytest.raises(ValueError, match="empty"):
        al.mean_adjacency(sd.MoleculeGraph(np.zeros((0, 8)), [], 5))
