import json
import math
from dataclasses import replace

import numpy as np
import pytest

from probf import barrier as B
from probf import dynamics as D
from probf.episodic import (EpisodeConfig, aggregate, collect_episode, residual_label,
                            train_episodic)
from probf.errors import ConfigError
from probf.gp import FitConfig, GPResidualModel, ResidualDataset, posterior_predict
from probf.safety_filter import NominalFilter
from probf.systems import segway_setup

QUICK_FIT = FitConfig(restarts=1, max_iter=15)


def quick_config(setup, **kw):
    base = dict(n_episodes=2, horizon=2.0, fit=QUICK_FIT, max_points=150)
    base.update(kw)
    return EpisodeConfig.for_setup(setup, **base)


def dataset(n, offset=0.0):
    X = np.arange(n, dtype=float)[:, None] + offset
    return ResidualDataset(np.hstack([X, X]), X.copy(), X[:, 0] * 2)


def label_error(dt, matched=False):
    model = D.make_segway()
    if matched:
        model = model.matched()
    spec = B.segway_barrier()
    x0 = np.array([0.0, 0.2, 0.1, 0.05])
    u = np.array([0.6])
    traj = D.rollout(model, lambda t, x: u, x0, dt, dt)
    label = residual_label(traj, spec, model).labels[0]
    return abs(label - B.residual_truth(spec, model, x0, u))


def test_labels_converge_first_order():
    dts = np.array([1e-2, 1e-3, 1e-4])
    errs = np.array([label_error(dt) for dt in dts])
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.15)


def test_matched_labels_scale_with_dt():
    setup = segway_setup(matched=True)
    bounds = []
    for dt in (0.01, 0.005):
        ctrl = NominalFilter(setup.barrier, setup.model, setup.desired)
        traj = D.rollout(setup.model, ctrl, setup.region.center, 1.0, dt, barrier=setup.barrier)
        bounds.append(np.max(np.abs(residual_label(traj, setup.barrier, setup.model).labels)))
    assert bounds[0] / bounds[1] == pytest.approx(2.0, rel=0.3)


def test_equilibrium_label_is_minus_nominal_rate():
    model = D.ControlAffineModel(name="still", state_dim=4, control_dim=1,
                                 fields=lambda x, p: (np.zeros(4), np.zeros((4, 1))),
                                 params_true={}, params_nominal={})
    spec = B.segway_barrier()
    x0 = np.array([0.0, 0.2, 0.0, 0.1])
    traj = D.rollout(model, lambda t, x: [0.0], x0, 0.05, 0.01)
    labels = residual_label(traj, spec, model).labels
    cc = B.constraint_constants(spec, model, x0)
    nominal_rate = cc.c_b - spec.alpha_gain * spec.h(x0)
    assert np.allclose(labels, -nominal_rate, atol=1e-15)


def test_label_of_single_state_is_empty():
    traj = D.rollout(D.make_segway(), lambda t, x: [0.0], np.zeros(4), 0.0, 0.01)
    assert len(residual_label(traj, B.segway_barrier(), D.make_segway())) == 0


def test_aggregate_identity_and_sizes():
    a, b = dataset(4), dataset(3, 10.0)
    assert np.array_equal(aggregate([a]).labels, a.labels)
    both = aggregate([a, b])
    assert len(both) == 7
    assert np.array_equal(both.labels[4:], b.labels)


def test_aggregate_thinning():
    data = aggregate([dataset(700), dataset(800, 1000.0)], cap=500)
    full = aggregate([dataset(700), dataset(800, 1000.0)])
    assert len(data) == 500
    assert data.labels[0] == full.labels[0] and data.labels[-1] == full.labels[-1]
    picked = np.searchsorted(full.labels, data.labels)
    steps = np.diff(picked)
    # 1499 / 499 is a hair above 3, so rounded positions step by 3 or 4
    assert set(steps) <= {3, 4}
    assert abs(np.mean(steps) - 1499 / 499) < 1e-12


def test_episode_zero_uses_nominal_filter():
    setup = segway_setup()
    traj, labels, controller, blowup = collect_episode(setup, None, quick_config(setup), 0)
    assert isinstance(controller, NominalFilter)
    assert len(labels) == math.ceil(len(traj.controls) / 5)


def test_collect_is_deterministic():
    setup = segway_setup()
    config = quick_config(setup)
    a = collect_episode(setup, None, config, 1)[1]
    b = collect_episode(setup, None, config, 1)[1]
    assert a.digest() == b.digest()
    c = collect_episode(setup, None, replace(config, seed=1), 1)[1]
    assert c.digest() != a.digest()


def test_segway_episode_zero_leaves_safe_set():
    setup = segway_setup()
    config = EpisodeConfig.for_setup(setup)
    traj = collect_episode(setup, None, config, 0)[0]
    assert traj.min_h < 0


@pytest.fixture(scope="module")
def short_training():
    setup = segway_setup()
    return setup, train_episodic(setup, quick_config(setup, n_episodes=3))


def test_dataset_grows_and_logs(short_training, tmp_path):
    setup, (gp, logs) = short_training
    sizes = [rec.n_points for rec in logs]
    assert sizes == sorted(sizes) and sizes[0] < sizes[-1]
    assert [rec.episode for rec in logs] == [0, 1, 2]
    assert all(np.isfinite(rec.mll) for rec in logs)
    assert isinstance(gp, GPResidualModel) and gp.n_points == sizes[-1]


def test_model_explains_training_data(short_training):
    _, (gp, _) = short_training
    data = gp.data
    pred = np.array([posterior_predict(gp, x, u)[0] for x, u in zip(data.states, data.controls)])
    rmse = math.sqrt(np.mean((pred - data.labels) ** 2))
    assert rmse <= 2 * math.sqrt(gp.hyperparams.noise_variance) + 1e-9


def test_single_episode_trains_on_bootstrap():
    setup = segway_setup()
    gp, logs = train_episodic(setup, quick_config(setup, n_episodes=1))
    first = collect_episode(setup, None, quick_config(setup, n_episodes=1), 0)[1]
    assert len(logs) == 1 and gp.data.digest() == first.digest()


def test_training_reproducible(tmp_path):
    setup = segway_setup()
    config = quick_config(setup)
    gp_a, logs_a = train_episodic(setup, config, log_path=tmp_path / "a.jsonl")
    gp_b, logs_b = train_episodic(setup, config, log_path=tmp_path / "b.jsonl")
    assert np.array_equal(gp_a.alpha, gp_b.alpha)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    record = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(record) >= {"episode", "n_points", "mll", "min_h", "violated", "delta_events"}


def test_blown_up_episode_adds_no_labels(monkeypatch):
    from probf import episodic

    real = episodic.collect_episode

    def flaky(setup, gp, config, episode):
        traj, labels, controller, _ = real(setup, gp, config, episode)
        return traj, labels, controller, episode == 1
    monkeypatch.setattr(episodic, "collect_episode", flaky)
    setup = segway_setup()
    _, logs = train_episodic(setup, quick_config(setup, n_episodes=3))
    assert [rec.blowup for rec in logs] == [False, True, False]
    assert logs[1].n_points == logs[0].n_points < logs[2].n_points


@pytest.mark.parametrize("kw", [{"n_episodes": 0}, {"stride": 0}, {"dt": 0.0}])
def test_config_validation(kw):
    setup = segway_setup()
    with pytest.raises(ConfigError):
        quick_config(setup, **kw)
