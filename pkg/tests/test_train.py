import dataclasses
import math

import numpy as np
import pytest

from mskpinn import autodiff as ad
from mskpinn import data as dat
from mskpinn import loss as ls
from mskpinn import network as net
from mskpinn import train as tr


def _strip_wall(rows):
    """Log rows without wall-clock time, NaN mapped to None so rows compare equal."""
    return [{k: None if isinstance(v, float) and math.isnan(v) else v for k, v in r.items() if k != "wall_ms"}
            for r in rows]


# -- configuration ---------------------------------------------------------------

def test_default_protocol():
    cfg = tr.TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.lr_floor) == (500, 8, 5e-4, 0.1)
    assert (cfg.w_d, cfg.w_p, cfg.w_b) == (3.0, 1000.0, 500.0)
    assert (cfg.window, cfg.stride, cfg.train_frac) == (20, 2, 0.8)
    nc = cfg.net_config(10)
    assert nc.head_dims == (256, 128, 64, 10) and nc.conv_channels == (64, 128, 128)
    assert tr.PROFILES == {"smoke": {"cycles": 3, "epochs": 50}, "full": {"cycles": 10, "epochs": 500}}


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        tr.TrainConfig(mode="hybrid")
    with pytest.raises(ValueError):
        tr.TrainConfig(w_p=-1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"epochs": 3, "learning_rate": 1.0})
    cfg = tr.TrainConfig(epochs=7, head_hidden=(9, 4), backbone="cnn")
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_prepared_trial_alignment(tiny_prepared, smoke_trials):
    p = tiny_prepared[0]
    assert len(p) == 11 and p.end_frames.tolist() == list(range(19, 40, 2))
    np.testing.assert_array_equal(p.labels, smoke_trials[0].activations[p.end_frames])
    np.testing.assert_allclose(p.forces(p.labels), smoke_trials[0].forces[p.end_frames], rtol=1e-12, atol=1e-9)
    assert p.terms.gains.shape == (11, 3, 10)


# -- training --------------------------------------------------------------------

def test_runs_are_bit_identical(mini_train_config, tiny_prepared, tmp_path):
    a = tr.train_run(mini_train_config, tiny_prepared, tmp_path / "a")
    b = tr.train_run(mini_train_config, tiny_prepared, tmp_path / "b")
    assert _strip_wall(a.log) == _strip_wall(b.log)
    assert [p.name for p in a.checkpoints] == ["epoch_0002.npz", "epoch_0004.npz"]
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()
    logged = tr.read_log_csv(tmp_path / "a" / "train_log.csv")
    assert _strip_wall(logged) == _strip_wall(a.log)


def test_seed_changes_the_run(mini_train_config, tiny_prepared):
    a = tr.train_run(mini_train_config.replace(epochs=1), tiny_prepared)
    b = tr.train_run(mini_train_config.replace(epochs=1, seed=4), tiny_prepared)
    assert a.log[0]["l_total"] != b.log[0]["l_total"]


def test_resume_matches_straight_run(mini_train_config, tiny_prepared, tmp_path):
    straight = tr.train_run(mini_train_config, tiny_prepared, tmp_path / "s")
    tr.train_run(mini_train_config, tiny_prepared, tmp_path / "r", stop_epoch=2)
    resumed = tr.train_run(mini_train_config, tiny_prepared, tmp_path / "r", resume=tmp_path / "r" / "epoch_0002.npz")
    assert resumed.final_checkpoint.read_bytes() == straight.final_checkpoint.read_bytes()
    assert _strip_wall(tr.read_log_csv(tmp_path / "r" / "train_log.csv")) == _strip_wall(straight.log)


def test_log_records_every_component(mini_train_config, tiny_prepared):
    res = tr.train_run(mini_train_config.replace(epochs=1), tiny_prepared)
    assert len(res.log) == math.ceil(22 / 8)
    row = res.log[0]
    assert set(row) == set(tr.LOG_FIELDS) and row["step"] == 1 and row["epoch"] == 1
    w = ls.LossWeights()
    assert row["l_total"] == pytest.approx(w.w_d * row["l_d"] + w.w_p * row["l_p"] + w.w_b * row["l_b"], rel=1e-12)
    assert row["lr"] == pytest.approx(5e-4) and math.isnan(row["l_sup"])


def _dynamics_loss(result_or_params, cfg, trials, stats):
    X = dat.normalize(stats, np.concatenate([t.windows for t in trials]))
    terms = ls.FrameTerms.concat(t.terms for t in trials)
    pred = net.predict(cfg, result_or_params, X)
    return float(ls.dynamics_loss_terms(pred, terms).data)


def test_physics_training_reduces_dynamics_residual(mini_train_config, tiny_prepared):
    cfg = mini_train_config.replace(epochs=25, lr=3e-3)
    res = tr.train_run(cfg, tiny_prepared)
    start = _dynamics_loss(net.init_params(res.net_config, cfg.seed), res.net_config, tiny_prepared, res.stats)
    end = _dynamics_loss(res.params, res.net_config, tiny_prepared, res.stats)
    assert end < start


def test_supervised_fixed_point(mini_train_config, tiny_prepared):
    n = sum(len(t) for t in tiny_prepared)
    cfg = mini_train_config.replace(mode="supervised", weight_decay=0.0, dropout=0.0, epochs=1, batch_size=n)
    init = tr.train_run(cfg.replace(epochs=0), tiny_prepared)
    # labels from the very batch the first step sees (one batch, same shuffle), so residuals are exactly 0;
    # BLAS rounding differs with batch composition and Adam would blow a 1e-19 gradient up to a full step
    X = dat.normalize(init.stats, np.concatenate([t.windows for t in tiny_prepared]))
    order = np.random.default_rng([cfg.seed, 0]).permutation(n)
    labels = np.empty((n, 10))
    with ad.no_tape():
        labels[order] = net.backbone_forward(init.net_config, init.params, X[order]).data
    cut = np.cumsum([len(t) for t in tiny_prepared])[:-1]
    own = [dataclasses.replace(t, labels=lab) for t, lab in zip(tiny_prepared, np.split(labels, cut))]
    res = tr.train_run(cfg, own)
    assert res.log[0]["l_sup"] == 0.0
    for k in init.params:
        np.testing.assert_array_equal(res.params[k].data, init.params[k].data)


def test_supervised_needs_labels(mini_train_config, tiny_prepared):
    bare = [dataclasses.replace(t, labels=None) for t in tiny_prepared]
    with pytest.raises(ValueError):
        tr.train_run(mini_train_config.replace(mode="supervised"), bare)
    with pytest.raises(ValueError):
        tr.train_run(mini_train_config, [])


def test_force_mse_term_changes_supervised_objective(mini_train_config, tiny_prepared):
    cfg = mini_train_config.replace(mode="supervised", epochs=1)
    plain = tr.train_run(cfg, tiny_prepared).log[0]["l_sup"]
    with_force = tr.train_run(cfg.replace(force_mse_weight=1.0), tiny_prepared).log[0]["l_sup"]
    assert with_force > plain > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_saves_last_good_state(mini_train_config, tiny_prepared, tmp_path):
    broken = [dataclasses.replace(tiny_prepared[0], windows=np.where(
        np.arange(11)[:, None, None] == 3, np.inf, tiny_prepared[0].windows))]
    with pytest.raises(tr.TrainingDivergedError) as info:
        tr.train_run(mini_train_config.replace(normalize=False), broken, tmp_path)
    assert info.value.checkpoint.name == "last_good.npz"
    _, params, _, meta = tr.load_model(info.value.checkpoint)
    assert meta["diverged_at_step"] < 2 and meta["epoch"] == 0
    assert all(np.all(np.isfinite(p.data)) for p in params.values())


def test_backbones_train(mini_train_config, tiny_prepared):
    for backbone in net.BACKBONES:
        res = tr.train_run(mini_train_config.replace(epochs=1, backbone=backbone), tiny_prepared)
        assert res.net_config.backbone == backbone and np.isfinite(res.log[-1]["l_total"])


# -- evaluation ---------------------------------------------------------------------

def _small_net(n_muscles=10, bias=0.5, seed=0, zero=False):
    cfg = net.NetConfig(d_joint=4, n_heads=2, d_integrated=4, d_gru=2, gru_layers=1, head_dims=(4, n_muscles),
                        conv_channels=(4, 4, 4))
    params = net.init_params(cfg, seed)
    for p in params.values():
        p.data *= 0.0 if zero else 0.3
    params["head.0.b"].data[:] = bias
    return cfg, params, dat.NormStats(np.zeros(9), np.ones(9))


def test_reference_against_itself_is_perfect(tiny_prepared, muscles):
    cfg, params, stats = _small_net()
    own = [dataclasses.replace(t, labels=net.predict(cfg, params, t.windows, clamp=True)) for t in tiny_prepared]
    assert all(np.all(np.ptp(t.labels, axis=0) > 0) for t in own)
    rep = tr.evaluate(cfg, params, stats, own, muscles.names, latency_repeats=0)
    assert all(v == 1.0 for v in rep.per_muscle("activation_r2").values())
    assert all(v == 0.0 for v in rep.per_muscle("activation_nrmse").values())
    for t, a, f in zip(own, rep.predictions, rep.forces):
        np.testing.assert_array_equal(f, t.forces(a))


def test_constant_mean_prediction_scores_zero(tiny_prepared, muscles):
    t = tiny_prepared[0]
    cfg, params, stats = _small_net(bias=t.labels.mean(axis=0), zero=True)
    rep = tr.evaluate(cfg, params, stats, [t], muscles.names, latency_repeats=0)
    for v in rep.per_muscle("activation_r2").values():
        assert v == pytest.approx(0.0, abs=1e-12)


def test_evaluation_rejects_mismatches(tiny_prepared, muscles):
    cfg, params, stats = _small_net()
    with pytest.raises(ValueError):
        tr.evaluate(cfg, params, stats, tiny_prepared, muscles.names[:9], latency_repeats=0)
    with pytest.raises(ValueError):
        tr.evaluate(cfg, params, stats, [dataclasses.replace(tiny_prepared[0], labels=None)], muscles.names)


def test_metrics_recompute_from_written_traces(tiny_prepared, muscles, tmp_path):
    cfg, params, stats = _small_net(seed=3)
    rep = tr.evaluate(cfg, params, stats, tiny_prepared, muscles.names, latency_repeats=0)
    tr.write_eval_outputs(tmp_path, tiny_prepared, rep, muscles.names)
    traces = tr.read_eval_traces(tmp_path)
    assert sorted(traces) == sorted(t.name for t in tiny_prepared)
    # independent recomputation straight from the CSV columns
    for m, name in enumerate(muscles.names):
        for quantity, pi, ri in (("activation", 1, 3), ("force", 2, 4)):
            r2 = []
            for tup in traces.values():
                y, p = tup[ri][:, m], tup[pi][:, m]
                r2.append(1 - np.sum((y - p) ** 2) / np.sum((y - np.mean(y)) ** 2))
            row = next(r for r in dat.read_metrics_csv(tmp_path / "metrics.csv")
                       if r["muscle"] == name and r["metric"] == f"{quantity}_r2")
            assert row["mean"] == pytest.approx(np.mean(r2), rel=1e-9, abs=1e-12)


def test_latency_report(tiny_prepared):
    cfg, params, _ = _small_net()
    lat = tr.measure_latency(cfg, params, tiny_prepared[0].windows[0], repeats=5)
    assert lat["budget_ms"] == 75.0 and lat["median_ms"] > 0
    assert lat["within_budget"] == (lat["median_ms"] < 75.0)
    assert lat["max_ms"] >= lat["p95_ms"] >= lat["median_ms"]


def test_ablation_row_and_csv(tiny_prepared, muscles, tmp_path):
    cfg, params, stats = _small_net(seed=4)
    rep = tr.evaluate(cfg, params, stats, tiny_prepared, muscles.names, latency_repeats=0)
    row = tr.ablation_row("no_lp", "mjca", rep)
    assert row["activation_r2"] == pytest.approx(rep.mean("activation_r2"))
    assert row["mean_activation"] == pytest.approx(np.mean(np.concatenate(rep.predictions)))
    tr.write_ablation_csv([row], tmp_path / "a.csv")
    back = tr.read_ablation_csv(tmp_path / "a.csv")[0]
    assert back == {k: v if isinstance(v, str) else pytest.approx(v) for k, v in row.items()}


def test_ablation_suite_runs_every_requested_variant(mini_train_config, tiny_prepared, muscles):
    rows = tr.ablation_suite(mini_train_config.replace(epochs=1), tiny_prepared[:1], tiny_prepared[1:],
                             muscles.names, variants=("full", "no_ld"), backbones=("mjca", "cnn"))
    assert [(r["variant"], r["backbone"]) for r in rows] == [("full", "mjca"), ("no_ld", "mjca"), ("full", "cnn")]
