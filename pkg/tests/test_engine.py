import time

import numpy as np
import pytest

from interlock import data as D
from interlock import engine as E
from interlock.errors import ConfigurationError, WorkerError
from interlock.io import MetricsWriter, read_metrics
from interlock.model import ArchitectureSpec, build
from interlock.optim import LrSchedule, OptimizerConfig
from interlock.routing import ComponentPass, RoutingPolicy
from interlock.tensor import softmax

ADAM = OptimizerConfig("adam")
NON_STALE = [
    RoutingPolicy("n_wise", 1),
    RoutingPolicy("n_wise", 2),
    RoutingPolicy("n_wise", 2, mix_local=True),
    RoutingPolicy("grouped_local", 2),
    RoutingPolicy("end_to_end"),
]


@pytest.fixture(scope="module")
def blobs():
    return D.normalize(D.synth_blobs(classes=3, dims=2, n=600, seed=0))


def mlp(n=3, width=16, seed=1, dims=2, classes=3):
    return build(ArchitectureSpec("mlp", (dims,), classes, widths=(width,) * n), seed=seed)


def run(model, policy, ds, lr=1e-2, on_row=None, **kw):
    kw.setdefault("steps", 50)
    kw.setdefault("batch_size", 32)
    return E.train(model, policy, ds, ADAM, LrSchedule(lr=lr), E.TrainSettings(**kw), seed=3, on_row=on_row)


def test_end_to_end_mlp_fits_blobs(blobs):
    model = mlp()
    res = run(model, RoutingPolicy("end_to_end"), blobs, steps=200)
    assert res.metrics.final_eval("train").head_accuracy[-1] > 0.95
    assert len(res.metrics.steps) == 200
    assert [r.step for r in res.metrics.steps] == list(range(1, 201))


def test_reference_runs_write_identical_metrics(blobs, tmp_path):
    for name in ("a", "b"):
        model = mlp()
        with MetricsWriter(tmp_path / f"{name}.csv", model.n) as sink:
            E.train(model, RoutingPolicy("n_wise", 2), blobs, ADAM, LrSchedule(lr=1e-2),
                    E.TrainSettings(steps=40, batch_size=16, eval_every=10), seed=7, on_row=sink)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize("policy", NON_STALE, ids=lambda p: p.label())
def test_pipelined_matches_reference_losses(blobs, policy):
    out = {}
    for mode in E.MODES:
        model = mlp(n=4)
        res = run(model, policy, blobs, steps=40, mode=mode)
        out[mode] = np.array([r.losses for r in res.metrics.steps])
        out[mode + "_params"] = np.concatenate([p.value.ravel() for p in model.params()])
    assert np.max(np.abs(out["reference"] - out["pipelined"])) < 1e-6
    assert np.max(np.abs(out["reference_params"] - out["pipelined_params"])) < 1e-6


def test_pipelined_conv_matches_reference():
    ds = D.normalize(D.synth_images(classes=4, h=8, w=8, n=200, seed=0))
    out = {}
    for mode in E.MODES:
        model = build(ArchitectureSpec("toy_conv", (3, 8, 8), 4, depth=4, filters=(4, 6)), seed=0)
        res = run(model, RoutingPolicy("n_wise", 2), ds, lr=1e-3, steps=8, batch_size=8, mode=mode)
        out[mode] = np.array([r.losses for r in res.metrics.steps])
    assert np.max(np.abs(out["reference"] - out["pipelined"])) < 1e-6


def test_hogwild_emulation_matches_pipelined_trajectory(blobs):
    out = {}
    for mode in E.MODES:
        model = mlp(n=3)
        res = run(model, RoutingPolicy("hogwild"), blobs, steps=60, mode=mode)
        out[mode] = np.concatenate([p.value.ravel() for p in model.params()])
        out[mode + "_losses"] = np.array([r.losses for r in res.metrics.steps])
        np.testing.assert_allclose(res.metrics.staleness, [2, 1, 0], atol=0.1)
    assert np.max(np.abs(out["reference"] - out["pipelined"])) < 1e-6
    assert np.max(np.abs(out["reference_losses"] - out["pipelined_losses"])) < 1e-6


def test_non_stale_strategies_report_zero_staleness(blobs):
    for mode in E.MODES:
        res = run(mlp(), RoutingPolicy("n_wise", 2), blobs, steps=10, mode=mode)
        assert res.metrics.staleness == [0.0, 0.0, 0.0]


def test_stale_queue_delays_and_drains():
    q = E.StaleGradientQueue([2, 0])
    for step in range(1, 5):
        q.push(1, [np.array([step])], step, 0.1)
        q.push(2, [np.array([step])], step, 0.1)
        released = [origin for _, origin, _ in q.due(1)]
        assert released == ([step - 2] if step > 2 else [])
        assert [origin for _, origin, _ in q.due(2)] == [step]
    assert [origin for _, origin, _ in q.drain(1)] == [3, 4]
    assert q.empty()
    assert q.mean_staleness()[1] == 0.0
    assert q.mean_staleness()[0] == pytest.approx(np.mean([2, 2, 1, 0]))


# ---------------------------------------------------------------- ensembles


def test_ensemble_of_one_is_final_head():
    rng = np.random.default_rng(0)
    logits = [rng.standard_normal((50, 4)) for _ in range(3)]
    y = rng.integers(0, 4, 50)
    res = E.accuracies(logits, y)
    assert res.ensemble(1) == res.head_accuracy[-1]


def test_identical_heads_ensemble_to_single_head():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((80, 5))
    y = rng.integers(0, 5, 80)
    res = E.accuracies([z, z, z], y)
    assert res.ensemble_accuracy == [res.head_accuracy[0]] * 3


def test_two_head_ensemble_against_brute_force():
    rng = np.random.default_rng(2)
    n, classes = 100, 4
    y = rng.integers(0, classes, n)
    random_head = rng.standard_normal((n, classes)) * 3
    perfect = np.full((n, classes), -2.0)
    perfect[np.arange(n), y] = 2.0
    correct = 0
    for i in range(n):
        pa = np.exp(random_head[i]) / np.exp(random_head[i]).sum()
        pb = np.exp(perfect[i]) / np.exp(perfect[i]).sum()
        avg = [(pa[c] + pb[c]) / 2 for c in range(classes)]
        correct += int(max(range(classes), key=lambda c: avg[c]) == y[i])
    res = E.accuracies([random_head, perfect], y)
    assert res.ensemble(2) == correct / n
    assert res.head_accuracy[0] <= res.ensemble(2) <= res.head_accuracy[1] == 1.0


def test_ensemble_averages_probabilities_not_logits():
    a = np.array([[10.0, 0.0, 9.0]])
    b = np.array([[0.0, 1.0, 1.0]])
    probs = (softmax(a) + softmax(b)) / 2
    assert E.ensemble_predictions([a, b], 2)[0] == probs.argmax()


def test_ensemble_size_is_validated(blobs):
    with pytest.raises(ValueError):
        E.ensemble_predictions([np.zeros((1, 2))], 2)
    with pytest.raises(ValueError):
        E.evaluate(mlp(), *blobs.test, ensemble_top_m=4)


# ---------------------------------------------------------------- budgets and settings


def test_settings_need_exactly_one_budget():
    with pytest.raises(ConfigurationError, match="budget"):
        E.TrainSettings()
    with pytest.raises(ConfigurationError, match="budget"):
        E.TrainSettings(steps=3, epochs=1)
    with pytest.raises(ConfigurationError, match="train.mode"):
        E.TrainSettings(steps=3, mode="async")


def test_epoch_budget_counts_full_batches(blobs):
    res = run(mlp(), RoutingPolicy("n_wise", 1), blobs, steps=None, epochs=2, batch_size=100)
    assert res.steps == 2 * (blobs.n_train // 100)


def test_logical_time_budget_uses_schedule_time(blobs):
    policy = RoutingPolicy("n_wise", 2)
    res = run(mlp(), policy, blobs, steps=None, logical_time=50)
    # 2-wise on 3 components: 4b + 1 slots
    assert res.steps == 12
    assert res.metrics.steps[-1].time_logical == 49
    assert [r.time_logical for r in res.metrics.steps[:3]] == [5, 9, 13]


def test_eval_every_adds_intermediate_rows(blobs):
    res = run(mlp(), RoutingPolicy("n_wise", 1), blobs, steps=30, eval_every=10)
    steps = sorted({r.step for r in res.metrics.evals})
    assert steps == [10, 20, 30]
    assert all(0 <= a <= 1 for r in res.metrics.evals for a in r.head_accuracy)


def test_mismatched_dataset_is_rejected(blobs):
    with pytest.raises(ConfigurationError, match="input"):
        run(mlp(dims=5), RoutingPolicy("n_wise", 1), blobs)


# ---------------------------------------------------------------- failures and timing


def test_worker_failure_aborts_and_flushes_partial_metrics(blobs, tmp_path, monkeypatch):
    original = ComponentPass.box
    calls = {"n": 0}

    def flaky(self, j, cotangent=None, **kw):
        if self.k == 1:
            calls["n"] += 1
            if calls["n"] > 12:
                raise RuntimeError("link down")
        return original(self, j, cotangent, **kw)

    monkeypatch.setattr(ComponentPass, "box", flaky)
    model = mlp()
    path = tmp_path / "m.csv"
    with pytest.raises(WorkerError, match="complete steps"):
        with MetricsWriter(path, model.n) as sink:
            run(model, RoutingPolicy("n_wise", 2), blobs, steps=40, mode="pipelined", on_row=sink)
    rows = read_metrics(path).steps
    assert 5 <= len(rows) < 40
    assert [r.step for r in rows] == list(range(1, len(rows) + 1))


def test_wall_clock_proxy_tracks_schedule_ratio(blobs):
    a, b, delay = 3, 20, 0.02
    elapsed = {}
    for policy in (RoutingPolicy("n_wise", 1), RoutingPolicy("end_to_end")):
        t0 = time.perf_counter()
        res = run(mlp(n=a, width=8), policy, blobs, steps=b, batch_size=16, mode="pipelined",
                  phase_delay=delay, wall_clock=True)
        elapsed[policy.kind + str(policy.n)] = time.perf_counter() - t0
        walls = [r.time_wall for r in res.metrics.steps]
        assert walls == sorted(walls) and walls[0] > 0
    ratio = elapsed["end_to_end1"] / elapsed["n_wise1"]
    expected = a * 2 * b / (2 * b + a - 1)
    assert abs(ratio / expected - 1) < 0.2


def test_time_wall_is_zero_unless_requested(blobs):
    res = run(mlp(), RoutingPolicy("n_wise", 1), blobs, steps=5)
    assert all(r.time_wall == 0.0 for r in res.metrics.steps)
