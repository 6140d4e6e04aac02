import json
import math

import numpy as np
import pytest

from tvase import metrics
from tvase import stft as S


def test_erle_oracle_cases():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(1600)
    labels = np.ones(10, bool)
    assert metrics.erle(y, y, labels) == 0.0
    assert metrics.erle(y, np.zeros_like(y), labels) == metrics.ERLE_CAP_DB
    one = np.ones(1600)
    assert metrics.erle(one, np.full(1600, math.sqrt(0.001)), labels) == pytest.approx(30.0, abs=1e-3)


def test_erle_uses_only_labelled_frames():
    y = np.concatenate([np.ones(160), 100 * np.ones(160)])
    s = np.concatenate([0.1 * np.ones(160), 100 * np.ones(160)])
    assert metrics.erle(y, s, [True, False]) == pytest.approx(20.0)
    assert metrics.erle(y, s, np.repeat([True, False], 160)) == pytest.approx(20.0)
    with pytest.raises(metrics.MetricError):
        metrics.erle(y, s, [False, False])
    with pytest.raises(metrics.MetricError):
        metrics.erle(y, s[:100], [True])


def test_compressed_mse():
    rng = np.random.default_rng(1)
    ref = S.stft(rng.standard_normal(4000))
    assert metrics.compressed_mse(ref, ref, project=False) == 0.0
    est = ref + 0.1 * rng.standard_normal(ref.shape)
    assert metrics.compressed_mse(est, ref, p=1.0, project=False) == pytest.approx(np.mean((est - ref) ** 2))
    perm = rng.permutation(ref.shape[1])
    a = metrics.compressed_mse(est, ref, project=False)
    assert metrics.compressed_mse(est[:, perm], ref[:, perm], project=False) == pytest.approx(a)
    assert metrics.compressed_mse(est, ref) >= 0


def test_measure_levels_errors():
    with pytest.raises(metrics.MetricError):
        metrics.measure_levels(np.zeros(1600), np.ones(1600))
    with pytest.raises(metrics.MetricError):
        metrics.measure_levels(np.ones(1600), np.zeros(1600))


def test_estimate_delay():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(20000)
    echo = np.concatenate([np.zeros(1600), x[:-1600]])
    assert metrics.estimate_delay(x, echo, 4000, 4000) == 1600
    assert metrics.estimate_delay(x, 0.3 * echo, 4000, 4000, max_lag=2000) == 1600
    with pytest.raises(metrics.MetricError):
        metrics.estimate_delay(x, np.zeros_like(x), 4000, 4000)


def test_estimate_delay_reverberant():
    from tvase.scenario.rir import simulate_rir

    rng = np.random.default_rng(3)
    x = rng.standard_normal(32000)
    for seed in range(3):
        g = np.random.default_rng(seed)
        mic = (g.uniform(1, 6), g.uniform(1, 5), 1.75)
        h = simulate_rir((7.0, 6.0, 3.5), (3.5, 3.0, 1.75), mic, 0.3)
        direct = int(np.argmax(np.abs(h)))
        echo = np.convolve(np.concatenate([np.zeros(1600), x[:-1600]]), h)[: len(x)]
        got = metrics.estimate_delay(x, echo, 16000, 8000, max_lag=4000)
        assert abs(got - (1600 + direct)) <= 16


def test_aggregate_matches_independent_recomputation():
    rows = [{"clip_id": f"c{i}", "erle_db": v, "erle_frames": 3, "compressed_mse": m}
            for i, (v, m) in enumerate([(10.0, 0.1), (20.0, 0.3), (None, 0.2), (33.0, None)])]
    rep = metrics.aggregate(rows)
    erles = [10.0, 20.0, 33.0]
    mu = sum(erles) / 3
    assert rep.erle_mean == pytest.approx(mu)
    assert rep.erle_std == pytest.approx(math.sqrt(sum((e - mu) ** 2 for e in erles) / 3))
    assert rep.mse_mean == pytest.approx(0.2)
    assert rep.clips == 4 and rep.erle_clips == 3
    back = metrics.ErleReport.from_json(rep.to_json())
    assert back == rep
    assert json.loads(rep.to_json())["erle_clips"] == 3
