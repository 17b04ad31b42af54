from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionid.errors import ConfigError, DataError, ShapeError
from motionid.evaluation import (AccuracyGrid, CellResult, EvalProtocol, accuracy_grid, bootstrap_ci,
                                 grid_delta, read_grid_csv, sequence_accuracy)
from motionid.preprocessing import FeatureSequence


class MeanModel:
    """Embeds a window as the mean of its rows (2 features)."""

    def __init__(self, window_len=3):
        self.config = SimpleNamespace(window_len=window_len, output_dim=2, mode="embedding")

    def embed(self, windows):
        return np.asarray(windows).mean(axis=1)


def _constant_users(n, minutes=(10, 30), fps=1.0):
    """Each user sits on its own fixed point: a perfect encoder."""
    data = {}
    for i in range(n):
        u = f"u{i:02d}"
        point = [np.cos(2 * np.pi * i / n), np.sin(2 * np.pi * i / n)]
        data[u] = tuple(FeatureSequence(u, s, fps, np.tile(point, (int(m * 60 * fps), 1)))
                        for s, m in zip(("s1", "s2"), minutes))
    return data


def _noisy_users(n, sigma, minutes=(10, 3), fps=2.0, seed=0):
    rng = np.random.default_rng(seed)
    data = {}
    for i in range(n):
        u = f"u{i:02d}"
        center = [np.cos(2 * np.pi * i / n), np.sin(2 * np.pi * i / n)]
        data[u] = tuple(FeatureSequence(u, s, fps, center + rng.normal(0, sigma, size=(int(m * 60 * fps), 2)))
                        for s, m in zip(("s1", "s2"), minutes))
    return data


def test_oracle_encoder_is_perfect():
    data = _constant_users(4, minutes=(10, 6))
    protocol = EvalProtocol(enrollment_minutes=(1, 5, "all"), use_minutes=(1, 5), repetitions=2, k=5)
    grid = accuracy_grid(MeanModel(), data, protocol)
    assert all(acc == 1.0 for cell in grid.cells.values() for acc in cell.accuracies)


def test_trial_count_for_thirty_minute_session():
    data = _constant_users(2, minutes=(10, 30))
    protocol = EvalProtocol(enrollment_minutes=(1,), use_minutes=(5,), repetitions=1, k=3)
    acc, log = sequence_accuracy(MeanModel(), {u: d[0] for u, d in data.items()},
                                 {u: d[1] for u, d in data.items()}, 1, 5, protocol, np.random.default_rng(0))
    per_user = {u: sum(t.user == u for t in log.trials) for u in data}
    assert per_user == {"u00": 1501, "u01": 1501} and acc == 1.0
    starts = [t.start for t in log.trials if t.user == "u00"]
    assert starts == list(range(1501))


def test_trial_count_follows_step_seconds_and_fps():
    data = _constant_users(2, minutes=(2, 3), fps=4.0)
    protocol = EvalProtocol(enrollment_minutes=("all",), use_minutes=(1, 2), repetitions=1, k=3)
    grid = accuracy_grid(MeanModel(), data, protocol)
    for t_use in (1, 2):
        expected = 2 * ((3 - t_use) * 60 + 1)
        assert grid.cells[("all", t_use)].trials == [expected]


def test_grid_repetitions_and_mean():
    data = _noisy_users(4, sigma=1.5, minutes=(5, 2))
    protocol = EvalProtocol(enrollment_minutes=(1, "all"), use_minutes=(0.5,), repetitions=5, k=5)
    grid = accuracy_grid(MeanModel(), data, protocol)
    cell = grid.cells[(1, 0.5)]
    assert len(cell.accuracies) == 5 and len(cell.trials) == 5
    assert cell.mean == sum(cell.accuracies) / 5
    assert grid.mean(1, 0.5) == cell.mean
    assert len(set(grid.cells[("all", 0.5)].accuracies)) == 1
    assert all(0.0 <= a <= 1.0 for c in grid.cells.values() for a in c.accuracies)


def test_fixed_seed_reproduces_grid_bit_exactly(tmp_path):
    data = _noisy_users(3, sigma=8.0, minutes=(4, 2))
    protocol = EvalProtocol(enrollment_minutes=(1, 2), use_minutes=(0.5, 1), repetitions=3, k=5, seed=11)
    a = accuracy_grid(MeanModel(), data, protocol)
    b = accuracy_grid(MeanModel(), data, protocol)
    assert a.to_csv() == b.to_csv() and a.summary_csv() == b.summary_csv()
    other = accuracy_grid(MeanModel(), data, EvalProtocol(enrollment_minutes=(1, 2), use_minutes=(0.5, 1),
                                                          repetitions=3, k=5, seed=12))
    assert other.to_csv() != a.to_csv()
    path = tmp_path / "grid.csv"
    path.write_text(a.to_csv())
    back = read_grid_csv(path)
    assert back.to_csv() == a.to_csv()


def test_enrollment_slices_are_contained_and_random():
    data = _constant_users(2, minutes=(10, 3))
    protocol = EvalProtocol(enrollment_minutes=(2,), use_minutes=(1,), k=3)
    starts = set()
    for seed in range(10):
        _, log = sequence_accuracy(MeanModel(), {u: d[0] for u, d in data.items()},
                                   {u: d[1] for u, d in data.items()}, 2, 1, protocol,
                                   np.random.default_rng(seed))
        for s in log.enrollment_starts.values():
            assert 0 <= s <= 600 - 120
            starts.add(s)
    assert len(starts) > 5


def test_short_sessions_are_excluded_and_logged(caplog):
    data = _constant_users(3, minutes=(10, 3))
    u = "u02"
    data[u] = (data[u][0].slice(0, 30), data[u][1])
    protocol = EvalProtocol(enrollment_minutes=(1,), use_minutes=(1,), k=3)
    _, log = sequence_accuracy(MeanModel(), {x: d[0] for x, d in data.items()},
                               {x: d[1] for x, d in data.items()}, 1, 1, protocol, np.random.default_rng(0))
    assert [e[0] for e in log.excluded] == [u]
    assert {t.user for t in log.trials} == {"u00", "u01"}
    assert "excluding user u02" in caplog.text


def test_same_session_is_rejected():
    data = _constant_users(2)
    leaky = {u: (d[0], FeatureSequence(u, "s1", 1.0, d[1].rows)) for u, d in data.items()}
    with pytest.raises(DataError):
        accuracy_grid(MeanModel(), leaky, EvalProtocol(enrollment_minutes=(1,), use_minutes=(1,)))


def test_permuted_labels_hit_chance_rate():
    # a perfect encoder plus a fresh random relabeling per trial is correct with probability 1/n
    data = _constant_users(5, minutes=(2, 30))
    protocol = EvalProtocol(enrollment_minutes=("all",), use_minutes=(1,), repetitions=1, k=3,
                            permute_labels=True)
    grid = accuracy_grid(MeanModel(), data, protocol)
    cell = grid.cells[("all", 1)]
    n = cell.trials[0]
    assert n == 5 * 1741
    sd = np.sqrt(0.2 * 0.8 / n)
    assert abs(cell.accuracies[0] - 0.2) < 4 * sd


def test_more_enrollment_helps_on_noisy_clusters():
    better = 0
    runs = 10
    for seed in range(runs):
        data = _noisy_users(6, sigma=2.0, minutes=(10, 2), seed=seed)
        protocol = EvalProtocol(enrollment_minutes=(1, 10), use_minutes=(0.25,), repetitions=2, k=20,
                                seed=seed)
        grid = accuracy_grid(MeanModel(), data, protocol)
        better += grid.mean(10, 0.25) >= grid.mean(1, 0.25)
    assert better >= 0.9 * runs


def test_bootstrap_examples():
    rng = np.random.default_rng(0)
    assert bootstrap_ci(np.ones(50), rng=rng) == (1.0, 1.0)
    assert bootstrap_ci(np.zeros(50), rng=rng) == (0.0, 0.0)
    low, high = bootstrap_ci(np.r_[np.ones(500), np.zeros(500)], rng=np.random.default_rng(1))
    # normal-approximation oracle: 0.5 +- 1.96 * sqrt(0.25 / 1000) = 0.5 +- 0.031
    half = 1.96 * np.sqrt(0.25 / 1000)
    assert low == pytest.approx(0.5 - half, abs=0.008) and high == pytest.approx(0.5 + half, abs=0.008)
    assert 0.40 <= low and high <= 0.60
    with pytest.raises(DataError):
        bootstrap_ci([])


@settings(max_examples=30, deadline=None)
@given(bits=st.lists(st.booleans(), min_size=1, max_size=200), seed=st.integers(0, 1000))
def test_bootstrap_interval_brackets_the_range(bits, seed):
    low, high = bootstrap_ci(bits, resamples=200, rng=np.random.default_rng(seed))
    assert 0.0 <= low <= high <= 1.0
    if all(bits) or not any(bits):
        assert low == high == float(bits[0])


def _grid(values, enr=(1, 5), use=(1,)):
    cells = {}
    it = iter(values)
    for e in enr:
        for u in use:
            cells[(e, u)] = CellResult([next(it)], [10])
    return AccuracyGrid(enr, use, cells)


def test_grid_delta():
    a = _grid([1.0, 0.5])
    b = _grid([0.9, 0.5])
    delta = grid_delta(a, b)
    assert delta.deltas[(1, 1)] == pytest.approx(0.1, abs=1e-15) and delta.deltas[(5, 1)] == 0.0
    assert all(v == 0.0 for v in grid_delta(a, a).deltas.values())
    with pytest.raises(ShapeError):
        grid_delta(a, _grid([1.0, 1.0], enr=(1, 10)))
    assert delta.to_csv().splitlines()[0] == "t_enr,t_use,delta"


def test_protocol_validation_and_presets():
    with pytest.raises(ConfigError):
        EvalProtocol(enrollment_minutes=(0,))
    with pytest.raises(ConfigError):
        EvalProtocol(use_minutes=("all",))
    with pytest.raises(ConfigError):
        EvalProtocol(repetitions=0)
    with pytest.raises(ConfigError):
        EvalProtocol.from_kv({"bogus": "1"})
    p = EvalProtocol.from_kv({"enrollment_minutes": "1, 10, all", "use_minutes": "0.5", "k": "7"})
    assert p.enrollment_minutes == (1, 10, "all") and p.use_minutes == (0.5,) and p.k == 7
    cross = EvalProtocol.cross_dataset()
    assert cross.window_len == 45 and cross.k == 10
    default = EvalProtocol()
    assert default.repetitions == 5 and default.step_seconds == 1.0 and default.k == 50
