import csv
import itertools
import sys
import threading
import time

import numpy as np
import pytest
from scipy.integrate import trapezoid

from lrqa.cost import (
    DEFAULT_INTENSITY,
    TABLE_HEADER,
    CostReport,
    TrackedRunError,
    Tracker,
    co2_from_energy,
    command_sampler,
    cost_table,
    estimate_energy,
    integrate_samples,
    track,
    tracker_from_config,
)

from _support import TESTDATA


def reference_rows():
    with open(TESTDATA / "cost_table.csv", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_intensity_derives_from_reference_row():
    ref = reference_rows()[0]
    assert float(ref["co2_g"]) / float(ref["energy_kwh"]) == pytest.approx(DEFAULT_INTENSITY, abs=0.005)


@pytest.mark.parametrize("row", reference_rows()[1:], ids=lambda r: r["model"])
def test_table_co2_reproduced_from_energy(row):
    predicted = co2_from_energy(float(row["energy_kwh"]))
    assert abs(predicted - float(row["co2_g"])) / float(row["co2_g"]) < 0.015


def test_energy_arithmetic():
    assert estimate_energy(3600, 1000) == 1.0
    assert estimate_energy(0, 300) == 0.0
    with pytest.raises(ValueError):
        estimate_energy(-1, 10)
    with pytest.raises(ValueError):
        co2_from_energy(1.0, -3)


def test_trapezoid_integration():
    assert integrate_samples([0, 1, 3], [10, 20, 20]) == pytest.approx(15 + 40)
    assert integrate_samples([5], [100]) == 0.0


def fake_clock(times):
    it = iter(times)
    return lambda: next(it)


def test_fixed_power_tracker_with_fake_clock():
    t = Tracker(avg_watts=360.0, intensity=100.0, label="x", clock=fake_clock([0.0, 10_000.0]))
    t.start()
    r = t.stop()
    assert r.duration == 10_000.0 and r.energy == pytest.approx(1.0) and r.co2 == pytest.approx(100.0)
    assert r.power_model["kind"] == "fixed (estimated)" and r.completed


def test_sampled_tracker_integrates_samples():
    lock = threading.Lock()
    tick = itertools.count()

    def clock():
        with lock:
            return float(next(tick))

    t = Tracker(sampler=lambda: 3.6e6, interval=0.001, clock=clock)
    t.start()
    time.sleep(0.02)
    r = t.stop()
    n = r.power_model["samples"]
    assert n >= 2
    # samples taken at consecutive ticks of a constant 3.6 MW draw
    assert r.energy == pytest.approx(t.times[-1] - t.times[0])


def test_tracker_needs_exactly_one_power_model():
    with pytest.raises(ValueError):
        Tracker()
    with pytest.raises(ValueError):
        Tracker(avg_watts=1.0, sampler=lambda: 1.0)


def test_track_reports_failed_runs():
    def bad():
        raise KeyError("oops")

    with pytest.raises(TrackedRunError) as err:
        track(bad, avg_watts=100.0, label="bad")
    assert err.value.cost_report.completed is False
    assert isinstance(err.value.original, KeyError)
    result, report = track(lambda: 42, avg_watts=100.0)
    assert result == 42 and report.completed


def test_report_json_round_trip_and_table():
    r = CostReport.build(3816, 0.57, DEFAULT_INTENSITY, {"avg_power_watts": 537.7}, "FrALBERT")
    assert CostReport.from_json(r.to_json()) == r
    table = cost_table([r])
    assert table.splitlines()[0] == TABLE_HEADER
    assert table.splitlines()[1].split() == ["FrALBERT", "3,816", "0.57", "167.76"]


def test_command_sampler_and_config():
    sample = command_sampler(f"{sys.executable} -c \"print(123.5)\"")
    assert sample() == 123.5
    t = tracker_from_config({"power": {"sampler_cmd": f"{sys.executable} -c \"print(1)\"", "interval_s": 5},
                             "carbon": {"intensity_g_per_kwh": 50}})
    assert t.sampler is not None and t.interval == 5 and t.intensity == 50
    assert tracker_from_config({}).avg_watts == 250.0


# ---------------------------------------------------------------- documented examples


def test_documented_energy_and_co2_values():
    assert round(estimate_energy(7207, 539.5), 2) == 1.08
    assert round(co2_from_energy(1.08), 2) == 317.87
    assert round(co2_from_energy(0.57), 2) == 167.76
    assert co2_from_energy(0.0) == 0.0


def test_fixed_power_matches_wall_time():
    _, r = track(lambda: time.sleep(0.05), avg_watts=100.0)
    assert r.energy == pytest.approx(100.0 * r.duration / 3.6e6, rel=1e-12)


def test_sequential_runs_add_up_to_outer_timer():
    t0 = time.perf_counter()
    _, a = track(lambda: time.sleep(0.15), avg_watts=200.0)
    _, b = track(lambda: time.sleep(0.25), avg_watts=200.0)
    outer = time.perf_counter() - t0
    assert abs(a.duration + b.duration - outer) / outer < 0.01
    assert abs(a.energy + b.energy - estimate_energy(outer, 200.0)) / estimate_energy(outer, 200.0) < 0.01


def test_triangle_power_profile_integrates_within_one_percent():
    start = time.perf_counter()
    span = 0.4

    def triangle():
        x = min(max((time.perf_counter() - start) / span, 0.0), 1.0)
        return 100.0 + 400.0 * (1 - abs(2 * x - 1))

    t = Tracker(sampler=triangle, interval=0.005)
    t.start()
    time.sleep(span)
    r = t.stop()
    t0, t1 = t.times[0] - start, t.times[-1] - start
    grid = np.linspace(t0, t1, 20_001)
    exact = trapezoid([100.0 + 400.0 * (1 - abs(2 * min(max(g / span, 0), 1) - 1)) for g in grid], grid)
    assert abs(r.energy * 3.6e6 - exact) / exact < 0.01
