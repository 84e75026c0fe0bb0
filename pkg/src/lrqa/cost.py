"""Wall-clock, energy and CO2 accounting for training runs.

Energy comes either from a fixed average power draw or from a sampler
polled on a background thread and integrated with the trapezoid rule.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

DEFAULT_INTENSITY = 294.32  # g CO2 / kWh, 317.87 g over 1.08 kWh
JOULES_PER_KWH = 3.6e6


def _nonneg(**values) -> None:
    for name, v in values.items():
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")


def estimate_energy(duration_s: float, avg_power_watts: float) -> float:
    """kWh drawn at a constant ``avg_power_watts`` over ``duration_s`` seconds."""
    _nonneg(duration_s=duration_s, avg_power_watts=avg_power_watts)
    return avg_power_watts * duration_s / JOULES_PER_KWH


def co2_from_energy(kwh: float, intensity_g_per_kwh: float = DEFAULT_INTENSITY) -> float:
    _nonneg(kwh=kwh, intensity_g_per_kwh=intensity_g_per_kwh)
    return kwh * intensity_g_per_kwh


def integrate_samples(times: list[float], watts: list[float]) -> float:
    """Trapezoid integral of power samples, in joules."""
    total = 0.0
    for i in range(1, len(times)):
        total += 0.5 * (watts[i] + watts[i - 1]) * (times[i] - times[i - 1])
    return total


@dataclass
class CostReport:
    duration: float
    energy: float
    co2: float
    intensity: float
    power_model: dict = field(default_factory=dict)
    label: str = ""
    completed: bool = True

    @classmethod
    def build(cls, duration: float, energy: float, intensity: float, power_model: dict,
              label: str = "", completed: bool = True) -> CostReport:
        return cls(duration, energy, energy * intensity, intensity, power_model, label, completed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1) + "\n"

    @classmethod
    def from_json(cls, raw: str) -> CostReport:
        return cls(**json.loads(raw))

    def table_row(self) -> str:
        return f"{self.label or 'run':<24} {self.duration:>10,.0f} {self.energy:>12.2f} {self.co2:>10.2f}"


TABLE_HEADER = f"{'model':<24} {'Time (s)':>10} {'Energy (kWh)':>12} {'CO2 (g)':>10}"


def cost_table(reports: list[CostReport]) -> str:
    return "\n".join([TABLE_HEADER] + [r.table_row() for r in reports]) + "\n"


class TrackedRunError(RuntimeError):
    """A tracked run raised; ``cost_report`` covers the time spent until the failure."""

    def __init__(self, original: BaseException, report: CostReport):
        super().__init__(f"tracked run failed: {original!r}")
        self.original = original
        self.cost_report = report


class Tracker:
    """Measure one run.  Give either ``avg_watts`` or a thread-safe ``sampler``.

    ``sampler()`` returns the instantaneous draw in watts; it is polled every
    ``interval`` seconds plus once at start and once at stop.
    """

    def __init__(self, avg_watts: float | None = None, sampler: Callable[[], float] | None = None,
                 interval: float = 0.1, intensity: float = DEFAULT_INTENSITY, label: str = "",
                 clock: Callable[[], float] = time.perf_counter):
        if (avg_watts is None) == (sampler is None):
            raise ValueError("configure exactly one power model: avg_watts or sampler")
        if avg_watts is not None:
            _nonneg(avg_watts=avg_watts)
        _nonneg(intensity=intensity)
        self.avg_watts = avg_watts
        self.sampler = sampler
        self.interval = interval
        self.intensity = intensity
        self.label = label
        self.clock = clock
        self.times: list[float] = []
        self.samples: list[float] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

    def _sample(self) -> None:
        t, w = self.clock(), float(self.sampler())
        with self._lock:
            self.times.append(t)
            self.samples.append(w)

    def _poll(self) -> None:
        while not self._stop.wait(self.interval):
            self._sample()

    def start(self) -> None:
        self._t0 = self.clock()
        if self.sampler is not None:
            self._sample()
            self._stop.clear()
            self._thread = threading.Thread(target=self._poll, daemon=True)
            self._thread.start()

    def stop(self, completed: bool = True) -> CostReport:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
            self._sample()
        duration = self.clock() - self._t0
        if self.sampler is None:
            energy = estimate_energy(duration, self.avg_watts)
            model = {"avg_power_watts": self.avg_watts, "kind": "fixed (estimated)"}
        else:
            with self._lock:
                joules = integrate_samples(self.times, self.samples)
                n = len(self.samples)
            energy = joules / JOULES_PER_KWH
            model = {"kind": "sampled", "samples": n, "interval_s": self.interval}
        return CostReport.build(duration, energy, self.intensity, model, self.label, completed)


def track(run: Callable[[], Any], avg_watts: float | None = None, sampler: Callable[[], float] | None = None,
          interval: float = 0.1, intensity: float = DEFAULT_INTENSITY, label: str = "") -> tuple[Any, CostReport]:
    tracker = Tracker(avg_watts, sampler, interval, intensity, label)
    tracker.start()
    try:
        result = run()
    except BaseException as exc:
        raise TrackedRunError(exc, tracker.stop(completed=False)) from exc
    return result, tracker.stop()


def command_sampler(command: str) -> Callable[[], float]:
    """Sampler that runs ``command`` and parses watts from its first output line."""
    argv = shlex.split(command)

    def sample() -> float:
        out = subprocess.run(argv, capture_output=True, text=True, check=True).stdout
        return float(out.strip().splitlines()[0])

    return sample


def tracker_from_config(cost_cfg: dict, label: str = "") -> Tracker:
    """Build a tracker from ``power.avg_watts`` / ``power.sampler_cmd`` / ``carbon.intensity_g_per_kwh``."""
    power = cost_cfg.get("power", {})
    intensity = float(cost_cfg.get("carbon", {}).get("intensity_g_per_kwh", DEFAULT_INTENSITY))
    if power.get("sampler_cmd"):
        return Tracker(sampler=command_sampler(power["sampler_cmd"]),
                       interval=float(power.get("interval_s", 1.0)), intensity=intensity, label=label)
    return Tracker(avg_watts=float(power.get("avg_watts", 250.0)), intensity=intensity, label=label)
