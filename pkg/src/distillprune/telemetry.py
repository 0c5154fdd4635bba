"""Device power sampling and energy integration.

A sampler polls a power reader on a fixed interval in a background thread,
stamping each sample with the current phase (train/inference). When no power
counter exists on the host, sampling degrades to an empty log with a warning
so runs never depend on hardware. A file-replay reader consumes the same CSV
format the sampler writes, which keeps the energy math testable anywhere.
"""

from __future__ import annotations

import csv
import logging
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

log = logging.getLogger(__name__)

PHASES = ("train", "inference")


@dataclass(frozen=True)
class PowerSample:
    timestamp_s: float
    power_watts: float
    phase: str = "train"


@dataclass
class PowerLog:
    """Ordered power samples plus the device they came from.

    ``truncated`` marks a log whose source disappeared mid-run (end of
    stream), which is recorded rather than raised.
    """

    samples: List[PowerSample] = field(default_factory=list)
    source: str = "none"
    truncated: bool = False

    def append(self, sample: PowerSample) -> None:
        if sample.power_watts < 0:
            raise ValueError(f"power must be non-negative, got {sample.power_watts}")
        if self.samples and sample.timestamp_s <= self.samples[-1].timestamp_s:
            raise ValueError("timestamps must be strictly increasing")
        self.samples.append(sample)

    def phases(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(s.phase for s in self.samples))

    @classmethod
    def from_rows(cls, rows: Sequence[Tuple[float, float, str]], source: str = "replay") -> "PowerLog":
        plog = cls(source=source)
        for t, w, phase in rows:
            plog.append(PowerSample(float(t), float(w), phase))
        return plog

    def save(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["timestamp_s", "power_watts", "phase"])
            for s in self.samples:
                w.writerow([repr(s.timestamp_s), repr(s.power_watts), s.phase])


def read_power_log(path, source: str = "replay") -> PowerLog:
    """Replay a power CSV (timestamp_s, power_watts, phase) bit-exactly."""
    plog = PowerLog(source=source)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "timestamp_s" not in reader.fieldnames:
            raise ValueError(f"{path} is not a power log (missing timestamp_s column)")
        for row in reader:
            plog.append(
                PowerSample(
                    float(row["timestamp_s"]),
                    float(row["power_watts"]),
                    row.get("phase") or "train",
                )
            )
    return plog


def energy_joules(plog: PowerLog, phase: Optional[str] = None) -> float:
    """Trapezoidal integral of power over time, optionally for one phase.

    Each inter-sample interval belongs to the phase of its left endpoint, so
    per-phase energies sum exactly to the whole-log energy.
    """
    total = 0.0
    for a, b in zip(plog.samples, plog.samples[1:]):
        if phase is not None and a.phase != phase:
            continue
        total += 0.5 * (a.power_watts + b.power_watts) * (b.timestamp_s - a.timestamp_s)
    return total


class NvidiaSmiReader:
    """Polls instantaneous board power through nvidia-smi."""

    def __init__(self, device: int = 0):
        self.device = device

    def describe(self) -> str:
        return f"nvidia-smi:{self.device}"

    def read(self) -> float:
        out = subprocess.run(
            [
                "nvidia-smi",
                f"--id={self.device}",
                "--query-gpu=power.draw",
                "--format=csv,noheader,nounits",
            ],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode != 0:
            raise RuntimeError(f"nvidia-smi failed: {out.stderr.strip()}")
        return float(out.stdout.strip().splitlines()[0])


def probe_power_reader(device: int = 0) -> Optional[NvidiaSmiReader]:
    """Return a working GPU power reader, or None when the host has none."""
    reader = NvidiaSmiReader(device)
    try:
        reader.read()
        return reader
    except (OSError, RuntimeError, ValueError, subprocess.TimeoutExpired, IndexError):
        return None


class PowerSampler:
    """Background sampler appending one reading per interval under a lock.

    A vanished device truncates the log instead of raising; a missing reader
    yields an empty log plus a capability warning, and the run continues.
    """

    def __init__(
        self,
        reader=None,
        interval_ms: int = 1000,
        clock: Callable[[], float] = time.monotonic,
    ):
        if interval_ms <= 0:
            raise ValueError("interval_ms must be positive")
        self.reader = reader
        self.interval_s = interval_ms / 1000.0
        self.clock = clock
        self.log = PowerLog(source=reader.describe() if reader else "none")
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._phase = "train"
        self._thread: Optional[threading.Thread] = None
        if reader is None:
            log.warning("no device power counter available; power log will be empty")

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        with self._lock:
            self._phase = phase

    def start(self) -> "PowerSampler":
        if self.reader is None or self._thread is not None:
            return self
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                watts = self.reader.read()
            except Exception:
                with self._lock:
                    self.log.truncated = True
                log.warning("power source %s disappeared; log truncated", self.log.source)
                return
            now = self.clock()
            with self._lock:
                if not self.log.samples or now > self.log.samples[-1].timestamp_s:
                    self.log.append(PowerSample(now, max(0.0, watts), self._phase))
            self._stop.wait(self.interval_s)

    def peek(self) -> PowerLog:
        """Consistent snapshot of the log so far; sampling continues."""
        with self._lock:
            return PowerLog(
                samples=list(self.log.samples),
                source=self.log.source,
                truncated=self.log.truncated,
            )

    def stop(self) -> PowerLog:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5 + 2 * self.interval_s)
            self._thread = None
        with self._lock:
            return self.log


def sample_power(device: int = 0, interval_ms: int = 1000) -> PowerSampler:
    """Start sampling the device power counter; stop() returns the log."""
    return PowerSampler(probe_power_reader(device), interval_ms=interval_ms).start()
