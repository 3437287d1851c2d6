"""Household consumption series: synthetic generation, CSV I/O, windowing, billing."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError, FormatError, InvalidArgument, ParseError

DEFAULT_WINDOW = 2
CSV_HEADER = ["timestamp", "watts", "occupancy"]


@dataclass(eq=False)
class LoadProfile:
    household_id: str
    readings: np.ndarray
    occupancy: np.ndarray
    sampling_period_s: int = 1

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        self.occupancy = np.asarray(self.occupancy, dtype=np.int8)
        if self.readings.ndim != 1 or self.readings.shape != self.occupancy.shape:
            raise InvalidArgument("readings and occupancy must be 1-D and of equal length")
        if self.sampling_period_s < 1:
            raise InvalidArgument("sampling_period_s must be >= 1")
        if np.any(self.readings < 0) or not np.all(np.isfinite(self.readings)):
            raise DomainError("readings must be finite and non-negative")
        if np.any((self.occupancy != 0) & (self.occupancy != 1)):
            raise DomainError("occupancy labels must be 0 or 1")

    def __len__(self):
        return len(self.readings)

    def __eq__(self, other):
        if not isinstance(other, LoadProfile):
            return NotImplemented
        return (
            self.household_id == other.household_id
            and self.sampling_period_s == other.sampling_period_s
            and np.array_equal(self.readings, other.readings)
            and np.array_equal(self.occupancy, other.occupancy)
        )

    def slice(self, start: int, stop: int) -> "LoadProfile":
        return LoadProfile(
            self.household_id,
            self.readings[start:stop].copy(),
            self.occupancy[start:stop].copy(),
            self.sampling_period_s,
        )


@dataclass(frozen=True)
class BillingWindow:
    window_len_samples: int = DEFAULT_WINDOW
    start_index: int = 0

    def __post_init__(self):
        if self.window_len_samples < 2:
            raise InvalidArgument("billing window must span at least 2 samples")


@dataclass(frozen=True)
class Tariff:
    """Price schedule. ``rates`` are per kWh and cycle when shorter than the profile."""

    resolution_samples: int
    rates: tuple
    window_len_samples: int = DEFAULT_WINDOW

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if not self.rates:
            raise InvalidArgument("tariff needs at least one rate")
        if any(r < 0 for r in self.rates):
            raise InvalidArgument("tariff rates must be non-negative")
        if self.window_len_samples < 2:
            raise InvalidArgument("billing window must span at least 2 samples")
        if self.resolution_samples <= 0 or self.resolution_samples % self.window_len_samples:
            raise InvalidArgument(
                f"tariff resolution {self.resolution_samples} is not a positive multiple "
                f"of the billing window {self.window_len_samples}"
            )

    @classmethod
    def flat(cls, rate: float, window_len_samples: int = DEFAULT_WINDOW) -> "Tariff":
        return cls(window_len_samples, (rate,), window_len_samples)


@dataclass(frozen=True)
class GeneratorParams:
    base_load_w: float = 150.0
    # occupant-driven appliances, (power_w, mean_duration_s)
    appliance_pool: tuple = (
        (600.0, 30.0),
        (300.0, 60.0),
        (150.0, 90.0),
        (80.0, 120.0),
        (40.0, 300.0),
    )
    occupied_event_rate: float = 120.0
    unoccupied_event_rate: float = 2.0
    occupancy_segment_mean_s: float = 5400.0
    noise_std_w: float = 30.0
    seed: int = 0
    # thermostatic loads that cycle regardless of occupancy
    background_pool: tuple = (
        (2000.0, 1800.0),
        (1200.0, 2400.0),
        (150.0, 900.0),
    )
    background_event_rate: float = 1.5

    def __post_init__(self):
        for name in ("appliance_pool", "background_pool"):
            pool = tuple((float(p), float(d)) for p, d in getattr(self, name))
            object.__setattr__(self, name, pool)
        if self.base_load_w < 0 or self.noise_std_w < 0:
            raise InvalidArgument("base load and noise std must be non-negative")
        if min(self.occupied_event_rate, self.unoccupied_event_rate, self.background_event_rate) < 0:
            raise InvalidArgument("event rates must be non-negative")
        if self.occupied_event_rate < self.unoccupied_event_rate:
            raise InvalidArgument("occupied_event_rate must be >= unoccupied_event_rate")
        if self.occupancy_segment_mean_s <= 0:
            raise InvalidArgument("occupancy_segment_mean_s must be positive")
        for power, duration in self.appliance_pool + self.background_pool:
            if power < 0 or duration <= 0:
                raise InvalidArgument("appliance power must be >= 0 and duration > 0")

    @property
    def onoff_threshold_w(self) -> float:
        return self.base_load_w + 3.0 * self.noise_std_w

    def with_seed(self, seed: int) -> "GeneratorParams":
        return dataclasses.replace(self, seed=seed)


def _occupancy_track(rng: np.random.Generator, n: int, mean_dwell: float) -> np.ndarray:
    occ = np.empty(n, dtype=np.int8)
    state = int(rng.integers(2))
    t = 0
    while t < n:
        dwell = max(1, int(round(rng.exponential(mean_dwell))))
        occ[t : t + dwell] = state
        t += dwell
        state ^= 1
    return occ


def generate_profile(params: GeneratorParams, duration_s: int, household_id: str = "hh-0") -> LoadProfile:
    """Synthesize a 1 Hz trace: base load plus Poisson appliance rectangles plus sensor noise.

    Occupancy alternates with exponential dwell times. Occupant appliances
    switch on at ``occupied_event_rate`` or ``unoccupied_event_rate`` events
    per hour depending on the state at the arrival instant; background loads
    switch on at ``background_event_rate`` whatever the state.
    """
    if duration_s <= 0:
        raise InvalidArgument("duration_s must be positive")
    n = int(duration_s)
    rng = np.random.default_rng(params.seed)
    occ = _occupancy_track(rng, n, params.occupancy_segment_mean_s)

    delta = np.zeros(n + 1)
    n_occ = int(occ.sum())
    sources = (
        (params.appliance_pool, params.occupied_event_rate, occ == 1, n_occ),
        (params.appliance_pool, params.unoccupied_event_rate, occ == 0, n - n_occ),
        (params.background_pool, params.background_event_rate, None, n),
    )
    for pool, rate, mask, count in sources:
        if not pool or count == 0:
            continue
        k = int(rng.poisson(rate * count / 3600.0))
        if k == 0:
            continue
        # arrivals uniform over the samples where this source is active
        if mask is None:
            starts = rng.integers(0, n, size=k)
        else:
            candidates = np.flatnonzero(mask)
            starts = candidates[rng.integers(0, len(candidates), size=k)]
        powers = np.array([p for p, _ in pool])
        durations = np.array([d for _, d in pool])
        which = rng.integers(0, len(pool), size=k)
        lengths = np.maximum(1, np.rint(rng.exponential(durations[which])).astype(np.int64))
        stops = np.minimum(starts + lengths, n)
        np.add.at(delta, starts, powers[which])
        np.add.at(delta, stops, -powers[which])
    load = np.cumsum(delta[:n])

    noise = rng.normal(0.0, params.noise_std_w, n) if params.noise_std_w > 0 else np.zeros(n)
    readings = np.clip(params.base_load_w + load + noise, 0.0, None)
    # cumsum round-off can leave ~1e-12 residue after appliances switch off
    readings = np.round(readings, 9)
    return LoadProfile(household_id, readings, occ, 1)


class WindowSlices(NamedTuple):
    windows: np.ndarray
    residual: np.ndarray

    @property
    def has_residual(self) -> bool:
        return len(self.residual) > 0


def window_slices(readings, w: int = DEFAULT_WINDOW) -> WindowSlices:
    """Split into floor(N/w) non-overlapping windows; the tail is returned separately."""
    if w < 2:
        raise InvalidArgument("billing window must span at least 2 samples")
    if isinstance(readings, LoadProfile):
        readings = readings.readings
    x = np.asarray(readings, dtype=np.float64)
    full = (len(x) // w) * w
    return WindowSlices(x[:full].reshape(-1, w), x[full:])


def window_energy_wh(readings: Sequence[float], sampling_period_s: int = 1) -> float:
    x = np.asarray(readings, dtype=np.float64)
    return float(x.sum()) * sampling_period_s / 3600.0


def compute_bill(profile: LoadProfile, tariff: Tariff) -> float:
    """Sum of interval energy (kWh) times rate; rates cycle over the profile."""
    if not tariff.rates:
        raise InvalidArgument("tariff needs at least one rate")
    x = profile.readings
    res = tariff.resolution_samples
    n_int = -(-len(x) // res)
    padded = np.zeros(n_int * res)
    padded[: len(x)] = x
    kwh = padded.reshape(n_int, res).sum(axis=1) * profile.sampling_period_s / 3.6e6
    rates = np.resize(np.array(tariff.rates), n_int)
    return float(np.dot(kwh, rates))


def export_csv(profiles, path, start_ts: int = 0) -> None:
    """Write one profile, or several with a trailing ``household`` column."""
    multi = not isinstance(profiles, LoadProfile)
    items = list(profiles) if multi else [profiles]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER + (["household"] if multi else []))
        for p in items:
            ts = start_ts + np.arange(len(p)) * p.sampling_period_s
            for t, wv, o in zip(ts.tolist(), p.readings.tolist(), p.occupancy.tolist()):
                row = [t, repr(wv), o]
                if multi:
                    row.append(p.household_id)
                writer.writerow(row)


def _read_rows(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != CSV_HEADER or len(header) > 4 or (
            len(header) == 4 and header[3] != "household"
        ):
            raise ParseError(1, f"expected header {','.join(CSV_HEADER)}")
        width = len(header)
        groups: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(lineno, f"expected {width} fields, got {len(row)}")
            try:
                ts = int(row[0])
                watts = float(row[1])
                occ = int(row[2])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not np.isfinite(watts):
                raise ParseError(lineno, "watts must be finite")
            if watts < 0:
                raise DomainError(f"line {lineno}: negative watts {watts}")
            if occ not in (0, 1):
                raise ParseError(lineno, "occupancy must be 0 or 1")
            hid = row[3] if width == 4 else path.stem
            groups.setdefault(hid, ([], [], []))
            g = groups[hid]
            g[0].append(ts)
            g[1].append(watts)
            g[2].append(occ)
    return groups


def _to_profile(hid, ts, watts, occ) -> LoadProfile:
    period = 1
    if len(ts) > 1:
        steps = np.diff(np.asarray(ts, dtype=np.int64))
        if steps[0] <= 0 or np.any(steps != steps[0]):
            raise FormatError(f"household {hid}: timestamps are not uniformly spaced")
        period = int(steps[0])
    return LoadProfile(hid, np.array(watts), np.array(occ), period)


def ingest_csv_all(path) -> list:
    return [_to_profile(hid, *g) for hid, g in _read_rows(path).items()]


def ingest_csv(path) -> LoadProfile:
    profiles = ingest_csv_all(path)
    if len(profiles) != 1:
        raise FormatError(f"expected one household, found {len(profiles)}")
    return profiles[0]


def labelled_windows(profile: LoadProfile, length: int):
    """Non-overlapping ``length``-sample windows with majority occupancy labels."""
    if length < 1:
        raise InvalidArgument("window length must be positive")
    n = (len(profile) // length) * length
    W = profile.readings[:n].reshape(-1, length)
    y = (profile.occupancy[:n].reshape(-1, length).mean(axis=1) >= 0.5).astype(np.int8)
    return W, y
