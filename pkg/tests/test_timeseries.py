import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amlodab import attack, neural
from amlodab.errors import DomainError, FormatError, InvalidArgument, ParseError
from amlodab.timeseries import (
    BillingWindow,
    GeneratorParams,
    LoadProfile,
    Tariff,
    compute_bill,
    export_csv,
    generate_profile,
    ingest_csv,
    ingest_csv_all,
    labelled_windows,
    window_energy_wh,
    window_slices,
)

readings = arrays(np.float64, st.integers(0, 60), elements=st.floats(0, 5000, allow_nan=False))


def profile_of(values, hid="h"):
    values = np.asarray(values, dtype=np.float64)
    return LoadProfile(hid, values, np.zeros(len(values), dtype=np.int8))


# --- LoadProfile / types ------------------------------------------------------

def test_profile_rejects_length_mismatch():
    with pytest.raises(InvalidArgument):
        LoadProfile("h", [1.0, 2.0], [0])


def test_profile_rejects_negative_reading():
    with pytest.raises(DomainError):
        LoadProfile("h", [1.0, -2.0], [0, 0])


def test_profile_rejects_bad_period():
    with pytest.raises(InvalidArgument):
        LoadProfile("h", [1.0], [0], sampling_period_s=0)


def test_billing_window_needs_two_samples():
    assert BillingWindow().window_len_samples == 2
    with pytest.raises(InvalidArgument):
        BillingWindow(1)


def test_tariff_resolution_must_align_with_window():
    Tariff(4, (0.1,), 2)
    with pytest.raises(InvalidArgument):
        Tariff(3, (0.1,), 2)
    with pytest.raises(InvalidArgument):
        Tariff(2, (), 2)
    with pytest.raises(InvalidArgument):
        Tariff(2, (-0.1,), 2)


def test_generator_rates_must_favour_occupied():
    with pytest.raises(InvalidArgument):
        GeneratorParams(occupied_event_rate=1.0, unoccupied_event_rate=2.0)
    GeneratorParams(occupied_event_rate=2.0, unoccupied_event_rate=2.0)


# --- generate_profile -----------------------------------------------------------

def test_no_event_sources_gives_constant_base_load():
    params = GeneratorParams(base_load_w=100.0, appliance_pool=(), background_pool=(), noise_std_w=0.0)
    p = generate_profile(params, 3600)
    assert np.all(p.readings == 100.0)


def test_generator_is_seed_deterministic():
    params = GeneratorParams(seed=11)
    assert generate_profile(params, 7200) == generate_profile(params, 7200)
    assert not generate_profile(params.with_seed(12), 7200) == generate_profile(params, 7200)


def test_default_occupancy_fraction_in_range():
    for seed in range(5):
        p = generate_profile(GeneratorParams(seed=seed), 24 * 3600)
        assert 0.2 <= p.occupancy.mean() <= 0.8


def test_duration_must_be_positive():
    with pytest.raises(InvalidArgument):
        generate_profile(GeneratorParams(), 0)


def test_occupied_periods_draw_more_power():
    p = generate_profile(GeneratorParams(seed=3), 48 * 3600)
    W, y = labelled_windows(p, 60)
    activity = np.abs(np.diff(W, axis=1)).sum(axis=1)
    assert activity[y == 1].mean() > activity[y == 0].mean()


def test_signal_free_profile_defeats_attacker():
    params = GeneratorParams(occupied_event_rate=30.0, unoccupied_event_rate=30.0)
    profiles = [generate_profile(params.with_seed(100 + i), 24 * 3600) for i in range(6)]
    train = [labelled_windows(p, 60) for p in profiles[:4]]
    test = [labelled_windows(p, 60) for p in profiles[4:]]
    W, y = np.vstack([a for a, _ in train]), np.concatenate([b for _, b in train])
    Wt, yt = np.vstack([a for a, _ in test]), np.concatenate([b for _, b in test])
    model = attack.train_attacker(W, y, neural.TrainConfig(epochs=10, batch_size=128, seed=1), params.onoff_threshold_w)
    acc = attack.evaluate(model, Wt, yt).accuracy
    assert 0.4 <= acc <= 0.6


# --- window_slices ----------------------------------------------------------------

@pytest.mark.parametrize("n,count,residual", [(10, 5, 0), (11, 5, 1), (0, 0, 0)])
def test_window_counts(n, count, residual):
    s = window_slices(np.arange(n, dtype=float), 2)
    assert len(s.windows) == count
    assert len(s.residual) == residual
    assert s.has_residual == (residual > 0)


def test_window_slices_rejects_short_window():
    with pytest.raises(InvalidArgument):
        window_slices(np.zeros(4), 1)


@given(readings, st.integers(2, 7))
def test_windows_plus_residual_reconstruct(x, w):
    s = window_slices(x, w)
    assert np.array_equal(np.concatenate([s.windows.reshape(-1), s.residual]), x)


# --- energy and bills -----------------------------------------------------------------

def test_window_energy_examples():
    assert window_energy_wh([1000, 1000], 1) == pytest.approx(2000 / 3600)
    assert window_energy_wh([], 1) == 0
    assert window_energy_wh([3600], 1) == 1.0


def test_bill_examples():
    # 10 kWh spread over one hour at 1 Hz
    p = profile_of(np.full(3600, 10_000.0))
    assert compute_bill(p, Tariff.flat(0.10)) == pytest.approx(1.00, rel=1e-12)
    assert compute_bill(profile_of(np.zeros(100)), Tariff.flat(0.10)) == 0.0
    two = profile_of(np.full(7200, 1000.0))
    assert compute_bill(two, Tariff(3600, (0.1, 0.3))) == pytest.approx(0.40, rel=1e-12)


def test_rates_cycle_when_shorter_than_profile():
    p = profile_of(np.full(4 * 3600, 1000.0))
    assert compute_bill(p, Tariff(3600, (0.1, 0.3))) == pytest.approx(0.8, rel=1e-12)


@given(readings, st.floats(0, 1))
def test_flat_bill_matches_energy(x, rate):
    bill = compute_bill(profile_of(x), Tariff.flat(rate))
    expected = window_energy_wh(x, 1) * rate / 1000
    assert bill == pytest.approx(expected, rel=1e-12, abs=1e-300)


# --- CSV ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    p = generate_profile(GeneratorParams(seed=4), 600, "hh")
    path = tmp_path / "hh.csv"
    export_csv(p, path, start_ts=1_600_000_000)
    assert ingest_csv(path) == p


def test_csv_round_trip_several_households(tmp_path):
    ps = [generate_profile(GeneratorParams(seed=s), 120, f"h{s}") for s in range(3)]
    path = tmp_path / "all.csv"
    export_csv(ps, path)
    assert ingest_csv_all(path) == ps
    with pytest.raises(FormatError):
        ingest_csv(path)


def test_csv_parse_error_cites_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("timestamp,watts,occupancy\n0,100,1\nabc,100,1\n")
    with pytest.raises(ParseError) as info:
        ingest_csv(path)
    assert info.value.line == 3
    assert "3" in str(info.value)


def test_csv_negative_watts(tmp_path):
    path = tmp_path / "neg.csv"
    path.write_text("timestamp,watts,occupancy\n0,-5,1\n")
    with pytest.raises(DomainError):
        ingest_csv(path)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "hdr.csv"
    path.write_text("time,w,o\n0,5,1\n")
    with pytest.raises(ParseError) as info:
        ingest_csv(path)
    assert info.value.line == 1


def test_csv_non_uniform_spacing(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("timestamp,watts,occupancy\n0,5,1\n1,5,1\n3,5,1\n")
    with pytest.raises(FormatError):
        ingest_csv(path)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e6, allow_nan=False)))
def test_csv_round_trip_is_exact_for_any_reading(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("csv") / "p.csv"
    p = LoadProfile("p", x, (x > 100).astype(np.int8))
    export_csv(p, path)
    assert ingest_csv(path) == p


def test_labelled_windows_majority():
    p = LoadProfile("h", np.arange(8.0), [1, 1, 0, 0, 0, 0, 1, 0])
    W, y = labelled_windows(p, 4)
    assert W.shape == (2, 4)
    assert list(y) == [1, 0]
