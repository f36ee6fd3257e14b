import struct

import h5py
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventlab.events import (EVB_HEADER, EventFormatError, EventStream, SceneTexture,
                             format_seconds_us, load_events, parse_seconds_us, save_events,
                             synth_traverse, traverse_offset)

from conftest import random_stream


def test_text_line_maps_to_integer_microseconds(tmp_path):
    f = tmp_path / "one.txt"
    f.write_text("0.000001 5 7 1\n")
    s = load_events(f, resolution=(10, 10))
    assert (s.t.tolist(), s.x.tolist(), s.y.tolist(), s.p.tolist()) == ([1], [5], [7], [1])


def test_zero_polarity_becomes_negative(tmp_path):
    f = tmp_path / "neg.txt"
    f.write_text("# 4 4\n0.5 1 1 0\n")
    s = load_events(f)
    assert s.p.tolist() == [-1] and s.t.tolist() == [500_000]


def test_empty_text_with_resolution_override(tmp_path):
    f = tmp_path / "empty.txt"
    f.write_text("")
    s = load_events(f, resolution=(346, 260))
    assert len(s) == 0 and s.duration == 0 and (s.width, s.height) == (346, 260)


def test_header_wins_over_override(tmp_path):
    f = tmp_path / "h.txt"
    f.write_text("# 20 10\n0.1 19 9 1\n")
    assert (load_events(f, resolution=(5, 5)).width, load_events(f).height) == (20, 10)


@pytest.mark.parametrize("body, where", [
    ("0.1 1 1\n", ":1:"),
    ("0.1 1 1 1\nabc 1 1 1\n", ":2:"),
    ("0.1 1 1 1\n0.2 1 1 3\n", ":2:"),
])
def test_malformed_text_names_the_line(tmp_path, body, where):
    f = tmp_path / "bad.txt"
    f.write_text(body)
    with pytest.raises(EventFormatError, match=where):
        load_events(f, resolution=(4, 4))


def test_missing_resolution_is_an_error(tmp_path):
    f = tmp_path / "nores.txt"
    f.write_text("0.1 1 1 1\n")
    with pytest.raises(EventFormatError, match="resolution"):
        load_events(f)


def test_out_of_range_coordinate(tmp_path):
    f = tmp_path / "oob.txt"
    f.write_text("# 4 4\n0.1 4 0 1\n")
    with pytest.raises(EventFormatError, match="record 0"):
        load_events(f)


def test_shuffled_events_roundtrip_through_evb_equal_stable_sort(tmp_path):
    rng = np.random.default_rng(3)
    n = 10_000
    t = rng.integers(0, 1000, size=n)  # many ties, so stability matters
    x, y = rng.integers(0, 64, size=n), rng.integers(0, 48, size=n)
    p = rng.choice([-1, 1], size=n)
    s = EventStream.from_unsorted(t, x, y, p, 64, 48)
    save_events(s, tmp_path / "a.evb")
    back = load_events(tmp_path / "a.evb")
    # oracle: python's sort is stable
    order = sorted(range(n), key=lambda i: t[i])
    assert back.t.tolist() == [int(t[i]) for i in order]
    assert back.x.tolist() == [int(x[i]) for i in order]
    assert back.p.tolist() == [int(p[i]) for i in order]


def test_evb_layout(tmp_path):
    s = EventStream(np.array([7]), np.array([2]), np.array([3]), np.array([-1]), 10, 20)
    save_events(s, tmp_path / "l.evb")
    raw = (tmp_path / "l.evb").read_bytes()
    assert len(raw) == 20 + 16
    assert EVB_HEADER.unpack(raw[:20]) == (b"EVB1", 10, 20, 1)
    t, x, y, p = struct.unpack("<QHHb", raw[20:33])
    assert (t, x, y, p) == (7, 2, 3, -1)


@pytest.mark.parametrize("fmt, name", [("evb", "s.evb"), ("text", "s.txt"), ("hdf5", "s.h5")])
@pytest.mark.parametrize("n", [0, 3, 2000])
def test_roundtrip_all_formats(tmp_path, fmt, name, n):
    rng = np.random.default_rng(n)
    s = random_stream(rng, n=n, width=30, height=20, duration=5_000_000)
    save_events(s, tmp_path / name)
    back = load_events(tmp_path / name)
    assert back.same_events(s)


def test_million_event_evb_roundtrip(tmp_path):
    s = synth_traverse(5, 10_000_000, 100_000, 64, 48)
    assert len(s) > 900_000
    save_events(s, tmp_path / "big.evb")
    assert load_events(tmp_path / "big.evb").same_events(s)


def test_truncated_evb(tmp_path):
    s = random_stream(np.random.default_rng(0), n=5, width=8, height=8)
    save_events(s, tmp_path / "t.evb")
    raw = (tmp_path / "t.evb").read_bytes()
    (tmp_path / "t.evb").write_bytes(raw[:-3])
    with pytest.raises(EventFormatError):
        load_events(tmp_path / "t.evb")
    (tmp_path / "m.evb").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(EventFormatError, match="magic"):
        load_events(tmp_path / "m.evb")


def test_hdf5_groups_and_rebase(tmp_path):
    path = tmp_path / "multi.h5"
    with h5py.File(path, "w") as f:
        for name, base in (("a", 1000), ("b", 5000)):
            g = f.create_group(name)
            g["t"] = np.array([base, base + 10, base + 3], dtype=np.int64)
            g["x"] = np.array([0, 1, 2])
            g["y"] = np.array([0, 0, 1])
            g["p"] = np.array([1, 0, 1])
            g.attrs["width"], g.attrs["height"] = 4, 2
    b = load_events(path, sequence="b", rebase=True)
    assert b.t.tolist() == [0, 3, 10] and b.t_start == 5000
    assert b.p.tolist() == [1, 1, -1]
    with pytest.raises(EventFormatError, match="sequence"):
        load_events(path, sequence="c")


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=10**15))
def test_timestamp_text_roundtrip(us):
    assert parse_seconds_us(format_seconds_us(us)) == us


@pytest.mark.parametrize("token, us", [
    ("1", 1_000_000), (".5", 500_000), ("0.0000005", 1), ("0.00000049", 0),
    ("2.5e-6", 3), ("1.9999995", 2_000_000),
])
def test_timestamp_rounds_half_up(token, us):
    assert parse_seconds_us(token) == us


@pytest.mark.parametrize("token", ["-1", "nan", "inf", "x"])
def test_bad_timestamps(token):
    with pytest.raises(ValueError):
        parse_seconds_us(token)


def test_stream_rejects_unsorted_and_bad_polarity():
    with pytest.raises(ValueError, match="non-decreasing"):
        EventStream(np.array([2, 1]), np.zeros(2), np.zeros(2), np.ones(2), 2, 2)
    with pytest.raises(ValueError, match="polarity"):
        EventStream(np.array([1]), np.zeros(1), np.zeros(1), np.zeros(1), 2, 2)


def test_slice_time_is_half_open():
    s = EventStream(np.array([0, 10, 20]), np.zeros(3), np.zeros(3), np.ones(3), 1, 1)
    assert s.slice_time(10, 20).t.tolist() == [10]


# --------------------------------------------------------------------------- synthesis

def test_zero_rate_gives_empty_stream():
    s = synth_traverse(1, 1_000_000, 0, 16, 16)
    assert len(s) == 0 and s.duration == 1_000_000


def test_synthesis_is_deterministic():
    a = synth_traverse(9, 500_000, 20_000, 32, 24, speed_profile=(1.0, 2.0))
    b = synth_traverse(9, 500_000, 20_000, 32, 24, speed_profile=(1.0, 2.0))
    assert a == b
    assert not a.same_events(synth_traverse(10, 500_000, 20_000, 32, 24, speed_profile=(1.0, 2.0)))


def test_poisson_count_within_five_sigma():
    s = synth_traverse(42, 10_000_000, 100_000, 64, 48)
    assert abs(len(s) - 1_000_000) <= 5 * 1_000


def test_speed_scales_rate_not_events_per_distance():
    slow = synth_traverse(1, 4_000_000, 10_000, 32, 16, speed_profile=(0.5,))
    fast = synth_traverse(2, 2_000_000, 10_000, 32, 16, speed_profile=(1.0,))
    # both cover 200 px of scene at 100 px/s; expected 20k events each
    assert abs(len(slow) - len(fast)) < 5 * np.sqrt(20_000) * 1.5


def test_traverse_offset_piecewise():
    off = traverse_offset(np.array([0, 500_000, 1_000_000, 2_000_000]), 2_000_000, (1.0, 3.0), 10.0)
    assert np.allclose(off, [0.0, 5.0, 10.0, 40.0])


def test_scene_polarity_follows_gradient_sign():
    w, p = SceneTexture(length=64, seed=1).maps(8)
    assert w.shape == p.shape == (8, 64)
    assert set(np.unique(p)) <= {-1, 1} and (w > 0).all()
