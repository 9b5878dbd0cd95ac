import io
import struct

import numpy as np
import pytest

from stream_ssm.modules.errors import ConfigurationError, DataError
from stream_ssm.modules.events import (
    EVENT_DTYPE,
    EventAugmentConfig,
    EventRecord,
    EventStream,
    augment_events,
    event_cutmix,
    event_times,
    event_token_ids,
    iter_event_records,
    jitter_time,
    make_events,
    read_event_header,
    read_events_binary,
    read_events_csv,
    tokenize_events,
    write_events_binary,
    write_events_csv,
)

WIDTH, HEIGHT = 4, 3


def stream_of(t, x=None, y=None, p=None, width=WIDTH, height=HEIGHT):
    n = len(t)
    zeros = [0] * n
    return EventStream(make_events(t, x or zeros, y or zeros, p or zeros), width, height)


def test_record_layout():
    assert EVENT_DTYPE.itemsize == 16


def test_golden_single_event(tmp_path):
    path = tmp_path / "one.bin"
    write_events_binary(path, stream_of([5], [1], [0], [1], width=2, height=2))
    expected = b"STEV" + struct.pack("<III", 1, 2, 2) + struct.pack("<QHHB3x", 5, 1, 0, 1)
    assert path.read_bytes() == expected


def test_csv_binary_csv_is_byte_identical(tmp_path, data_dir):
    source = f"{data_dir}/events_10.csv"
    stream = read_events_csv(source, WIDTH, HEIGHT)
    assert len(stream) == 10
    assert stream.duration == 3901

    binary = tmp_path / "events.bin"
    write_events_binary(binary, stream)
    assert binary.stat().st_size == 16 + 10 * 16

    csv_again = tmp_path / "events.csv"
    write_events_csv(csv_again, read_events_binary(binary))
    with open(source, "rb") as f:
        assert csv_again.read_bytes() == f.read()


@pytest.mark.parametrize("row, line", [
    ("5,4,0,0", 3),      # x outside the sensor
    ("5,0,0,2", 3),      # polarity
    ("5,0,0", 3),        # field count
    ("5,a,0,0", 3),      # not an integer
    ("1,0,0,0", 3),      # timestamps go backwards
])
def test_csv_errors_report_lines(tmp_path, row, line):
    path = tmp_path / "bad.csv"
    path.write_text(f"t,x,y,p\n2,0,0,0\n{row}\n")
    with pytest.raises(DataError) as info:
        read_events_csv(path, WIDTH, HEIGHT)
    assert info.value.line == line


def test_csv_needs_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,0,0,0\n")
    with pytest.raises(DataError) as info:
        read_events_csv(path, WIDTH, HEIGHT)
    assert info.value.line == 1


def test_binary_errors(tmp_path):
    good = tmp_path / "good.bin"
    write_events_binary(good, stream_of([1, 2, 3]))
    data = good.read_bytes()

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(data[:-5])
    with pytest.raises(DataError):
        read_events_binary(truncated)

    foreign = tmp_path / "foreign.bin"
    foreign.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DataError):
        read_events_binary(foreign)


def test_incremental_reader_yields_complete_records_first(tmp_path):
    path = tmp_path / "events.bin"
    write_events_binary(path, stream_of([1, 2, 3], [0, 1, 2], [0, 1, 2], [0, 1, 0]))
    source = io.BytesIO(path.read_bytes()[:-3])
    assert read_event_header(source) == (WIDTH, HEIGHT)
    records = []
    with pytest.raises(DataError):
        for record in iter_event_records(source, chunk_records=1):
            records.append(record)
    assert records == [EventRecord(1, 0, 0, 0), EventRecord(2, 1, 1, 1)]


def test_stream_validation():
    with pytest.raises(DataError):
        stream_of([3, 2])
    with pytest.raises(DataError):
        stream_of([1], [WIDTH])
    with pytest.raises(ConfigurationError):
        stream_of([1], width=0)


def test_token_ids_are_injective():
    x, y, p = np.meshgrid(np.arange(WIDTH), np.arange(HEIGHT), np.arange(2), indexing="ij")
    events = make_events(np.zeros(x.size, dtype=np.int64), x.ravel(), y.ravel(), p.ravel())
    ids = event_token_ids(events, WIDTH, HEIGHT)
    assert sorted(ids.tolist()) == list(range(2 * WIDTH * HEIGHT))


def test_event_times_are_relative_seconds():
    stream = stream_of([1000, 1500, 1500, 4000])
    np.testing.assert_allclose(event_times(stream.events), [0.0, 5e-4, 5e-4, 3e-3], rtol=1e-12)


def test_tokenize_events(rng):
    stream = stream_of([0, 10, 20], [0, 1, 3], [0, 2, 1], [1, 0, 1])
    embedding = rng.normal(size=(2 * WIDTH * HEIGHT, 5))
    seq = tokenize_events(stream.events, WIDTH, HEIGHT, embedding)
    np.testing.assert_array_equal(seq.U[0], embedding[12])
    np.testing.assert_array_equal(seq.U[2], embedding[12 + 4 + 3])
    with pytest.raises(ConfigurationError):
        tokenize_events(stream.events, WIDTH, HEIGHT, embedding[:-1])


# ============================================================
# Augmentation
# ============================================================

def test_disabled_augmentation_is_identity(rng):
    stream = stream_of([0, 5, 9], [0, 1, 2], [2, 1, 0], [0, 1, 1])
    augmented = augment_events(stream, rng, EventAugmentConfig.disabled())
    np.testing.assert_array_equal(augmented.events, stream.events)


def test_augmentation_is_reproducible(data_dir):
    from stream_ssm.modules.numerics import make_rng
    stream = read_events_csv(f"{data_dir}/events_10.csv", WIDTH, HEIGHT)
    config = EventAugmentConfig(flip_x_prob=0.5, flip_y_prob=0.5, translate_prob=0.5, jitter_prob=0.5)
    first = [augment_events(stream, make_rng(3, "augment"), config).events for _ in range(2)]
    np.testing.assert_array_equal(first[0], first[1])


def test_forced_flip_and_translation(rng):
    stream = stream_of([0, 1], [0, 3], [0, 2])
    flipped = augment_events(stream, rng, EventAugmentConfig(flip_x_prob=1.0, translate_prob=0.0, jitter_prob=0.0))
    np.testing.assert_array_equal(flipped.events["x"], [3, 0])
    shifted = augment_events(stream, rng, EventAugmentConfig(flip_x_prob=0.0, translate_prob=1.0, max_shift=10,
                                                            jitter_prob=0.0))
    assert np.all(shifted.events["x"] < WIDTH) and np.all(shifted.events["y"] < HEIGHT)


def test_jitter_scales_gaps():
    stream = stream_of([100, 110, 130])
    np.testing.assert_array_equal(jitter_time(stream, 2.0).events["t"], [100, 120, 160])


def test_invalid_augmentation_config():
    with pytest.raises(ConfigurationError):
        EventAugmentConfig(flip_x_prob=1.5)
    with pytest.raises(ConfigurationError):
        EventAugmentConfig.from_dict({"rotate_prob": 0.5})


def test_cutmix_with_explicit_window(rng):
    a = stream_of([0, 10, 20, 30, 40])
    b = stream_of([100, 105, 112, 200], [1, 1, 1, 1])
    mixed, label = event_cutmix(a, [1.0, 0.0], b, [0.0, 1.0], rng, window=(10, 15), source_start=100)
    # a keeps 0, 30, 40; b contributes 100, 105, 112 shifted to 10, 15, 22
    np.testing.assert_array_equal(mixed.events["t"], [0, 10, 15, 22, 30, 40])
    np.testing.assert_array_equal(mixed.events["x"], [0, 1, 1, 1, 0, 0])
    np.testing.assert_allclose(label, [0.5, 0.5])


def test_cutmix_labels_are_convex(rng):
    a = stream_of(np.arange(0, 1000, 10))
    t_b = np.arange(0, 1000, 7)
    b = stream_of(t_b, [1] * len(t_b))
    for _ in range(5):
        mixed, label = event_cutmix(a, [1.0, 0.0], b, [0.0, 1.0], rng)
        assert np.all(label >= 0.0)
        assert label.sum() == pytest.approx(1.0)
        from_b = int(np.sum(mixed.events["x"] == 1))
        assert label[1] == pytest.approx(from_b / len(mixed))
        assert np.all(np.diff(mixed.events["t"].astype(np.int64)) >= 0)
