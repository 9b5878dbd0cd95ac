import io
import re

import numpy as np
import pytest

from stream_ssm.modules.errors import CheckpointError
from stream_ssm.modules.events import (
    HEADER,
    MAGIC,
    VERSION,
    EventRecord,
    EventStream,
    event_times,
    event_token_ids,
    make_events,
    write_events_binary,
)
from stream_ssm.modules.infer import StreamingClassifier, run_stream, softmax
from stream_ssm.modules.model import ModelConfig, StreamModel
from stream_ssm.modules.stream_layer import TokenBatch


def event_model(rng, **overrides):
    values = dict(n=4, m=2, layers=2, variant="stream-DG", classes=2, median_gap=1e-3)
    values.update(overrides)
    return StreamModel.init(ModelConfig(**values), rng)


def random_stream(rng, length, width=2, height=2):
    t = np.concatenate([[int(rng.integers(0, 10 ** 6))], rng.integers(0, 2000, length - 1)]).cumsum()
    return EventStream(make_events(t, rng.integers(0, width, length), rng.integers(0, height, length),
                                   rng.integers(0, 2, length)), width, height)


def batch_logits(model, stream):
    ids = event_token_ids(stream.events, stream.width, stream.height)
    return model.forward(TokenBatch(event_times(stream.events)[None], model.embed(ids)[None]))[0][0]


def binary_source(tmp_path, stream):
    path = tmp_path / "events.bin"
    write_events_binary(path, stream)
    return io.BytesIO(path.read_bytes())


@pytest.mark.parametrize("schedule", [[], [(1, 2, 1)], [(1, 2, 1), (2, 3, 1)]])
def test_streaming_replays_batch_forward(rng, schedule):
    model = event_model(rng, subsample_schedule=schedule)
    stream = random_stream(rng, 50)
    classifier = StreamingClassifier(model, 2, 2)
    for event in stream:
        assert classifier.push(event)
    np.testing.assert_allclose(classifier.logits(), batch_logits(model, stream), rtol=1e-9, atol=1e-12)


def test_malformed_events_are_skipped(rng):
    classifier = StreamingClassifier(event_model(rng), 2, 2)
    assert classifier.posteriors() is None
    assert classifier.push(EventRecord(10, 0, 1, 1))
    assert not classifier.push(EventRecord(11, 2, 0, 0))
    assert not classifier.push(EventRecord(5, 0, 0, 0))
    assert not classifier.push(EventRecord(12, 0, 0, 3))
    assert classifier.processed == 1 and classifier.skipped == 3
    assert classifier.posteriors().sum() == pytest.approx(1.0)


def test_reset_forgets_history(rng):
    model = event_model(rng)
    stream = random_stream(rng, 10)
    classifier = StreamingClassifier(model, 2, 2)
    for event in stream:
        classifier.push(event)
    first = classifier.logits()
    classifier.reset()
    for event in stream:
        classifier.push(event)
    np.testing.assert_array_equal(classifier.logits(), first)


def test_sensor_mismatch_is_rejected(rng):
    with pytest.raises(CheckpointError):
        StreamingClassifier(event_model(rng), 4, 3)
    with pytest.raises(CheckpointError):
        StreamingClassifier(event_model(rng, input="features"), 2, 2)


def test_run_stream_output(tmp_path, rng):
    model = event_model(rng)
    lines = []
    classifier = run_stream(model, binary_source(tmp_path, random_stream(rng, 7)), cadence=2, write=lines.append)
    assert len(lines) == 4
    assert re.match(r"^event=2 class=[01] p0=0\.\d{9} p1=0\.\d{9}$", lines[0])
    assert lines[-1].startswith("summary events=7 processed=7 skipped=0 class=")
    assert classifier.processed == 7


def test_run_stream_empty_file_prints_nothing(rng):
    lines = []
    run_stream(event_model(rng), io.BytesIO(HEADER.pack(MAGIC, VERSION, 2, 2)), write=lines.append)
    assert lines == []


def test_run_stream_truncated_record(tmp_path, rng):
    source = binary_source(tmp_path, random_stream(rng, 3))
    data = source.getvalue()[:-4]
    lines = []
    classifier = run_stream(event_model(rng), io.BytesIO(data), cadence=0, write=lines.append)
    assert classifier.processed == 2 and classifier.skipped == 1
    assert lines == [lines[-1]] and lines[-1].startswith("summary events=2 processed=2 skipped=1")


def test_softmax_is_stable():
    p = softmax(np.array([1000.0, 1000.0]))
    np.testing.assert_allclose(p, [0.5, 0.5])
