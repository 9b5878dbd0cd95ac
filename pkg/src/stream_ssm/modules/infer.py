#!/usr/bin/python3

"""
Event-by-event inference with a trained event model.

Every block keeps its recurrent state and the timestamp of the last token
it saw; subsampling points count the tokens reaching them and forward only
tokens r-1, 2r-1, ... so the replay sees exactly the tokens of the batch
forward. Work per event does not depend on the history length.
"""

import logging

import numpy as np

from stream_ssm.modules.errors import CheckpointError, DataError
from stream_ssm.modules.events import MICROSECONDS, EventRecord, iter_event_records, read_event_header
from stream_ssm.modules.model import StreamModel
from stream_ssm.modules.stream_layer import mimo_step

logger = logging.getLogger(__name__)


def softmax(logits):
    shifted = np.exp(logits - np.max(logits))
    return shifted / shifted.sum()


class StreamingClassifier:

    def __init__(self, model: StreamModel, width, height):
        if model.embedding is None:
            raise CheckpointError("the checkpoint has no event token embedding")
        if model.embedding.shape[0] != 2 * width * height:
            raise CheckpointError(
                f"checkpoint embeds {model.embedding.shape[0]} tokens, a {width}x{height} sensor needs "
                f"{2 * width * height}")
        self.model = model
        self.width = width
        self.height = height
        self._factors = {stage.position: stage.factor for stage in model.config.subsample_schedule}
        self.reset()

    def reset(self):
        layers = len(self.model.blocks)
        self.states = [None] * layers
        self.last_t = [None] * layers
        self.counters = {position: 0 for position in self._factors}
        self.last_input_t = None
        self.feature_sum = np.zeros(self.model.config.n)
        self.pooled_tokens = 0
        self.processed = 0
        self.skipped = 0

    def _valid(self, event: EventRecord):
        if event.x >= self.width or event.y >= self.height or event.p > 1:
            return False
        return self.last_input_t is None or event.t >= self.last_input_t

    def _passes(self, position):
        """Advances the counter of a subsampling point; True when the token is kept."""
        factor = self._factors[position]
        count = self.counters[position]
        self.counters[position] = count + 1
        return count % factor == factor - 1

    def push(self, event: EventRecord):
        """Feeds one event; returns False when it was malformed and skipped."""
        if not self._valid(event):
            self.skipped += 1
            logger.warning("Skipping malformed event %s", tuple(event))
            return False
        self.last_input_t = event.t
        self.processed += 1

        token = event.p * self.width * self.height + event.y * self.width + event.x
        x = self.model.embedding[token]
        for i, params in enumerate(self.model.blocks):
            if i in self._factors and not self._passes(i):
                return True
            gap = 0.0 if self.last_t[i] is None else (event.t - self.last_t[i]) * MICROSECONDS
            x, self.states[i] = mimo_step(params, x, gap, self.states[i])
            self.last_t[i] = event.t
        if len(self.model.blocks) in self._factors and not self._passes(len(self.model.blocks)):
            return True

        features, _, _ = self.model.head_features(x[None])
        self.feature_sum += features[0]
        self.pooled_tokens += 1
        return True

    def logits(self):
        if self.pooled_tokens == 0:
            return None
        pooled = self.feature_sum / self.pooled_tokens
        return pooled @ self.model.head_W + self.model.head_b

    def posteriors(self):
        logits = self.logits()
        return None if logits is None else softmax(logits)


def _format_posteriors(probabilities):
    if probabilities is None:
        return "class=none"
    columns = " ".join(f"p{c}={p:.9f}" for c, p in enumerate(probabilities))
    return f"class={int(np.argmax(probabilities))} {columns}"


def run_stream(model: StreamModel, source, cadence=1, write=print, path=None):
    """
    Classifies a native binary event stream read incrementally from
    ``source``; writes one line every ``cadence`` events and a summary.
    Returns the classifier.
    """
    width, height = read_event_header(source, path)
    classifier = StreamingClassifier(model, width, height)
    seen = 0
    try:
        for event in iter_event_records(source, path=path):
            seen += 1
            classifier.push(event)
            if cadence and seen % cadence == 0:
                write(f"event={seen} {_format_posteriors(classifier.posteriors())}")
    except DataError as e:
        classifier.skipped += 1
        logger.warning("%s", e)

    if seen:
        write(f"summary events={seen} processed={classifier.processed} skipped={classifier.skipped} "
              f"{_format_posteriors(classifier.posteriors())}")
    return classifier
