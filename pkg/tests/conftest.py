import zlib

import numpy as np
import pytest

from segfsl.corpus_io import NEGATIVE, POSITIVE, AudioFile, DatasetIndex, LabeledRegion
from segfsl.features import FeatureMap


def toy_index(classes, files_per_class=2, events=6, duration=10.0, role="train", prefix=""):
    """In-memory index: per file ``events`` positives of 0.3 s with negative gaps between them."""
    idx = DatasetIndex(role=role, source="toy")
    for cls in classes:
        for k in range(files_per_class):
            path = f"{prefix}{cls}_{k}.wav"
            pos, neg, cursor = [], [], 0.0
            for e in range(events):
                on = 0.5 + e * (duration - 1.0) / events
                pos.append(LabeledRegion(on, on + 0.3, cls, POSITIVE, path))
                neg.append(LabeledRegion(cursor, on, cls, NEGATIVE, path))
                cursor = on + 0.3
            neg.append(LabeledRegion(cursor, duration, cls, NEGATIVE, path))
            idx.add_file(AudioFile(path, duration, cls, pos, neg))
    return idx


def toy_features(path, duration=10.0):
    seed = zlib.crc32(str(path).encode())
    n = int(duration * 22050 / 256) + 1
    return FeatureMap(np.random.default_rng(seed).standard_normal((2, n, 128)).astype(np.float32))


@pytest.fixture
def make_index():
    return toy_index


@pytest.fixture
def features():
    return toy_features
