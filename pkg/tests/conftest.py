import numpy as np
import pytest

from gruntlab.ingest import (AnnotationRecord, AudioClip, DatasetManifest, SyntheticSpec,
                             generate_synthetic_corpus)


def sine(freq, rate=44100, n=None, amp=0.5, phase=0.0):
    n = rate if n is None else n
    t = np.arange(n) / rate
    return AudioClip(amp * np.sin(2 * np.pi * freq * t + phase), rate)


def make_manifest(players, clips_per_player=4, sexes=None, recording_per_player=True):
    """Balanced manifest; ``players`` is a count or list of ids."""
    if isinstance(players, int):
        players = [f"P{i:03d}" for i in range(players)]
    records = []
    for i, p in enumerate(players):
        sex = sexes[i] if sexes is not None else ("female" if i % 2 == 0 else "male")
        for j in range(clips_per_player):
            score = "scored" if j % 2 == 0 else "not_scored"
            records.append(AnnotationRecord(f"rec_{p}", p, 1000 * j, 1000, sex, score))
    return DatasetManifest(records)


@pytest.fixture(scope="session")
def small_corpus():
    spec = SyntheticSpec(n_players=10, clips_per_player=6, seed=11)
    return generate_synthetic_corpus(spec)


GATE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
