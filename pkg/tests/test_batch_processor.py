import threading
import time

import numpy as np

from csde_lab.batch_processor import BatchProcessor


def test_chunks_cover_the_range():
    processor = BatchProcessor({"batch": {"chunk_size": 4, "threads": 1}})
    assert processor.make_chunks(10) == [(0, 4), (4, 8), (8, 10)]
    assert processor.make_chunks(3) == [(0, 3)]
    assert processor.make_chunks(0) == []


def test_results_keep_chunk_order():
    processor = BatchProcessor({"batch": {"chunk_size": 3, "threads": 4}})

    def slow_first(start, stop):
        # earlier chunks finish later
        time.sleep(0.01 * (10 - start) / 3.0)
        return list(range(start, stop))

    results = processor.run(slow_first, 10)
    assert [x for part in results for x in part] == list(range(10))


def test_threads_are_used():
    processor = BatchProcessor({"batch": {"chunk_size": 1, "threads": 3}})
    names = set()

    def record(start, stop):
        names.add(threading.current_thread().name)
        time.sleep(0.02)
        return start

    assert processor.run(record, 6) == list(range(6))
    assert len(names) > 1


def test_single_thread_runs_inline():
    processor = BatchProcessor({"batch": {"chunk_size": 2, "threads": 1}})
    main = threading.current_thread().name
    names = processor.run(lambda start, stop: threading.current_thread().name, 5)
    assert names == [main] * 3


def test_environment_sets_the_chunk_size(monkeypatch):
    monkeypatch.setenv("CSDE_LAB_CHUNK_SIZE", "2")
    processor = BatchProcessor({"batch": {"chunk_size": 100}})
    assert processor.chunk_size == 2
    sums = processor.run(lambda start, stop: np.arange(start, stop).sum(), 5)
    assert sums == [1, 5, 4]
