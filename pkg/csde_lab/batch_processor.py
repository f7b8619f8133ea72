"""
Batch execution of Monte Carlo work.

Splits a path range into contiguous chunks, runs a chunk function over them on
a thread pool and hands results back in chunk order, so any reduction over the
results is independent of scheduling.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Tuple

from tqdm import tqdm

from csde_lab.utils import chunk_size, worker_count

logger = logging.getLogger(__name__)

Chunk = Tuple[int, int]


class BatchProcessor:
    """
    Runs path-parallel work in fixed-size chunks.
    """

    def __init__(self, config: Optional[Dict[str, Any]] = None, show_progress: bool = False):
        """
        Initialize batch processor.

        Args:
            config: Experiment config; the ``batch`` section supplies chunk_size
                and threads (both overridable from the environment)
            show_progress: Show a tqdm bar over chunks
        """
        self.config = config or {}
        self.chunk_size = chunk_size(self.config)
        self.threads = worker_count(self.config)
        self.show_progress = show_progress

    def make_chunks(self, n_paths: int) -> List[Chunk]:
        """
        Split path ids [0, n_paths) into contiguous chunks.

        Returns:
            List of (start, stop) pairs in increasing order
        """
        chunks = []
        start = 0
        while start < n_paths:
            stop = min(start + self.chunk_size, n_paths)
            chunks.append((start, stop))
            start = stop
        return chunks

    def run(self, chunk_fn: Callable[[int, int], Any], n_paths: int,
            desc: str = "paths") -> List[Any]:
        """
        Apply ``chunk_fn(start, stop)`` to every chunk.

        Args:
            chunk_fn: Function of a path-id range returning a partial result
            n_paths: Total number of paths
            desc: Progress bar label

        Returns:
            Chunk results in chunk order
        """
        chunks = self.make_chunks(n_paths)
        logger.debug("Running %d paths in %d chunks on %d threads", n_paths, len(chunks), self.threads)

        progress = tqdm(total=len(chunks), desc=desc, unit="chunk", disable=not self.show_progress)
        try:
            if self.threads == 1 or len(chunks) == 1:
                results = []
                for start, stop in chunks:
                    results.append(chunk_fn(start, stop))
                    progress.update(1)
                return results

            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                futures = [pool.submit(chunk_fn, start, stop) for start, stop in chunks]
                results = []
                # Collect in submission order so reductions are deterministic
                for future in futures:
                    results.append(future.result())
                    progress.update(1)
                return results
        finally:
            progress.close()
