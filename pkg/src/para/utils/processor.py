import asyncio
import logging
import multiprocessing
from multiprocessing.pool import ThreadPool
from typing import Awaitable, Iterable, TypeVar

import numpy.typing as npt

from ..adapter.layer import AdapterLayer
from ..reconstruct import CompressedLayer, prune_and_reconstruct
from ..spectral import SpectralDecomposition, decompose_layer
from .profiling import profile_worker

logger = logging.getLogger(__name__)

T = TypeVar('T')


@profile_worker
def decompose_for_layer(layer: AdapterLayer) -> SpectralDecomposition:
    return decompose_layer(layer)


@profile_worker
def reconstruct_for_layer(decomp: SpectralDecomposition, mask: npt.NDArray) -> CompressedLayer:
    return prune_and_reconstruct(decomp, mask)


class Processor:
    """Per-layer work on a thread pool, exposed as awaitables.

    Numpy releases the GIL inside its kernels, so threads overlap on the matrix products
    without copying layers between processes. Gathering helpers return results in input order,
    which keeps every downstream reduction independent of the thread count.
    """

    def __init__(self, concurrency: int | None = None):
        if concurrency is None:
            concurrency = multiprocessing.cpu_count()
        if concurrency < 1:
            raise ValueError(f"Concurrency must be positive, got {concurrency}")

        self._concurrency = concurrency
        self._pool: ThreadPool = ThreadPool(self._concurrency)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def close(self):
        self._pool.close()
        self._pool.join()

    @property
    def concurrency(self):
        return self._concurrency

    def decompose(self, layer: AdapterLayer) -> Awaitable[SpectralDecomposition]:
        logger.debug(f"Starting decomposition for: {layer.key.module_path}")

        async def log_and_decompose():
            result = await self._evaluate(decompose_for_layer, layer)
            logger.debug(f"Completed decomposition for: {layer.key.module_path}")
            return result

        return log_and_decompose()

    def reconstruct(self, decomp: SpectralDecomposition, mask: npt.NDArray) -> Awaitable[CompressedLayer]:
        return self._evaluate(reconstruct_for_layer, decomp, mask)

    async def decompose_all(self, layers: Iterable[AdapterLayer]) -> list[SpectralDecomposition]:
        """Decompose every layer concurrently; results follow the order of ``layers``."""
        return await _gather_settled(self.decompose(layer) for layer in layers)

    async def reconstruct_all(
            self, work: Iterable[tuple[SpectralDecomposition, npt.NDArray]]) -> list[CompressedLayer]:
        """Reconstruct every (decomposition, mask) pair; results follow the input order."""
        return await _gather_settled(self.reconstruct(decomp, mask) for decomp, mask in work)

    def _evaluate(self, func, *args):
        loop = asyncio.get_running_loop()
        future = loop.create_future()

        self._pool.apply_async(func, args=args,
                               callback=lambda v: _deliver(loop, future, False, v),
                               error_callback=lambda e: _deliver(loop, future, True, e))

        return future


async def _gather_settled(awaitables: Iterable[Awaitable[T]]) -> list[T]:
    """Wait for every awaitable, then raise the first failure in input order.

    No job is left running on the pool once this returns or raises.
    """
    results = await asyncio.gather(*awaitables, return_exceptions=True)
    for result in results:
        if isinstance(result, BaseException):
            raise result
    return list(results)


def _deliver(loop: asyncio.AbstractEventLoop, future: asyncio.Future, failed: bool, value) -> None:
    """Pool callback: hand a result to the loop that is awaiting it.

    Runs on the pool's result thread, which must survive a loop that has already closed.
    """
    if loop.is_closed():
        logger.debug("Dropping a result for a closed event loop")
        return
    try:
        loop.call_soon_threadsafe(_settle, future, failed, value)
    except RuntimeError:
        logger.debug("Dropping a result for a closed event loop")


def _settle(future: asyncio.Future, failed: bool, value) -> None:
    if future.done():
        return
    if failed:
        future.set_exception(value)
    else:
        future.set_result(value)
