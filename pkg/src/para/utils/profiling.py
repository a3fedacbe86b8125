"""Profiling support for para using cProfile.

When the PARA_PROFILE environment variable is set to a directory path,
profiling data will be collected and saved to that directory with unique
filenames containing the run's timestamp and PID, the current thread's name
and a sequence number.

PhaseTimer measures wall-clock time of named phases (e.g. the one-off
decomposition of a family run) independently of PARA_PROFILE.
"""
import cProfile
import functools
import itertools
import logging
import os
import re
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, TypeVar, ParamSpec

P = ParamSpec('P')
T = TypeVar('T')

PROFILE_ENV = 'PARA_PROFILE'
_SESSION_ENV = '_PARA_PROFILE_SESSION_DIR'

logger = logging.getLogger(__name__)

# Global counter for generating unique sequence numbers within the same process
_profile_counter = itertools.count()


def get_profile_dir() -> Path | None:
    """Get the profile directory from environment variable.

    Returns:
        Path to profile directory if PARA_PROFILE is set, None otherwise.
        The path includes a per-run subdirectory named {timestamp_ms}_{pid}.
    """
    profile_path = os.environ.get(PROFILE_ENV)
    if profile_path:
        return Path(profile_path) / _get_session_dir_name()
    return None


def _get_session_dir_name() -> str:
    session_dir = os.environ.get(_SESSION_ENV)
    if session_dir:
        return session_dir
    timestamp_ms = int(time.time() * 1000)
    return f"{timestamp_ms}_{os.getpid()}"


def generate_profile_filename(prefix: str = "profile") -> str:
    """Generate a unique profile filename like ``worker_Thread-3-worker_7.prof``."""
    seq = next(_profile_counter)
    thread_name = re.sub(r'[^A-Za-z0-9-]+', '-', threading.current_thread().name).strip('-')
    return f"{prefix}_{thread_name}_{seq}.prof"


def profile_function(func: Callable[P, T], prefix: str = "profile") -> Callable[P, T]:
    """Decorator/wrapper to profile a function if PARA_PROFILE is set.

    cProfile allows one active profiler per thread at a time on recent interpreters, so worker
    profiles are skipped while another profiler runs in the same process.
    """
    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        profile_dir = get_profile_dir()

        if profile_dir is None:
            return func(*args, **kwargs)

        profile_dir.mkdir(parents=True, exist_ok=True)
        profile_file = profile_dir / generate_profile_filename(prefix)

        profiler = cProfile.Profile()
        try:
            profiler.enable()
        except ValueError:
            # Another profiler is active in this process.
            return func(*args, **kwargs)
        try:
            return func(*args, **kwargs)
        finally:
            profiler.disable()
            profiler.dump_stats(str(profile_file))

    return wrapper


def profile_main(func: Callable[P, T]) -> Callable[P, T]:
    """Decorator for the main entry point function.

    Pins the session directory in the environment so every profile of the run lands in the
    same subdirectory.
    """
    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        if os.environ.get(PROFILE_ENV):
            os.environ[_SESSION_ENV] = _get_session_dir_name()

        profiled_func = profile_function(func, prefix="main")
        return profiled_func(*args, **kwargs)

    return wrapper


def profile_worker(func: Callable[P, T]) -> Callable[P, T]:
    """Decorator for per-layer worker functions (prefix "worker")."""
    return profile_function(func, prefix="worker")


class PhaseTimer:
    """Accumulates wall-clock seconds per named phase.

    Example:
        timer = PhaseTimer()
        with timer.phase('decompose'):
            ...
        timer.seconds('decompose')
    """

    def __init__(self):
        self._seconds: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self._seconds[name] = self._seconds.get(name, 0.0) + elapsed
            logger.info(f"Phase {name} took {elapsed:.3f}s")

    def seconds(self, name: str) -> float:
        return self._seconds.get(name, 0.0)

    def as_dict(self) -> dict[str, float]:
        return dict(self._seconds)
