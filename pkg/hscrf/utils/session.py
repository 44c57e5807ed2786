import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, List, TypeVar, Union

import numpy as np

from hscrf.utils.logger import get_logger

logger = get_logger(__name__)

ItemT = TypeVar("ItemT")
ResultT = TypeVar("ResultT")


def _key_entropy(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Independent RNG stream for (seed, *keys); unaffected by call order."""
    entropy = [int(seed)] + [_key_entropy(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class RunSession:
    """Process-wide run settings shared by every command.

    Attributes:
        seed: Base seed; every random stream is derived from it
        jobs: Worker processes for parallel maps (1 = run inline)
        quiet: Suppress progress logging
        output_dir: Default directory for command outputs
    """

    seed: int = 0
    jobs: int = 1
    quiet: bool = False
    output_dir: str = "results"

    def rng_for(self, *keys: Union[int, str]) -> np.random.Generator:
        return derive_rng(self.seed, *keys)

    def parallel_map(self, fn: Callable[[ItemT], ResultT], items: Iterable[ItemT]) -> List[ResultT]:
        """Map `fn` over items, in worker processes when jobs > 1.

        Results always come back in input order so reductions stay deterministic.
        """
        items = list(items)
        if self.jobs <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        logger.debug(f"Mapping {len(items)} items over {self.jobs} workers")
        with ProcessPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * self.jobs))))

    def serial(self) -> "RunSession":
        return RunSession(seed=self.seed, jobs=1, quiet=self.quiet, output_dir=self.output_dir)


def create_session(config: dict, seed: Any = None, jobs: Any = None, quiet: bool = False) -> RunSession:
    """Build the run session from the environment config, CLI flags taking precedence.

    Args:
        config: Dictionary returned by load_config()
        seed: --seed flag value, if given
        jobs: --jobs flag value, if given
        quiet: --quiet flag

    Returns:
        The session used by all commands
    """
    run = config["run"]
    session = RunSession(
        seed=int(seed) if seed is not None else int(run["seed"]),
        jobs=int(jobs) if jobs is not None else int(run["jobs"]),
        quiet=quiet,
        output_dir=run["output_dir"],
    )
    logger.debug(f"Session created: seed={session.seed}, jobs={session.jobs}")
    return session
