import hashlib
import json
from collections.abc import Callable, Iterable
from concurrent.futures.thread import ThreadPoolExecutor
from typing import Any, TypeVar

from .settings import settings

_pool = ThreadPoolExecutor(
    max_workers=settings.max_workers, thread_name_prefix="carryover"
)

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map func over items on the shared pool, preserving order."""
    return list(_pool.map(func, items))


def stable_hash(payload: Any) -> str:
    """Short content hash of a JSON-serializable payload."""
    data = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(data.encode()).hexdigest()[:16]
