#!/usr/bin/env python3
"""
JSON-lines run logs.

One JSON object per line, keys sorted, no timestamps, so two runs with the
same seeds write identical files.
"""

import json
import logging
import os
from typing import Any, Dict, Iterator, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


def _default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class JsonlWriter:
    """
    JSON-lines writer; the file is truncated on open.

    With path=None every write is a no-op, so callers can log unconditionally.
    """

    def __init__(self, path: Optional[str]):
        self.path = path
        self._fh = None

    def __enter__(self) -> 'JsonlWriter':
        if self.path:
            parent = os.path.dirname(self.path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
        return self

    def __exit__(self, *exc):
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            logger.debug(f"Closed log {self.path}")

    def write(self, record: Dict[str, Any]):
        if self._fh is None:
            return
        self._fh.write(json.dumps(record, sort_keys=True, default=_default) + "\n")


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))


def iter_jsonl(path: str) -> Iterator[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
