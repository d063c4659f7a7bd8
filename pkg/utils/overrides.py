#!/usr/bin/env python3
"""
`--set key=value` overrides for nested JSON configuration.

Keys are dotted paths into the config (`unet.groups`, `qat.kd_weight`).
Values are parsed as JSON when they parse (numbers, booleans, lists,
quoted strings) and taken as plain strings otherwise.
"""

import json
import logging
import re
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List

from errors import ConfigError

logger = logging.getLogger(__name__)

KEY_PATTERN = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$')


@dataclass
class Override:
    """One parsed `key=value` assignment."""
    key: str
    value: Any
    original: str

    @property
    def path(self) -> List[str]:
        return self.key.split(".")


class OverrideHandler:
    """Parses and applies dotted-path overrides to a config dictionary."""

    @classmethod
    def parse(cls, text: str) -> Override:
        if "=" not in text:
            raise ConfigError(f"Override {text!r} is not of the form key=value")
        key, raw = text.split("=", 1)
        key = key.strip()
        if not KEY_PATTERN.match(key):
            raise ConfigError(f"Override key {key!r} is not a dotted name", key=key)
        return Override(key=key, value=cls._parse_value(raw), original=text)

    @staticmethod
    def _parse_value(raw: str) -> Any:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw

    @classmethod
    def apply(cls, data: Dict[str, Any], overrides: Iterable[str], schema: Dict[str, Any]) -> Dict[str, Any]:
        """
        Apply overrides to `data` in order.

        Args:
            data: Config dictionary (modified in place and returned)
            overrides: Raw `key=value` strings
            schema: Fully populated config dictionary listing every valid key

        Raises:
            ConfigError: Malformed override or unknown key
        """
        for text in overrides:
            override = cls.parse(text)
            cls._check_known(override, schema)
            node = data
            for part in override.path[:-1]:
                child = node.get(part)
                if not isinstance(child, dict):
                    child = {}
                    node[part] = child
                node = child
            node[override.path[-1]] = override.value
            logger.debug(f"Override {override.key} = {override.value!r}")
        return data

    @staticmethod
    def _check_known(override: Override, schema: Dict[str, Any]):
        node: Any = schema
        for depth, part in enumerate(override.path):
            if not isinstance(node, dict) or part not in node:
                known = ", ".join(sorted(node)) if isinstance(node, dict) else ""
                prefix = ".".join(override.path[:depth])
                where = f" under '{prefix}'" if prefix else ""
                raise ConfigError(
                    f"Unknown config key '{override.key}'{where}; valid keys: {known}",
                    key=override.key,
                )
            node = node[part]
