"""In-process application catalogue: descriptors plus registered entrypoints.

Worker executors look up backend programs by app id. Repository nodes serve
descriptors together with a deterministic pseudo-executable payload so that
shipping a program to a compute node still costs realistic bytes on the wire.
"""

from __future__ import annotations

from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path
from typing import Callable

from . import analytic

Runner = Callable[[Path, Path], None]

SLEEP_APNEA_APP_ID = "sleep-apnea"
EXECUTABLE_PAYLOAD_BYTES = 2048


@dataclass(frozen=True)
class AppDescriptor:
    app_id: str
    resource_slots: int = 1
    input_name: str = "input.txt"
    output_name: str = "output.json"

    def to_dict(self) -> dict:
        return {
            "app_id": self.app_id,
            "resource_slots": self.resource_slots,
            "input_name": self.input_name,
            "output_name": self.output_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppDescriptor":
        return cls(d["app_id"], int(d.get("resource_slots", 1)),
                   d.get("input_name", "input.txt"), d.get("output_name", "output.json"))


_REGISTRY: dict[str, tuple[AppDescriptor, Runner]] = {}


def register_app(descriptor: AppDescriptor, runner: Runner) -> None:
    _REGISTRY[descriptor.app_id] = (descriptor, runner)


def lookup_app(app_id: str) -> tuple[AppDescriptor, Runner] | None:
    return _REGISTRY.get(app_id)


def executable_payload(app_id: str) -> bytes:
    """Stable stand-in bytes for the program binary of an application."""
    seed = sha256(app_id.encode("utf-8")).digest()
    reps = EXECUTABLE_PAYLOAD_BYTES // len(seed) + 1
    return (seed * reps)[:EXECUTABLE_PAYLOAD_BYTES]


def _run_sleep_apnea(input_path: Path, output_path: Path) -> None:
    output_path.write_bytes(analytic.analyze(input_path.read_bytes()))


register_app(AppDescriptor(app_id=SLEEP_APNEA_APP_ID), _run_sleep_apnea)
