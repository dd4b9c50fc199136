"""Process-level fixtures: throwaway engines on short-lived state dirs.

Engines run as real subprocesses (the same entry point users get) so crash
and adoption scenarios exercise true process-tree behavior. Teardown kills
anything the engine supervised, zombie-aware, so one failing test cannot
starve the rest of the suite of pids.
"""

from __future__ import annotations

import os
import signal
import subprocess
import sys
import time
from typing import Callable, Iterator

import pytest

from hydra.harness import Engine


def proc_state(pid: int) -> str | None:
    """Single-letter process state, or None if the pid is gone."""
    try:
        with open(f"/proc/{pid}/stat", "rb") as fh:
            data = fh.read()
    except OSError:
        return None
    # comm may contain spaces/parens; the state letter follows the last ')'.
    return chr(data[data.rindex(b")") + 2])


def pid_alive(pid: int | None) -> bool:
    """True for a live process; zombies and reaped pids count as dead."""
    if not pid:
        return False
    state = proc_state(int(pid))
    return state is not None and state not in ("Z", "X")


def wait_for(
    predicate: Callable[[], bool], *, timeout_s: float = 10.0, interval_s: float = 0.02
) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval_s)
    return predicate()


def group_pids(pgid: int) -> list[int]:
    """Every live pid whose process group is pgid."""
    pids = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        try:
            with open(f"/proc/{entry}/stat", "rb") as fh:
                data = fh.read()
        except OSError:
            continue
        fields = data[data.rindex(b")") + 2 :].split()
        if int(fields[2]) == pgid:  # pgrp is the third field after state
            pids.append(int(entry))
    return pids


@pytest.fixture
def make_engine() -> Iterator[Callable[..., Engine]]:
    """Factory for started engines; everything is torn down afterwards."""
    engines: list[Engine] = []

    def factory(mode: str = "decoupled", **kwargs) -> Engine:
        engine = Engine(mode, **kwargs)
        engines.append(engine)
        engine.start()
        return engine

    yield factory
    for engine in engines:
        engine.cleanup()


@pytest.fixture
def engine(make_engine) -> Engine:
    return make_engine("decoupled", poll_interval_ms=500)


def run_cli(
    *args: str, state_dir: str, timeout_s: float = 30.0, stdin: bytes | None = None
) -> subprocess.CompletedProcess:
    """Invoke the command line exactly as a user would."""
    env = dict(os.environ, HYDRA_STATE_DIR=state_dir)
    return subprocess.run(
        [sys.executable, "-m", "hydra", *args],
        env=env,
        input=stdin,
        capture_output=True,
        timeout=timeout_s,
    )


def kill_group_silently(pgid: int | None) -> None:
    if not pgid:
        return
    try:
        os.killpg(int(pgid), signal.SIGKILL)
    except OSError:
        pass


def kill_silently(pid: int | None) -> None:
    """For processes that are not group leaders (monitors usually are not)."""
    if not pid:
        return
    try:
        os.kill(int(pid), signal.SIGKILL)
    except OSError:
        pass
