"""Shared test helpers: random model-value generators and process hygiene."""

from __future__ import annotations

import os
import random
import signal

from hydra.model import (
    ContainerRecord,
    ContainerSpec,
    ContainerState,
    ExitReport,
    Isolation,
    ProcessIdentity,
    StateKind,
    SupervisionMode,
    new_container_id,
)

WORDS = ["sleep", "cat", "echo", "true", "sh", "env", "tail", "yes"]


def make_random_report(rng: random.Random) -> ExitReport:
    container_id = new_container_id(rng.getrandbits(64))
    if rng.random() < 0.5:
        code, sig = rng.randint(0, 255), None
    else:
        code, sig = None, rng.randint(1, 64)
    return ExitReport(
        container_id=container_id,
        exit_code=code,
        term_signal=sig,
        finished_at=rng.randint(0, 2**53),
    )


def make_random_spec(rng: random.Random) -> ContainerSpec:
    command = ["/bin/" + rng.choice(WORDS)] + [
        rng.choice(WORDS) for _ in range(rng.randint(0, 3))
    ]
    env = tuple(f"K{i}={rng.randint(0, 999)}" for i in range(rng.randint(0, 3)))
    return ContainerSpec(
        command=tuple(command),
        env=env,
        working_dir=rng.choice([None, "/tmp", "/"]),
        isolation=rng.choice([Isolation.NONE, Isolation.NAMESPACES]),
        restart_on_monitor_loss=rng.random() < 0.5,
        stop_grace_ms=rng.randint(0, 60_000),
    )


def make_random_state(rng: random.Random) -> ContainerState:
    kind = rng.choice(list(StateKind))
    if kind is StateKind.EXITED:
        if rng.random() < 0.5:
            return ContainerState.exited(code=rng.randint(0, 255))
        return ContainerState.exited(signal=rng.randint(1, 64))
    return ContainerState(kind)


def make_random_identity(rng: random.Random) -> ProcessIdentity:
    return ProcessIdentity(pid=rng.randint(1, 4_000_000), start_ticks=rng.randint(0, 2**40))


def make_random_record(rng: random.Random) -> ContainerRecord:
    state = make_random_state(rng)
    record = ContainerRecord(
        id=new_container_id(rng.getrandbits(64)),
        spec=make_random_spec(rng),
        mode=rng.choice(list(SupervisionMode)),
        state=state,
        monitor=make_random_identity(rng) if rng.random() < 0.7 else None,
        container=make_random_identity(rng) if rng.random() < 0.7 else None,
        created_at=rng.randint(0, 2**53),
        started_at=rng.choice([None, rng.randint(0, 2**53)]),
        finished_at=rng.randint(0, 2**53),
        restart_count=rng.randint(0, 9),
        exit_unknown=rng.random() < 0.2,
    )
    # keep the generated record consistent with its own invariants
    if record.state.kind is StateKind.RUNNING and record.container is None:
        record.container = make_random_identity(rng)
    return record


def kill_silently(pid: int, sig: int = signal.SIGKILL) -> None:
    try:
        os.kill(pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def killpg_silently(pgid: int, sig: int = signal.SIGKILL) -> None:
    try:
        os.killpg(pgid, sig)
    except (ProcessLookupError, PermissionError):
        pass
