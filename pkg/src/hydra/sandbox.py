"""Process-group sandboxes and OS process-table queries.

Spawns a container's first process as a process-group leader (optionally in
fresh PID+mount+UTS namespaces), delivers group signals, answers /proc
queries for top/stats, and provides the pid-reuse-safe liveness check used by
every component that stores a ProcessIdentity.
"""

from __future__ import annotations

import ctypes
import errno as errno_mod
import os
import signal
import sys
from dataclasses import dataclass
from pathlib import Path

from .model import ContainerSpec, ExitReport, HydraError, Isolation, ProcessIdentity, now_ms

__all__ = [
    "SpawnError",
    "IsolationUnsupported",
    "NotParentError",
    "SandboxHandle",
    "StatRow",
    "ProcRow",
    "ProcSample",
    "spawn",
    "spawn_exec",
    "signal_group",
    "wait_exit",
    "report_from_status",
    "sample_proc",
    "is_alive",
    "identity_of",
    "current_identity",
    "read_stat",
    "read_start_ticks",
    "proc_state",
    "thread_count",
    "rss_bytes",
    "namespaces_supported",
    "enter_namespaces_of",
    "DEFAULT_PATH",
]

DEFAULT_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"

_PAGE_SIZE = os.sysconf("SC_PAGE_SIZE")

CLONE_NEWNS = 0x0002_0000
CLONE_NEWUTS = 0x0400_0000
CLONE_NEWPID = 0x2000_0000

_libc = ctypes.CDLL(None, use_errno=True)


class SpawnError(HydraError):
    """fork/exec of a container process failed; carries the OS errno."""

    def __init__(self, message: str, errno: int = 0):
        super().__init__(message)
        self.errno = errno


class IsolationUnsupported(HydraError):
    """The host refused namespace creation (missing privileges or kernel support)."""


class NotParentError(HydraError):
    """wait_exit called by a process that is not the container's parent."""


# ---------------------------------------------------------------------------
# /proc parsing


@dataclass(frozen=True, slots=True)
class StatRow:
    """The fields of /proc/<pid>/stat this engine cares about."""

    pid: int
    comm: str
    state: str
    ppid: int
    pgrp: int
    utime: int
    stime: int
    start_ticks: int
    rss_pages: int


def read_stat(pid: int) -> StatRow | None:
    """Parse /proc/<pid>/stat; None if the process does not exist."""
    try:
        raw = Path(f"/proc/{pid}/stat").read_text()
    except (FileNotFoundError, ProcessLookupError, PermissionError):
        return None
    # comm is parenthesized and may itself contain spaces and parens;
    # everything after the LAST ')' is fixed-position fields 3..n.
    head, sep, tail = raw.rpartition(")")
    if not sep:
        return None
    pid_text, _, comm = head.partition(" (")
    fields = tail.split()
    try:
        return StatRow(
            pid=int(pid_text),
            comm=comm,
            state=fields[0],
            ppid=int(fields[1]),
            pgrp=int(fields[2]),
            utime=int(fields[11]),
            stime=int(fields[12]),
            start_ticks=int(fields[19]),
            rss_pages=int(fields[21]),
        )
    except (IndexError, ValueError):
        return None


def read_start_ticks(pid: int) -> int | None:
    """The process's start time in clock ticks since boot, or None if gone."""
    row = read_stat(pid)
    return row.start_ticks if row else None


def proc_state(pid: int) -> str | None:
    """The one-letter /proc state (R, S, D, T, Z, ...), or None if gone."""
    row = read_stat(pid)
    return row.state if row else None


def identity_of(pid: int) -> ProcessIdentity | None:
    """Capture (pid, start_ticks) for a live process, or None if gone."""
    ticks = read_start_ticks(pid)
    return ProcessIdentity(pid=pid, start_ticks=ticks) if ticks is not None else None


def current_identity() -> ProcessIdentity:
    """This process's own identity."""
    ident = identity_of(os.getpid())
    assert ident is not None
    return ident


def is_alive(identity: ProcessIdentity) -> bool:
    """True iff the pid exists, its start_ticks match, and it is not a zombie.

    A zombie still occupies its pid but can do no further work, so for
    supervision purposes it counts as dead; this keeps the check monotone
    (false stays false) once the real process has terminated.
    """
    row = read_stat(identity.pid)
    if row is None:
        return False
    return row.start_ticks == identity.start_ticks and row.state not in ("Z", "X")


def thread_count(pid: int) -> int | None:
    """OS thread count from /proc/<pid>/status, or None if gone."""
    fields = _read_status(pid)
    value = fields.get("Threads")
    return int(value) if value is not None else None


def rss_bytes(pid: int) -> int | None:
    """Resident set size in bytes from /proc/<pid>/status, or None if gone."""
    fields = _read_status(pid)
    value = fields.get("VmRSS")
    if value is None:
        return None
    return int(value.split()[0]) * 1024  # reported as "<n> kB"


def _read_status(pid: int) -> dict[str, str]:
    try:
        raw = Path(f"/proc/{pid}/status").read_text()
    except (FileNotFoundError, ProcessLookupError, PermissionError):
        return {}
    fields: dict[str, str] = {}
    for line in raw.splitlines():
        key, _, value = line.partition(":")
        fields[key] = value.strip()
    return fields


# ---------------------------------------------------------------------------
# Namespaces (optional isolation)


def _unshare(flags: int) -> None:
    if _libc.unshare(flags) != 0:
        err = ctypes.get_errno()
        raise IsolationUnsupported(f"unshare(0x{flags:x}): {os.strerror(err)}")


def _setns(fd: int, nstype: int = 0) -> None:
    if _libc.setns(fd, nstype) != 0:
        err = ctypes.get_errno()
        raise IsolationUnsupported(f"setns: {os.strerror(err)}")


_NAMESPACES_SUPPORTED: bool | None = None


def namespaces_supported() -> bool:
    """Probe (once) whether this host lets us create PID+mount+UTS namespaces."""
    global _NAMESPACES_SUPPORTED
    if _NAMESPACES_SUPPORTED is None:
        pid = os.fork()
        if pid == 0:  # probe in a throwaway child; unshare is one-way
            try:
                _unshare(CLONE_NEWPID | CLONE_NEWNS | CLONE_NEWUTS)
            except IsolationUnsupported:
                os._exit(1)
            os._exit(0)
        _, status = os.waitpid(pid, 0)
        _NAMESPACES_SUPPORTED = status == 0
    return _NAMESPACES_SUPPORTED


def enter_namespaces_of(pid: int) -> None:
    """Join the PID, mount, and UTS namespaces of an existing process.

    Must be called from a freshly forked, single-threaded child, before exec.
    The PID namespace applies to this process's children, so the caller is
    expected to exec (or fork once more) afterwards.
    """
    for name in ("pid", "mnt", "uts"):
        try:
            fd = os.open(f"/proc/{pid}/ns/{name}", os.O_RDONLY)
        except OSError as exc:
            raise IsolationUnsupported(f"open ns {name} of {pid}: {exc}") from None
        try:
            _setns(fd)
        finally:
            os.close(fd)


# ---------------------------------------------------------------------------
# Spawning


@dataclass(slots=True)
class SandboxHandle:
    """A freshly spawned container process and the monitor's ends of its stdio."""

    container: ProcessIdentity
    pgid: int
    isolation: Isolation
    stdin_w: int
    stdout_r: int
    stderr_r: int

    def close_stdio(self) -> None:
        for fd in (self.stdin_w, self.stdout_r, self.stderr_r):
            try:
                os.close(fd)
            except OSError:
                pass


def _build_env(spec: ContainerSpec) -> dict[str, str]:
    env: dict[str, str] = {}
    for entry in spec.env:
        key, _, value = entry.partition("=")
        env[key] = value
    env.setdefault("PATH", DEFAULT_PATH)
    return env


def spawn(spec: ContainerSpec) -> SandboxHandle:
    """Start spec's command as a new process-group leader wired to fresh pipes.

    The caller (the monitor-to-be) becomes the parent. Exec failures are
    reported synchronously through a close-on-exec error pipe, so a command
    that cannot start never looks like a container that exited instantly.
    """
    stdin_r, stdin_w = os.pipe()
    stdout_r, stdout_w = os.pipe()
    stderr_r, stderr_w = os.pipe()
    err_r, err_w = os.pipe()  # close-on-exec by default: EOF means exec succeeded

    saved_pidns = -1
    if spec.isolation is Isolation.NAMESPACES:
        try:
            saved_pidns = os.open("/proc/self/ns/pid_for_children", os.O_RDONLY)
            _unshare(CLONE_NEWPID)
        except (OSError, IsolationUnsupported) as exc:
            for fd in (stdin_r, stdin_w, stdout_r, stdout_w, stderr_r, stderr_w, err_r, err_w):
                os.close(fd)
            if saved_pidns >= 0:
                os.close(saved_pidns)
            raise IsolationUnsupported(str(exc)) from None

    pid = os.fork()
    if pid == 0:
        # Container child: no Python cleanup may run here; only os._exit.
        try:
            os.setpgid(0, 0)
            if spec.isolation is Isolation.NAMESPACES:
                _unshare(CLONE_NEWNS | CLONE_NEWUTS)
            os.dup2(stdin_r, 0)
            os.dup2(stdout_w, 1)
            os.dup2(stderr_w, 2)
            for fd in (stdin_r, stdin_w, stdout_r, stdout_w, stderr_r, stderr_w, err_r):
                os.close(fd)
            # CPython ignores these process-wide; exec preserves ignored
            # dispositions, so restore defaults for the container.
            signal.signal(signal.SIGPIPE, signal.SIG_DFL)
            signal.signal(signal.SIGXFSZ, signal.SIG_DFL)
            if spec.working_dir:
                os.chdir(spec.working_dir)
            os.execvpe(spec.command[0], list(spec.command), _build_env(spec))
        except BaseException as exc:  # noqa: BLE001 - must not unwind into caller's stack
            code = getattr(exc, "errno", None) or 0
            try:
                os.write(err_w, f"{code}\x00{exc}".encode("utf-8", "replace"))
            except OSError:
                pass
            os._exit(127)

    # Parent (the monitor). Restore our pid namespace for future children;
    # exec-in-container joins the container's namespaces explicitly instead.
    if saved_pidns >= 0:
        try:
            _setns(saved_pidns)
        finally:
            os.close(saved_pidns)

    # Capture identity before anything can reap the child: even if the
    # container already ran and died, the unreaped zombie still has our ticks.
    ticks = read_start_ticks(pid)
    try:
        os.setpgid(pid, pid)  # parent-side mirror of the child's setpgid (race-proof)
    except OSError:
        pass

    for fd in (stdin_r, stdout_w, stderr_w, err_w):
        os.close(fd)

    failure = bytearray()
    while True:
        chunk = os.read(err_r, 4096)
        if not chunk:
            break
        failure += chunk
    os.close(err_r)

    if failure:
        os.waitpid(pid, 0)  # reap the failed child; no zombie left behind
        for fd in (stdin_w, stdout_r, stderr_r):
            os.close(fd)
        errno_text, _, message = failure.decode("utf-8", "replace").partition("\x00")
        err = int(errno_text) if errno_text.isdigit() else 0
        raise SpawnError(
            f"cannot start {spec.command[0]!r}: {message or os.strerror(err or errno_mod.ENOENT)}",
            errno=err,
        )

    assert ticks is not None  # child unreaped until here, stat must exist
    return SandboxHandle(
        container=ProcessIdentity(pid=pid, start_ticks=ticks),
        pgid=pid,
        isolation=spec.isolation,
        stdin_w=stdin_w,
        stdout_r=stdout_r,
        stderr_r=stderr_r,
    )


def _reset_forked_runtime() -> None:
    """Undo inherited event-loop signal plumbing in a freshly forked child.

    A child forked from a live asyncio process inherits the loop's wakeup fd
    and signal handlers; left in place they would scribble on the parent's
    socketpair. Must run before anything else in the child.
    """
    signal.set_wakeup_fd(-1)
    for sig in range(1, signal.NSIG):
        try:
            signal.signal(sig, signal.SIG_DFL)
        except (OSError, ValueError):
            pass  # SIGKILL/SIGSTOP and friends


def spawn_exec(
    command: tuple[str, ...],
    env_entries: tuple[str, ...],
    *,
    pgid: int,
    ns_of_pid: int | None = None,
) -> SandboxHandle:
    """Start an extra process inside an existing container context.

    Without namespaces the child joins the container's process group (the
    caller must share its session). With namespaces it joins the container's
    PID/mount/UTS namespaces via an intermediate fork; the intermediate
    relays the real process's exit as code-or-128+signal. Safe to call from
    a process running an event loop; the child resets inherited runtime
    state before doing anything observable.
    """
    stdin_r, stdin_w = os.pipe()
    stdout_r, stdout_w = os.pipe()
    stderr_r, stderr_w = os.pipe()
    err_r, err_w = os.pipe()

    pid = os.fork()
    if pid == 0:
        try:
            _reset_forked_runtime()
            if ns_of_pid is not None:
                enter_namespaces_of(ns_of_pid)
                inner = os.fork()
                if inner != 0:  # relay: the pid namespace applies to children only
                    _, status = os.waitpid(inner, 0)
                    if os.WIFEXITED(status):
                        os._exit(os.WEXITSTATUS(status))
                    os._exit(128 + os.WTERMSIG(status))
            else:
                os.setpgid(0, pgid)
            os.dup2(stdin_r, 0)
            os.dup2(stdout_w, 1)
            os.dup2(stderr_w, 2)
            for fd in (stdin_r, stdin_w, stdout_r, stdout_w, stderr_r, stderr_w, err_r):
                os.close(fd)
            signal.signal(signal.SIGPIPE, signal.SIG_DFL)
            signal.signal(signal.SIGXFSZ, signal.SIG_DFL)
            env: dict[str, str] = {}
            for entry in env_entries:
                key, _, value = entry.partition("=")
                env[key] = value
            env.setdefault("PATH", DEFAULT_PATH)
            os.execvpe(command[0], list(command), env)
        except BaseException as exc:  # noqa: BLE001
            code = getattr(exc, "errno", None) or 0
            try:
                os.write(err_w, f"{code}\x00{exc}".encode("utf-8", "replace"))
            except OSError:
                pass
            os._exit(127)

    ticks = read_start_ticks(pid)
    for fd in (stdin_r, stdout_w, stderr_w, err_w):
        os.close(fd)

    failure = bytearray()
    while True:
        chunk = os.read(err_r, 4096)
        if not chunk:
            break
        failure += chunk
    os.close(err_r)

    if failure:
        try:
            os.waitpid(pid, 0)
        except ChildProcessError:
            pass  # a concurrent SIGCHLD reaper got it first
        for fd in (stdin_w, stdout_r, stderr_r):
            os.close(fd)
        errno_text, _, message = failure.decode("utf-8", "replace").partition("\x00")
        err = int(errno_text) if errno_text.isdigit() else 0
        raise SpawnError(f"cannot exec {command[0]!r}: {message}", errno=err)

    assert ticks is not None
    return SandboxHandle(
        container=ProcessIdentity(pid=pid, start_ticks=ticks),
        pgid=pgid,
        isolation=Isolation.NAMESPACES if ns_of_pid is not None else Isolation.NONE,
        stdin_w=stdin_w,
        stdout_r=stdout_r,
        stderr_r=stderr_r,
    )


def signal_group(pgid: int, sig: int) -> bool:
    """Deliver sig to every process in the group; False if the group is gone.

    Delivering to an already-dead group is a successful no-op (idempotent
    kill); permission failures propagate.
    """
    try:
        os.killpg(pgid, sig)
        return True
    except ProcessLookupError:
        return False


def report_from_status(container_id: str, status: int, *, at_ms: int | None = None) -> ExitReport:
    """Map a waitpid status to an ExitReport."""
    if os.WIFEXITED(status):
        return ExitReport(
            container_id=container_id,
            exit_code=os.WEXITSTATUS(status),
            term_signal=None,
            finished_at=at_ms if at_ms is not None else now_ms(),
        )
    if os.WIFSIGNALED(status):
        return ExitReport(
            container_id=container_id,
            exit_code=None,
            term_signal=os.WTERMSIG(status),
            finished_at=at_ms if at_ms is not None else now_ms(),
        )
    raise HydraError(f"unexpected wait status {status:#x} for {container_id}")


def wait_exit(handle: SandboxHandle | int, container_id: str) -> ExitReport:
    """Block until the container's first process exits; reap it and map the status."""
    pid = handle.pgid if isinstance(handle, SandboxHandle) else handle
    try:
        _, status = os.waitpid(pid, 0)
    except ChildProcessError:
        raise NotParentError(f"pid {pid} is not a child of this process") from None
    return report_from_status(container_id, status)


# ---------------------------------------------------------------------------
# Process-table snapshots


@dataclass(frozen=True, slots=True)
class ProcRow:
    pid: int
    ppid: int
    command: str
    cpu_ticks: int  # utime + stime
    rss_bytes: int


@dataclass(frozen=True, slots=True)
class ProcSample:
    """Snapshot of a container's process subtree."""

    rows: tuple[ProcRow, ...]
    sampled_at: int  # epoch ms


def sample_proc(pgid: int, root_pid: int | None = None) -> ProcSample:
    """All live processes in the group plus descendants of the root pid.

    Zombies are excluded: they hold no memory and run no code. Empty sample
    if the group is gone.
    """
    root = root_pid if root_pid is not None else pgid
    table: dict[int, StatRow] = {}
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        row = read_stat(int(entry))
        if row is not None:
            table[row.pid] = row

    def reaches_root(pid: int) -> bool:
        seen = set()
        while pid not in seen and pid > 1:
            if pid == root:
                return True
            seen.add(pid)
            row = table.get(pid)
            if row is None:
                return False
            pid = row.ppid
        return False

    rows = tuple(
        ProcRow(
            pid=row.pid,
            ppid=row.ppid,
            command=row.comm,
            cpu_ticks=row.utime + row.stime,
            rss_bytes=row.rss_pages * _PAGE_SIZE,
        )
        for row in sorted(table.values(), key=lambda r: r.pid)
        if row.state not in ("Z", "X") and (row.pgrp == pgid or reaches_root(row.pid))
    )
    return ProcSample(rows=rows, sampled_at=now_ms())
