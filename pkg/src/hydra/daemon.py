"""The engine process: container registry, monitor launcher, exit ingester.

One daemon owns one state directory (enforced by a lock file). It persists
every record mutation to disk before answering, so a crash at any point
loses nothing: the next daemon rebuilds the registry from record files, exit
files, and live-process identity checks (reconciliation). In decoupled and
lazy modes no container process depends on the daemon being alive.

Everything runs on one asyncio loop in one OS thread. Exit notification
arrives as a signal; asyncio delivers it via its self-pipe, so the handler
body runs on the loop and only sets an event. Container exits are ingested
from exit files, never from waiting on child processes, which is what keeps
the thread count flat no matter how many containers run (coupled mode
deliberately breaks this with one waiter thread per container to emulate
the classic engines it stands in for).
"""

from __future__ import annotations

import asyncio
import contextlib
import fcntl
import logging
import os
import secrets
import signal
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import sandbox
from .model import (
    ContainerRecord,
    ContainerSpec,
    ContainerState,
    HydraError,
    IllegalTransition,
    InvalidSpec,
    ProcessIdentity,
    StateKind,
    SupervisionMode,
    is_container_id,
    new_container_id,
    now_ms,
)
from .monitor import ChildReaper, LaunchHandle, fork_monitor, read_spawn_failure
from .protocol import (
    ExitFormatError,
    MessageFormatError,
    RecordFormatError,
    SignalPlan,
    StateDirLayout,
    decode_message,
    dump_record,
    encode_message,
    load_record,
    read_exit_report,
    read_pid_file,
    resolve_layout,
    write_pid_file,
)

__all__ = [
    "DEFAULT_POLL_INTERVAL_MS",
    "DEFAULT_HANDSHAKE_TIMEOUT_MS",
    "WAITER_CONTEXT_BYTES",
    "DaemonConfig",
    "AlreadyRunning",
    "ApiError",
    "Daemon",
]

log = logging.getLogger("hydra.daemon")

DEFAULT_POLL_INTERVAL_MS = 2000
DEFAULT_HANDSHAKE_TIMEOUT_MS = 5000
# Per-container ballast held by each coupled-mode waiter thread, standing in
# for the per-container runtime bookkeeping of the engines that mode emulates.
WAITER_CONTEXT_BYTES = 65536

_LIVE_KINDS = (StateKind.RUNNING, StateKind.PAUSED, StateKind.STOPPING)


@dataclass(frozen=True, slots=True)
class DaemonConfig:
    state_root: str
    mode: SupervisionMode = SupervisionMode.DECOUPLED
    poll_interval_ms: int = DEFAULT_POLL_INTERVAL_MS
    handshake_timeout_ms: int = DEFAULT_HANDSHAKE_TIMEOUT_MS
    signal_plan: SignalPlan = field(default_factory=SignalPlan)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SupervisionMode(self.mode))
        if self.poll_interval_ms < 100:
            raise InvalidSpec(
                f"poll_interval_ms must be >= 100, got {self.poll_interval_ms}"
            )
        if self.handshake_timeout_ms <= 0:
            raise InvalidSpec("handshake_timeout_ms must be positive")


class AlreadyRunning(HydraError):
    """Another live daemon holds this state directory's lock."""


class ApiError(HydraError):
    """A request failed in a way the client should see as a typed error."""

    def __init__(self, code: str, detail: str = "", *, exit_code: int | None = None):
        super().__init__(detail or code)
        self.code = code
        self.detail = detail
        # For spawn failures: the status the monitor bootstrap died with,
        # recorded as the container's exit code.
        self.exit_code = exit_code


class Daemon:
    def __init__(self, config: DaemonConfig):
        self.config = config
        self.layout = resolve_layout(config.state_root)
        self.identity = sandbox.current_identity()
        self.records: dict[str, ContainerRecord] = {}
        self.reaper = ChildReaper()
        self.restore_ms: float | None = None
        self.serving_since_ms: int | None = None
        self._lock_fd: int | None = None
        self._waiters: dict[str, list[asyncio.Future[ContainerRecord]]] = {}
        # container id -> (launch token, future for the Launched handshake)
        self._pending_launch: dict[str, tuple[str, asyncio.Future[dict[str, Any]]]] = {}
        self._coupled_release: dict[str, threading.Event] = {}
        self._bg_tasks: set[asyncio.Task] = set()
        self._conn_tasks: set[asyncio.Task] = set()
        self._shutdown: asyncio.Event | None = None
        self._exit_wake: asyncio.Event | None = None

    # -- lifecycle ------------------------------------------------------------

    async def serve(self, *, ready: asyncio.Event | None = None) -> None:
        """Run until a shutdown signal or the shutdown op arrives.

        Raises AlreadyRunning if another live daemon holds the state dir.
        """
        loop = asyncio.get_running_loop()
        self._shutdown = asyncio.Event()
        self._exit_wake = asyncio.Event()
        server: asyncio.AbstractServer | None = None
        loop_tasks: list[asyncio.Task] = []

        restore_t0 = time.perf_counter()
        self._acquire_lock()
        try:
            reboots, rearm_grace = self._reconcile()

            # Handlers go in before the pid file is (re)written: a monitor
            # that reads the fresh pid must never signal a handlerless
            # process (an unhandled real-time signal is fatal).
            self.reaper.install(loop)
            loop.add_signal_handler(
                self.config.signal_plan.exit_notify, self._exit_wake.set
            )
            loop.add_signal_handler(signal.SIGTERM, self._shutdown.set)
            loop.add_signal_handler(signal.SIGINT, self._shutdown.set)
            write_pid_file(self.layout.daemon_pid, self.identity)

            with contextlib.suppress(FileNotFoundError):
                os.unlink(self.layout.daemon_sock)
            server = await asyncio.start_unix_server(
                self._on_connection, path=str(self.layout.daemon_sock)
            )
            os.chmod(self.layout.daemon_sock, 0o600)

            for record in reboots:
                await self._relaunch(record)
            self.restore_ms = (time.perf_counter() - restore_t0) * 1000.0

            for record in rearm_grace:
                self._arm_grace_timer(record.id, record.spec.stop_grace_ms)

            loop_tasks.append(asyncio.create_task(self._ingest_loop()))
            loop_tasks.append(asyncio.create_task(self._poll_loop()))
            self.serving_since_ms = now_ms()
            log.info(
                "serving %s mode=%s restore_ms=%.1f records=%d",
                self.layout.root,
                self.config.mode.value,
                self.restore_ms,
                len(self.records),
            )
            if ready is not None:
                ready.set()

            await self._shutdown.wait()

            log.info("shutting down")
            if self.config.mode is SupervisionMode.COUPLED:
                self._abort_all_containers()
        finally:
            try:
                await self._teardown(loop, server, loop_tasks)
            finally:
                self._release_lock()

    async def _teardown(
        self,
        loop: asyncio.AbstractEventLoop,
        server: asyncio.AbstractServer | None,
        loop_tasks: list[asyncio.Task],
    ) -> None:
        """Stop serving; safe against partial startup and cancellation."""
        if server is not None:
            server.close()
            with contextlib.suppress(Exception):
                await server.wait_closed()
        doomed = [*loop_tasks, *self._bg_tasks, *self._conn_tasks]
        for task in doomed:
            task.cancel()
        if doomed:
            await asyncio.gather(*doomed, return_exceptions=True)
        for sig in (
            self.config.signal_plan.exit_notify,
            signal.SIGTERM,
            signal.SIGINT,
            signal.SIGCHLD,
        ):
            with contextlib.suppress(ValueError, RuntimeError):
                loop.remove_signal_handler(sig)
        if server is not None:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(self.layout.daemon_sock)
            with contextlib.suppress(FileNotFoundError):
                os.unlink(self.layout.daemon_pid)

    def _acquire_lock(self) -> None:
        fd = os.open(self.layout.lock_file, os.O_RDWR | os.O_CREAT, 0o600)
        try:
            # POSIX record lock: dies with this process and is not inherited
            # across fork, so monitor launches can never pin a dead daemon's
            # lock and block the next daemon.
            fcntl.lockf(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            owner = ""
            try:
                identity = read_pid_file(self.layout.daemon_pid)
                owner = f" (pid {identity.pid})"
            except Exception:
                pass
            raise AlreadyRunning(
                f"another daemon holds {self.layout.root}{owner}"
            ) from None
        os.ftruncate(fd, 0)
        os.write(fd, f"{os.getpid()}\n".encode())
        self._lock_fd = fd

    def _release_lock(self) -> None:
        if self._lock_fd is not None:
            with contextlib.suppress(OSError):
                os.close(self._lock_fd)
            self._lock_fd = None

    # -- reconciliation ---------------------------------------------------------

    def _reconcile(self) -> tuple[list[ContainerRecord], list[ContainerRecord]]:
        """Rebuild the registry from disk; returns (reboot list, re-arm list).

        Idempotent for lazy/decoupled: a second run over the resulting state
        changes nothing. Coupled mode reboots every record that is Running or
        Paused on disk, which is the baseline behavior being emulated.
        """
        self.records.clear()
        if self.layout.containers_dir.is_dir():
            for entry in sorted(self.layout.containers_dir.iterdir()):
                record_path = entry / "record.json"
                if not record_path.is_file():
                    continue
                try:
                    record = load_record(record_path)
                    if record.id != entry.name:
                        raise RecordFormatError(
                            f"record id {record.id!r} does not match directory {entry.name!r}"
                        )
                except RecordFormatError as exc:
                    log.warning("quarantining %s: %s", record_path, exc)
                    self._quarantine(record_path, "corrupt")
                    continue
                self.records[record.id] = record

        reboots: list[ContainerRecord] = []
        rearm_grace: list[ContainerRecord] = []
        for record in self.records.values():
            kind = record.state.kind
            exit_path = self.layout.exit_path(record.id)
            if kind is StateKind.EXITED:
                continue
            if exit_path.is_file():
                self._ingest_one(record, exit_path)
                continue
            if kind is StateKind.LOST:
                continue
            if self.config.mode is SupervisionMode.COUPLED:
                self._reconcile_coupled(record, reboots)
                continue
            if kind is StateKind.CREATED:
                # Launch was in flight when the previous daemon died; no
                # identity was ever learned, so there is nothing to adopt.
                record.advance(ContainerState.lost())
                self._commit(record)
                continue
            container_alive = record.container is not None and sandbox.is_alive(
                record.container
            )
            if container_alive:
                self._adopt_live(record, rearm_grace)
            elif record.monitor is not None and sandbox.is_alive(record.monitor):
                # Container gone but its monitor is mid-exit-sequence; the
                # exit file will arrive, let ingestion report the truth.
                continue
            else:
                self._finish(
                    record,
                    ContainerState.exited(signal=int(signal.SIGKILL)),
                    unknown=True,
                )
        return reboots, rearm_grace

    def _adopt_live(
        self, record: ContainerRecord, rearm_grace: list[ContainerRecord]
    ) -> None:
        assert record.container is not None
        kind = record.state.kind
        proc_state = sandbox.proc_state(record.container.pid)
        if kind is StateKind.STOPPING:
            rearm_grace.append(record)  # keep Stopping; re-arm the kill timer
            return
        if proc_state == "T" and kind is StateKind.RUNNING:
            record.advance(ContainerState.paused())
            self._commit(record)
        elif proc_state != "T" and kind is StateKind.PAUSED:
            record.advance(ContainerState.running())
            self._commit(record)
        # otherwise the record already tells the truth; adopt as-is

    def _reconcile_coupled(
        self, record: ContainerRecord, reboots: list[ContainerRecord]
    ) -> None:
        """Baseline emulation: nothing running survives a daemon restart."""
        self._kill_supervision(record)
        with contextlib.suppress(FileNotFoundError):
            os.unlink(self.layout.exit_path(record.id))
        kind = record.state.kind
        if kind in (StateKind.RUNNING, StateKind.PAUSED):
            if kind is StateKind.PAUSED:
                record.advance(ContainerState.running())
            record.restart_count += 1
            record.monitor = None
            record.container = None
            reboots.append(record)
        elif kind is StateKind.STOPPING:
            self._finish(
                record,
                ContainerState.exited(signal=int(signal.SIGKILL)),
                unknown=True,
            )
        elif kind is StateKind.CREATED:
            record.advance(ContainerState.lost())
            self._commit(record)

    def _kill_supervision(self, record: ContainerRecord) -> None:
        """SIGKILL the monitor first (so no exit file appears), then the group."""
        if record.monitor is not None and sandbox.is_alive(record.monitor):
            with contextlib.suppress(ProcessLookupError, PermissionError):
                os.kill(record.monitor.pid, signal.SIGKILL)
        if record.container is not None and sandbox.is_alive(record.container):
            sandbox.signal_group(record.container.pid, signal.SIGKILL)

    def _abort_all_containers(self) -> None:
        """Coupled shutdown: containers die with the daemon. Disk records are
        left as they are, so the next start sees them as previously running
        and reboots them."""
        for record in self.records.values():
            if record.state.kind in _LIVE_KINDS:
                self._kill_supervision(record)

    # -- persistence ------------------------------------------------------------

    def _commit(self, record: ContainerRecord) -> None:
        self.records[record.id] = record
        dump_record(self.layout, record)

    def _finish(
        self,
        record: ContainerRecord,
        state: ContainerState,
        *,
        at_ms: int | None = None,
        unknown: bool = False,
    ) -> None:
        """Move a record to Exited, persist, and wake everything waiting."""
        record.advance(state, at_ms=at_ms)
        record.exit_unknown = unknown
        self._commit(record)
        self._wake_waiters(record)
        release = self._coupled_release.pop(record.id, None)
        if release is not None:
            release.set()

    def _wake_waiters(self, record: ContainerRecord) -> None:
        for future in self._waiters.pop(record.id, []):
            if not future.done():
                future.set_result(record)

    def _quarantine(self, path: Path, reason: str) -> None:
        with contextlib.suppress(OSError):
            os.replace(path, path.with_name(f"{path.name}.{reason}"))

    # -- exit ingestion -----------------------------------------------------------

    async def _ingest_loop(self) -> None:
        assert self._exit_wake is not None
        while True:
            self._ingest_exits()
            await self._exit_wake.wait()
            self._exit_wake.clear()

    def _ingest_exits(self) -> None:
        """Scan exits/ and settle every file for a not-yet-Exited record.

        The doorbell signal coalesces under load, so one wake must always
        process everything present.
        """
        try:
            paths = sorted(self.layout.exits_dir.glob("*.exit"))
        except OSError:
            return
        for path in paths:
            container_id = path.name[: -len(".exit")]
            record = self.records.get(container_id)
            if record is None:
                log.warning("exit file for unknown container %s", container_id)
                self._quarantine(path, "unknown")
                continue
            if record.state.kind is StateKind.EXITED:
                continue  # already settled; the file stays until rm
            self._ingest_one(record, path)

    def _ingest_one(self, record: ContainerRecord, path: Path) -> None:
        try:
            report = read_exit_report(path)
            if report.container_id != record.id:
                raise ExitFormatError(
                    f"exit file {path.name} reports id {report.container_id}"
                )
        except (ExitFormatError, OSError) as exc:
            log.warning("quarantining %s: %s", path, exc)
            self._quarantine(path, "corrupt")
            with contextlib.suppress(IllegalTransition):
                record.advance(ContainerState.lost())
                self._commit(record)
                self._wake_lost(record)
            return
        state = report.state()
        try:
            record.advance(state, at_ms=report.finished_at)
        except IllegalTransition:
            # A code-variant exit for a Paused record proves the group was
            # resumed out of band and ran to completion; take the legal path.
            record.advance(ContainerState.running())
            record.advance(state, at_ms=report.finished_at)
        record.exit_unknown = False
        self._commit(record)
        self._wake_waiters(record)
        release = self._coupled_release.pop(record.id, None)
        if release is not None:
            release.set()

    # -- orphan polling -----------------------------------------------------------

    async def _poll_loop(self) -> None:
        while True:
            await asyncio.sleep(self.config.poll_interval_ms / 1000.0)
            self._ingest_exits()  # catches any missed doorbell
            await self._poll_orphans()

    async def _poll_orphans(self) -> None:
        for record in list(self.records.values()):
            if record.id in self._pending_launch:
                continue  # a launch or relaunch is already in flight
            kind = record.state.kind
            if kind not in (StateKind.RUNNING, StateKind.STOPPING):
                continue
            monitor_alive = record.monitor is not None and sandbox.is_alive(
                record.monitor
            )
            if monitor_alive:
                continue
            if self.layout.exit_path(record.id).is_file():
                continue  # next ingest settles it
            container_alive = record.container is not None and sandbox.is_alive(
                record.container
            )
            if not container_alive:
                self._finish(
                    record,
                    ContainerState.exited(signal=int(signal.SIGKILL)),
                    unknown=True,
                )
                continue
            if kind is StateKind.STOPPING:
                continue  # the grace timer owns this group's fate
            assert record.container is not None
            if not record.spec.restart_on_monitor_loss:
                log.warning("monitor lost for %s; killing (restart disabled)", record.id)
                sandbox.signal_group(record.container.pid, signal.SIGKILL)
                self._finish(
                    record,
                    ContainerState.exited(signal=int(signal.SIGKILL)),
                    unknown=True,
                )
                continue
            log.warning("monitor lost for %s; rebooting container", record.id)
            sandbox.signal_group(record.container.pid, signal.SIGKILL)
            record.restart_count += 1
            record.monitor = None
            record.container = None
            await self._relaunch(record)

    async def _relaunch(self, record: ContainerRecord) -> None:
        """Launch a fresh supervision tree for a record that stays Running.

        Failures mark the record Lost.
        """
        outcome = await self._launch(record)
        if outcome is not None:
            log.warning("relaunch of %s failed: %s", record.id, outcome.detail)
            try:
                record.advance(ContainerState.lost())
            except IllegalTransition:
                pass
            else:
                self._commit(record)
            self._wake_lost(record)

    def _wake_lost(self, record: ContainerRecord) -> None:
        """A Lost record may never exit; fail its waiters honestly."""
        for future in self._waiters.pop(record.id, []):
            if not future.done():
                future.set_exception(ApiError("lost", f"{record.id} is lost"))

    # -- launching ---------------------------------------------------------------

    async def _launch(self, record: ContainerRecord) -> ApiError | None:
        """Fork a monitor for record and wait for its Launched handshake.

        On success: identities recorded, Created records advanced to
        Running, record persisted; returns None. On failure: returns the
        ApiError; the caller decides the record's fate (fresh runs report
        the spawn status, relaunches go Lost).
        """
        loop = asyncio.get_running_loop()
        with contextlib.suppress(FileNotFoundError):
            os.unlink(self.layout.exit_path(record.id))
        token = secrets.token_hex(8)
        launched: asyncio.Future[dict[str, Any]] = loop.create_future()
        self._pending_launch[record.id] = (token, launched)
        handle: LaunchHandle | None = None
        try:
            handle = fork_monitor(
                record.id,
                self.layout,
                self.config.mode,
                record.spec,
                self.identity,
                self.config.signal_plan,
                launch_token=token,
            )
            forked = self.reaper.watch(handle.child_pid)
            done, _ = await asyncio.wait(
                {launched, forked},
                timeout=self.config.handshake_timeout_ms / 1000.0,
                return_when=asyncio.FIRST_COMPLETED,
            )
            if launched in done:
                message = launched.result()
                record.monitor = ProcessIdentity.from_dict(message["monitor"])
                record.container = ProcessIdentity.from_dict(message["container"])
                record.started_at = now_ms()
                if record.state.kind is StateKind.CREATED:
                    record.advance(ContainerState.running())
                self._commit(record)
                self._start_coupled_waiter(record.id)
                return None
            if forked in done:
                status = forked.result()
                detail = read_spawn_failure(handle.err_fd) or "monitor died at launch"
                code = os.WEXITSTATUS(status) if os.WIFEXITED(status) else 126
                return ApiError("spawn_error", detail, exit_code=code or 126)
            # Timeout: the forked child is still out there; kill the direct
            # child (harmless post-handshake in decoupled mode, where it is
            # already gone) and let a late handshake be scavenged.
            with contextlib.suppress(ProcessLookupError):
                os.kill(handle.child_pid, signal.SIGKILL)
            return ApiError(
                "handshake_timeout",
                f"monitor for {record.id} did not report within "
                f"{self.config.handshake_timeout_ms} ms",
            )
        finally:
            self._pending_launch.pop(record.id, None)
            if handle is not None:
                self.reaper.unwatch(handle.child_pid)
                handle.close()

    def _start_coupled_waiter(self, container_id: str) -> None:
        """Coupled emulation: one blocking wait-thread per running container,
        holding per-container context, exactly the per-container daemon cost
        the other modes exist to avoid."""
        if self.config.mode is not SupervisionMode.COUPLED:
            return
        if container_id in self._coupled_release:
            return
        release = threading.Event()
        self._coupled_release[container_id] = release
        context = bytearray(os.urandom(WAITER_CONTEXT_BYTES))

        def wait_for_exit(held: bytearray = context) -> None:
            release.wait()
            del held

        thread = threading.Thread(
            target=wait_for_exit, name=f"wait-{container_id[:8]}", daemon=True
        )
        thread.start()

    # -- request dispatch ----------------------------------------------------------

    def _on_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        task = asyncio.create_task(self._serve_connection(reader, writer))
        self._conn_tasks.add(task)
        task.add_done_callback(self._conn_tasks.discard)

    async def _serve_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        try:
            try:
                request = decode_message(await reader.readline())
            except MessageFormatError as exc:
                await self._reply(writer, {"ok": False, "error": "bad_message", "detail": str(exc)})
                return
            op = str(request.get("op", ""))
            handler = getattr(self, f"_op_{op}", None)
            if handler is None or op.startswith("_"):
                await self._reply(writer, {"ok": False, "error": "unknown_op", "detail": op})
                return
            try:
                response = await handler(request)
            except ApiError as exc:
                response = {"ok": False, "error": exc.code, "detail": exc.detail}
            except (InvalidSpec, IllegalTransition) as exc:
                response = {"ok": False, "error": "invalid_request", "detail": str(exc)}
            except Exception:
                log.exception("op %s failed", op)
                response = {"ok": False, "error": "internal", "detail": op}
            await self._reply(writer, response)
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            if not writer.is_closing():
                writer.close()

    async def _reply(self, writer: asyncio.StreamWriter, payload: dict[str, Any]) -> None:
        writer.write(encode_message(payload))
        with contextlib.suppress(ConnectionError):
            await writer.drain()

    def _get(self, request: dict[str, Any]) -> ContainerRecord:
        container_id = str(request.get("id", ""))
        record = self.records.get(container_id)
        if record is None:
            raise ApiError("not_found", f"no container {container_id!r}")
        return record

    def _settled(self, request: dict[str, Any]) -> ContainerRecord:
        """Like _get, but refuses records whose launch is still in flight;
        until the handshake lands there is no process group to act on."""
        record = self._get(request)
        if record.id in self._pending_launch:
            raise ApiError(
                "launch_in_flight", f"{record.id} is still being launched"
            )
        return record

    def _summary(self, record: ContainerRecord) -> dict[str, Any]:
        return {
            "id": record.id,
            "state": record.state.kind.value,
            "exit_code": record.state.exit_code,
            "term_signal": record.state.term_signal,
            "exit_unknown": record.exit_unknown,
            "pid": record.container.pid if record.container else None,
            "start_ticks": record.container.start_ticks if record.container else None,
            "monitor_pid": record.monitor.pid if record.monitor else None,
            "restart_count": record.restart_count,
            "command": list(record.spec.command),
            "mode": record.mode.value,
            "created_at": record.created_at,
            "started_at": record.started_at,
            "finished_at": record.finished_at,
        }

    # -- ops: lifecycle -------------------------------------------------------------

    async def _op_run(self, request: dict[str, Any]) -> dict[str, Any]:
        try:
            spec = ContainerSpec.from_dict(request.get("spec") or {})
        except (InvalidSpec, KeyError, TypeError, ValueError) as exc:
            raise ApiError("invalid_spec", str(exc)) from None
        container_id = request.get("id") or new_container_id()
        if not is_container_id(container_id):
            raise ApiError("invalid_id", f"{container_id!r} is not a container id")
        if container_id in self.records:
            raise ApiError("id_in_use", container_id)
        record = ContainerRecord(
            id=container_id,
            spec=spec,
            mode=self.config.mode,
            created_at=now_ms(),
        )
        self._commit(record)
        failure = await self._launch(record)
        if failure is not None:
            if failure.code == "spawn_error":
                self._finish(record, ContainerState.exited(code=failure.exit_code or 126))
            else:
                record.advance(ContainerState.lost())
                self._commit(record)
                self._wake_lost(record)
            raise failure
        return self._run_response(record)

    def _run_response(self, record: ContainerRecord) -> dict[str, Any]:
        assert record.container is not None and record.monitor is not None
        return {
            "ok": True,
            "id": record.id,
            "pid": record.container.pid,
            "monitor_pid": record.monitor.pid,
            "monitor_sock": str(self.layout.monitor_sock(record.id)),
        }

    async def _op_start(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        if record.state.kind not in (StateKind.EXITED, StateKind.LOST):
            raise ApiError(
                "invalid_state", f"{record.id} is {record.state.kind.value}"
            )
        record.reset_for_relaunch()
        self._commit(record)
        failure = await self._launch(record)
        if failure is not None:
            if failure.code == "spawn_error":
                self._finish(record, ContainerState.exited(code=failure.exit_code or 126))
            else:
                record.advance(ContainerState.lost())
                self._commit(record)
                self._wake_lost(record)
            raise failure
        return self._run_response(record)

    async def _op_restart(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        grace_ms = int(request.get("grace_ms") or record.spec.stop_grace_ms)
        if record.state.kind is StateKind.PAUSED:
            # a fully stopped group ignores SIGTERM; resume it first
            self._signal_record(record, self.config.signal_plan.unpause)
            record.advance(ContainerState.running())
            self._commit(record)
        if record.state.kind is StateKind.RUNNING:
            self._begin_stop(record, grace_ms)
        if record.state.kind is StateKind.STOPPING:
            await self._await_exit(record, timeout_s=grace_ms / 1000.0 + 10.0)
        return await self._op_start({"op": "start", "id": record.id})

    async def _op_stop(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        kind = record.state.kind
        if kind is StateKind.EXITED:
            return {"ok": True, "id": record.id, "already": "exited"}
        if kind is StateKind.STOPPING:
            self._signal_record(record, self.config.signal_plan.stop)
            return {"ok": True, "id": record.id, "already": "stopping"}
        if kind is not StateKind.RUNNING:
            raise ApiError("invalid_state", f"{record.id} is {kind.value}")
        grace_ms = int(request.get("grace_ms") or record.spec.stop_grace_ms)
        self._begin_stop(record, grace_ms)
        return {"ok": True, "id": record.id}

    def _begin_stop(self, record: ContainerRecord, grace_ms: int) -> None:
        record.advance(ContainerState.stopping())
        self._commit(record)
        self._signal_record(record, self.config.signal_plan.stop)
        self._arm_grace_timer(record.id, grace_ms)

    def _arm_grace_timer(self, container_id: str, grace_ms: int) -> None:
        async def enforce() -> None:
            await asyncio.sleep(grace_ms / 1000.0)
            record = self.records.get(container_id)
            if record is not None and record.state.kind is StateKind.STOPPING:
                if record.container is not None:
                    sandbox.signal_group(
                        record.container.pid, self.config.signal_plan.kill
                    )

        task = asyncio.create_task(enforce())
        self._bg_tasks.add(task)
        task.add_done_callback(self._bg_tasks.discard)

    async def _op_kill(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        kind = record.state.kind
        if kind is StateKind.EXITED:
            return {"ok": True, "id": record.id, "already": "exited"}
        if kind in _LIVE_KINDS and record.container is not None:
            self._signal_record(record, self.config.signal_plan.kill)
            return {"ok": True, "id": record.id}
        if kind is StateKind.LOST and record.container is not None:
            sandbox.signal_group(record.container.pid, self.config.signal_plan.kill)
            return {"ok": True, "id": record.id}
        raise ApiError("invalid_state", f"{record.id} is {kind.value}")

    async def _op_pause(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        if record.state.kind is not StateKind.RUNNING:
            raise ApiError("invalid_state", f"{record.id} is {record.state.kind.value}")
        self._signal_record(record, self.config.signal_plan.pause)
        record.advance(ContainerState.paused())
        self._commit(record)
        return {"ok": True, "id": record.id}

    async def _op_unpause(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        if record.state.kind is not StateKind.PAUSED:
            raise ApiError("invalid_state", f"{record.id} is {record.state.kind.value}")
        self._signal_record(record, self.config.signal_plan.unpause)
        record.advance(ContainerState.running())
        self._commit(record)
        return {"ok": True, "id": record.id}

    async def _op_signal(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        if record.state.kind not in _LIVE_KINDS:
            raise ApiError("invalid_state", f"{record.id} is {record.state.kind.value}")
        signum = int(request.get("signum") or 0)
        if not 0 < signum < signal.NSIG:
            raise ApiError("invalid_request", f"bad signal number {signum}")
        delivered = (
            sandbox.signal_group(record.container.pid, signum)
            if record.container is not None
            else False
        )
        return {"ok": True, "id": record.id, "delivered": delivered}

    def _signal_record(self, record: ContainerRecord, signum: int) -> None:
        if record.container is None:
            raise ApiError("signal_failure", f"{record.id} has no process group")
        sandbox.signal_group(record.container.pid, signum)

    async def _op_rm(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._settled(request)
        if record.state.kind not in (StateKind.EXITED, StateKind.LOST):
            raise ApiError("rm_running", f"{record.id} is {record.state.kind.value}")
        self.records.pop(record.id, None)
        self._wake_lost(record)
        for path in (
            self.layout.exit_path(record.id),
            self.layout.log_path(record.id),
            self.layout.record_path(record.id),
            self.layout.monitor_sock(record.id),
        ):
            with contextlib.suppress(OSError):
                os.unlink(path)
        with contextlib.suppress(OSError):
            os.rmdir(self.layout.container_dir(record.id))
        return {"ok": True, "id": record.id}

    # -- ops: observation --------------------------------------------------------

    async def _op_ps(self, request: dict[str, Any]) -> dict[str, Any]:
        rows = [
            self._summary(record)
            for _, record in sorted(self.records.items())
        ]
        return {"ok": True, "containers": rows}

    async def _op_status(self, request: dict[str, Any]) -> dict[str, Any]:
        counts: dict[str, int] = {}
        for record in self.records.values():
            counts[record.state.kind.value] = counts.get(record.state.kind.value, 0) + 1
        return {
            "ok": True,
            "pid": self.identity.pid,
            "mode": self.config.mode.value,
            "state_dir": str(self.layout.root),
            # None while startup reboots are still in flight (the socket
            # serves early because relaunch handshakes arrive over it).
            "restore_ms": self.restore_ms,
            "uptime_ms": (
                now_ms() - self.serving_since_ms if self.serving_since_ms else 0
            ),
            "poll_interval_ms": self.config.poll_interval_ms,
            "containers": counts,
        }

    async def _op_wait(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._get(request)
        if record.state.kind is not StateKind.EXITED:
            future: asyncio.Future[ContainerRecord] = (
                asyncio.get_running_loop().create_future()
            )
            self._waiters.setdefault(record.id, []).append(future)
            record = await future
        return {
            "ok": True,
            "id": record.id,
            "exit_code": record.state.exit_code,
            "term_signal": record.state.term_signal,
            "exit_unknown": record.exit_unknown,
            "finished_at": record.finished_at,
            "restart_count": record.restart_count,
        }

    def _live_record(self, request: dict[str, Any]) -> ContainerRecord:
        record = self._settled(request)
        if record.state.kind not in _LIVE_KINDS or record.container is None:
            raise ApiError("not_running", f"{record.id} is {record.state.kind.value}")
        return record

    async def _op_top(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._live_record(request)
        assert record.container is not None
        sample = sandbox.sample_proc(record.container.pid, record.container.pid)
        return {
            "ok": True,
            "id": record.id,
            "sampled_at": sample.sampled_at,
            "processes": [
                {
                    "pid": row.pid,
                    "ppid": row.ppid,
                    "command": row.command,
                    "cpu_ticks": row.cpu_ticks,
                    "rss_bytes": row.rss_bytes,
                }
                for row in sample.rows
            ],
        }

    async def _op_stats(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._live_record(request)
        assert record.container is not None
        pid = record.container.pid
        first = sandbox.sample_proc(pid, pid)
        await asyncio.sleep(0.5)
        second = sandbox.sample_proc(pid, pid)
        ticks0 = sum(row.cpu_ticks for row in first.rows)
        ticks1 = sum(row.cpu_ticks for row in second.rows)
        elapsed_s = max((second.sampled_at - first.sampled_at) / 1000.0, 1e-3)
        clk_tck = os.sysconf("SC_CLK_TCK")
        cpu_percent = max(ticks1 - ticks0, 0) / clk_tck / elapsed_s * 100.0
        return {
            "ok": True,
            "id": record.id,
            "cpu_percent": round(cpu_percent, 2),
            "rss_bytes": sum(row.rss_bytes for row in second.rows),
            "processes": len(second.rows),
            "sampled_at": [first.sampled_at, second.sampled_at],
        }

    async def _op_logs(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._get(request)
        monitor_alive = record.monitor is not None and sandbox.is_alive(record.monitor)
        if monitor_alive:
            return {
                "ok": True,
                "id": record.id,
                "route": "monitor",
                "monitor_sock": str(self.layout.monitor_sock(record.id)),
            }
        return {
            "ok": True,
            "id": record.id,
            "route": "file",
            "log_path": str(self.layout.log_path(record.id)),
        }

    async def _op_attach(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._live_record(request)
        self._require_monitor(record)
        return {
            "ok": True,
            "id": record.id,
            "monitor_sock": str(self.layout.monitor_sock(record.id)),
        }

    async def _op_exec(self, request: dict[str, Any]) -> dict[str, Any]:
        record = self._get(request)
        if record.state.kind is not StateKind.RUNNING:
            raise ApiError("not_running", f"{record.id} is {record.state.kind.value}")
        self._require_monitor(record)
        return {
            "ok": True,
            "id": record.id,
            "monitor_sock": str(self.layout.monitor_sock(record.id)),
        }

    def _require_monitor(self, record: ContainerRecord) -> None:
        if record.monitor is None or not sandbox.is_alive(record.monitor):
            raise ApiError(
                "not_running", f"monitor for {record.id} is not available"
            )

    # -- ops: daemon control -------------------------------------------------------

    async def _op_launched(self, request: dict[str, Any]) -> dict[str, Any]:
        container_id = str(request.get("id", ""))
        pending = self._pending_launch.get(container_id)
        if pending is not None:
            token, future = pending
            # The token keeps a stale monitor (an earlier attempt for the
            # same id) from being mistaken for the launch in flight.
            if request.get("token") == token and not future.done():
                future.set_result(request)
                return {"ok": True}
        record = self.records.get(container_id)
        if record is not None and record.state.kind is StateKind.CREATED:
            # The launching daemon died before its handshake wait; adopt.
            record.monitor = ProcessIdentity.from_dict(request["monitor"])
            record.container = ProcessIdentity.from_dict(request["container"])
            record.started_at = now_ms()
            record.advance(ContainerState.running())
            self._commit(record)
            self._start_coupled_waiter(record.id)
            return {"ok": True}
        # Unwanted: the launch was written off (Lost) or the id is unknown.
        # Kill what just reported in; its exit file settles any Lost record.
        log.warning("scavenging unwanted launch for %s", container_id or "<no id>")
        try:
            container = ProcessIdentity.from_dict(request["container"])
        except Exception:
            return {"ok": False, "error": "unknown_id"}
        if sandbox.is_alive(container):
            sandbox.signal_group(container.pid, signal.SIGKILL)
        return {"ok": False, "error": "unwanted"}

    async def _op_shutdown(self, request: dict[str, Any]) -> dict[str, Any]:
        assert self._shutdown is not None
        # Let the reply flush before teardown starts cancelling connections.
        asyncio.get_running_loop().call_later(0.05, self._shutdown.set)
        return {"ok": True, "pid": self.identity.pid}

    async def _await_exit(self, record: ContainerRecord, *, timeout_s: float) -> None:
        if record.state.kind is StateKind.EXITED:
            return
        future: asyncio.Future[ContainerRecord] = (
            asyncio.get_running_loop().create_future()
        )
        self._waiters.setdefault(record.id, []).append(future)
        try:
            await asyncio.wait_for(future, timeout=timeout_s)
        except asyncio.TimeoutError:
            raise ApiError(
                "stop_timeout", f"{record.id} did not exit within {timeout_s:.1f}s"
            ) from None
