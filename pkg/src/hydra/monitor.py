"""The per-container supervisor process.

A monitor owns exactly one container: it spawns it, reports the launch to
the daemon, pumps the container's stdout/stderr into the framed log file and
any attached clients, serves the per-container socket (attach/exec/wait/
logs), and on container exit durably writes the exit file before ringing the
daemon's doorbell signal. It is stateless beyond its boot arguments, so no
daemon crash, restart, or upgrade changes its behavior.

This module also contains the daemon-side fork choreography that turns a
launch request into a running monitor (single fork for lazy/coupled modes,
double fork + parent-kill for decoupled mode).
"""

from __future__ import annotations

import asyncio
import collections
import contextlib
import json
import os
import signal
import sys
from dataclasses import dataclass
from typing import Any

from . import sandbox
from .model import (
    ContainerSpec,
    ExitReport,
    Isolation,
    ProcessIdentity,
    SupervisionMode,
)
from .protocol import (
    FRAME_EXIT_NOTICE,
    FRAME_STDERR,
    FRAME_STDIN,
    FRAME_STDOUT,
    FrameDecoder,
    FrameError,
    MessageFormatError,
    PidFileError,
    SignalPlan,
    StateDirLayout,
    decode_message,
    encode_exit_report,
    encode_frame,
    encode_message,
    read_pid_file,
    resolve_layout,
    write_exit_report,
)

__all__ = [
    "BOOT_ENV",
    "MONITOR_SUBCOMMAND",
    "MAX_MONITOR_CONNECTIONS",
    "MonitorBootArgs",
    "LaunchHandle",
    "fork_monitor",
    "read_spawn_failure",
    "monitor_entry",
    "ChildReaper",
]

BOOT_ENV = "HYDRA_MONITOR_BOOT"
MONITOR_SUBCOMMAND = "__monitor__"
MAX_MONITOR_CONNECTIONS = 16
_PUMP_CHUNK = 65536
_HANDSHAKE_ATTEMPTS = 30
_HANDSHAKE_RETRY_DELAY = 0.1
_DRAIN_AFTER_EXIT_S = 0.5
_SHUTDOWN_GRACE_S = 2.0


@dataclass(frozen=True, slots=True)
class MonitorBootArgs:
    """Everything a monitor needs, delivered through its environment at exec.

    The monitor never reads daemon memory; these values plus the state
    directory are its whole world.
    """

    container_id: str
    state_root: str
    mode: SupervisionMode
    spec: ContainerSpec
    daemon_identity: ProcessIdentity
    signal_plan: SignalPlan
    container: ProcessIdentity
    pgid: int
    stdin_fd: int
    stdout_fd: int
    stderr_fd: int
    parent_to_kill: int | None
    # Echoed in the Launched handshake so the daemon can tell this launch
    # attempt apart from a stale one for the same container id.
    launch_token: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "container_id": self.container_id,
                "state_root": self.state_root,
                "mode": self.mode.value,
                "spec": self.spec.to_dict(),
                "daemon_identity": self.daemon_identity.to_dict(),
                "signal_plan": self.signal_plan.to_dict(),
                "container": self.container.to_dict(),
                "pgid": self.pgid,
                "stdin_fd": self.stdin_fd,
                "stdout_fd": self.stdout_fd,
                "stderr_fd": self.stderr_fd,
                "parent_to_kill": self.parent_to_kill,
                "launch_token": self.launch_token,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, payload: str) -> MonitorBootArgs:
        data = json.loads(payload)
        return cls(
            container_id=data["container_id"],
            state_root=data["state_root"],
            mode=SupervisionMode(data["mode"]),
            spec=ContainerSpec.from_dict(data["spec"]),
            daemon_identity=ProcessIdentity.from_dict(data["daemon_identity"]),
            signal_plan=SignalPlan.from_dict(data["signal_plan"]),
            container=ProcessIdentity.from_dict(data["container"]),
            pgid=int(data["pgid"]),
            stdin_fd=int(data["stdin_fd"]),
            stdout_fd=int(data["stdout_fd"]),
            stderr_fd=int(data["stderr_fd"]),
            parent_to_kill=data.get("parent_to_kill"),
            launch_token=data.get("launch_token", ""),
        )


# ---------------------------------------------------------------------------
# Daemon-side launch choreography


@dataclass(slots=True)
class LaunchHandle:
    """The daemon's view of an in-flight launch: its direct child and the
    pipe any pre-exec failure is reported through."""

    child_pid: int
    err_fd: int

    def close(self) -> None:
        try:
            os.close(self.err_fd)
        except OSError:
            pass


def fork_monitor(
    container_id: str,
    layout: StateDirLayout,
    mode: SupervisionMode,
    spec: ContainerSpec,
    daemon_identity: ProcessIdentity,
    signal_plan: SignalPlan,
    launch_token: str = "",
) -> LaunchHandle:
    """Fork toward a monitor for one container; returns immediately.

    decoupled: daemon -> P1 -> P2; P2 starts a session, spawns the sandbox,
    and execs the monitor image. The monitor later kills P1, orphaning P2 so
    init adopts it: daemon and monitor become siblings. lazy/coupled: one
    fork; the monitor stays a daemon child.

    Success is learned via the monitor's Launched handshake on the daemon
    socket, never from here. Pre-exec failures arrive on err_fd and via the
    child's exit status.
    """
    err_r, err_w = os.pipe()
    pid1 = os.fork()
    if pid1 != 0:
        os.close(err_w)
        return LaunchHandle(child_pid=pid1, err_fd=err_r)

    # Child: never return into the daemon's stack; only os._exit.
    sandbox._reset_forked_runtime()
    os.close(err_r)
    try:
        if mode is SupervisionMode.DECOUPLED:
            # P1 exists only to be killed: its death reparents P2 to init.
            signal.signal(signal.SIGTERM, lambda *_: os._exit(0))
            pid2 = os.fork()
            if pid2 == 0:
                _setup_and_exec_monitor(
                    container_id,
                    layout,
                    mode,
                    spec,
                    daemon_identity,
                    signal_plan,
                    launch_token,
                    parent_to_kill=os.getppid(),
                    err_w=err_w,
                )
            os.close(err_w)
            _, status = os.waitpid(pid2, 0)  # interrupted by the SIGTERM parent-kill
            os._exit(os.WEXITSTATUS(status) if os.WIFEXITED(status) else 1)
        else:
            _setup_and_exec_monitor(
                container_id,
                layout,
                mode,
                spec,
                daemon_identity,
                signal_plan,
                launch_token,
                parent_to_kill=None,
                err_w=err_w,
            )
    except BaseException:  # noqa: BLE001
        os._exit(1)


def _setup_and_exec_monitor(
    container_id: str,
    layout: StateDirLayout,
    mode: SupervisionMode,
    spec: ContainerSpec,
    daemon_identity: ProcessIdentity,
    signal_plan: SignalPlan,
    launch_token: str,
    parent_to_kill: int | None,
    err_w: int,
) -> None:
    """Runs in the monitor-to-be: new session, sandbox spawn, exec. Never returns."""
    try:
        os.setsid()
        _detach_stdio(layout)
        handle = sandbox.spawn(spec)
        for fd in (handle.stdin_w, handle.stdout_r, handle.stderr_r):
            os.set_inheritable(fd, True)
        boot = MonitorBootArgs(
            container_id=container_id,
            state_root=str(layout.root),
            mode=mode,
            spec=spec,
            daemon_identity=daemon_identity,
            signal_plan=signal_plan,
            container=handle.container,
            pgid=handle.pgid,
            stdin_fd=handle.stdin_w,
            stdout_fd=handle.stdout_r,
            stderr_fd=handle.stderr_r,
            parent_to_kill=parent_to_kill,
            launch_token=launch_token,
        )
        env = dict(os.environ)
        env[BOOT_ENV] = boot.to_json()
        os.execve(
            sys.executable,
            [sys.executable, "-m", "hydra", MONITOR_SUBCOMMAND, container_id],
            env,
        )
    except sandbox.SpawnError as exc:
        _report_and_die(err_w, exc.errno, str(exc), code=127)
    except sandbox.IsolationUnsupported as exc:
        _report_and_die(err_w, 0, f"isolation_unsupported: {exc}", code=125)
    except BaseException as exc:  # noqa: BLE001
        _report_and_die(err_w, 0, f"monitor bootstrap failed: {exc!r}", code=126)


def _detach_stdio(layout: StateDirLayout) -> None:
    """Stop sharing the launching daemon's stdio.

    A monitor outlives its daemon; holding the daemon's terminal or pipes
    would keep them open for the container's whole life (and wedge anything
    capturing the daemon's output). Diagnostics go to a shared append-only
    file in the state dir instead.
    """
    devnull = os.open(os.devnull, os.O_RDONLY)
    os.dup2(devnull, 0)
    os.close(devnull)
    diag = os.open(
        layout.root / "monitor.log", os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o600
    )
    os.dup2(diag, 1)
    os.dup2(diag, 2)
    os.close(diag)


def _report_and_die(err_w: int, errno: int, message: str, code: int) -> None:
    try:
        os.write(err_w, f"{errno}\x00{message}".encode("utf-8", "replace"))
    except OSError:
        pass
    os._exit(code)


def read_spawn_failure(err_fd: int) -> str | None:
    """Drain a launch error pipe without blocking; None if nothing was reported."""
    os.set_blocking(err_fd, False)
    chunks = bytearray()
    while True:
        try:
            chunk = os.read(err_fd, 4096)
        except BlockingIOError:
            break
        except OSError:
            break
        if not chunk:
            break
        chunks += chunk
    if not chunks:
        return None
    _, _, message = chunks.decode("utf-8", "replace").partition("\x00")
    return message or chunks.decode("utf-8", "replace")


# ---------------------------------------------------------------------------
# Child reaping (shared by monitor and daemon event loops)


class ChildReaper:
    """SIGCHLD-driven reaper that hands wait statuses to interested futures.

    The signal handler (run on the loop, not in signal context) reaps every
    available child; statuses nobody has claimed yet are kept so a watcher
    registering after the death still gets its answer.
    """

    _MAX_UNCLAIMED = 4096

    def __init__(self) -> None:
        self._futures: dict[int, asyncio.Future[int]] = {}
        self._unclaimed: collections.OrderedDict[int, int] = collections.OrderedDict()

    def install(self, loop: asyncio.AbstractEventLoop) -> None:
        loop.add_signal_handler(signal.SIGCHLD, self.reap)
        # A child that died before the handler existed (a fast container can
        # beat this image's startup) will never signal again; sweep for it.
        self.reap()

    def reap(self) -> None:
        while True:
            try:
                pid, status = os.waitpid(-1, os.WNOHANG)
            except ChildProcessError:
                return
            if pid == 0:
                return
            future = self._futures.pop(pid, None)
            if future is not None and not future.done():
                future.set_result(status)
            else:
                self._unclaimed[pid] = status
                while len(self._unclaimed) > self._MAX_UNCLAIMED:
                    self._unclaimed.popitem(last=False)

    def watch(self, pid: int) -> asyncio.Future[int]:
        """A future resolving to pid's wait status (possibly already known)."""
        loop = asyncio.get_running_loop()
        future: asyncio.Future[int] = loop.create_future()
        if pid in self._unclaimed:
            future.set_result(self._unclaimed.pop(pid))
        else:
            self._futures[pid] = future
        return future

    def unwatch(self, pid: int) -> None:
        self._futures.pop(pid, None)


# ---------------------------------------------------------------------------
# The monitor process


class _Sink:
    """One streaming client; can buffer while a log replay is in flight."""

    def __init__(self, writer: asyncio.StreamWriter, *, buffering: bool = False):
        self.writer = writer
        self.backlog: collections.deque[bytes] | None = (
            collections.deque() if buffering else None
        )

    def send(self, frame: bytes) -> None:
        if self.backlog is not None:
            self.backlog.append(frame)
        elif not self.writer.is_closing():
            self.writer.write(frame)

    def release_backlog(self) -> None:
        assert self.backlog is not None
        while self.backlog:
            if not self.writer.is_closing():
                self.writer.write(self.backlog.popleft())
            else:
                self.backlog.clear()
        self.backlog = None


class Monitor:
    def __init__(self, boot: MonitorBootArgs):
        self.boot = boot
        self.layout = resolve_layout(boot.state_root)
        self.layout.container_dir(boot.container_id).mkdir(mode=0o700, exist_ok=True)
        self.reaper = ChildReaper()
        self.sinks: set[_Sink] = set()
        self.wait_futures: list[asyncio.Future[ExitReport]] = []
        self.exit_report: ExitReport | None = None
        self.exited = asyncio.Event()
        self.connections = 0
        self.conn_tasks: set[asyncio.Task] = set()
        self.log_fh = open(self.layout.log_path(boot.container_id), "ab")
        self.stdin_writer: asyncio.StreamWriter | None = None

    # -- lifecycle ----------------------------------------------------------

    async def run(self) -> int:
        loop = asyncio.get_running_loop()
        boot = self.boot
        for fd in (boot.stdin_fd, boot.stdout_fd, boot.stderr_fd):
            os.set_inheritable(fd, False)  # keep them out of exec-op children

        self.reaper.install(loop)
        container_status = self.reaper.watch(boot.container.pid)
        container_status.add_done_callback(self._container_reaped)

        # Serve before the handshake: the daemon's run reply names this
        # socket, so it must accept by the time any client can learn of it.
        sock_path = self.layout.monitor_sock(boot.container_id)
        with contextlib.suppress(FileNotFoundError):
            os.unlink(sock_path)
        server = await asyncio.start_unix_server(self._on_connection, path=str(sock_path))
        os.chmod(sock_path, 0o600)

        self.stdin_writer = await _open_pipe_writer(loop, boot.stdin_fd)
        pumps = [
            asyncio.create_task(self._pump(boot.stdout_fd, FRAME_STDOUT)),
            asyncio.create_task(self._pump(boot.stderr_fd, FRAME_STDERR)),
        ]

        await self._handshake()
        if boot.parent_to_kill is not None:
            # Orphans us away from the daemon: init adopts this process.
            with contextlib.suppress(ProcessLookupError):
                os.kill(boot.parent_to_kill, signal.SIGTERM)

        await self.exited.wait()
        report = self.exit_report
        assert report is not None

        # Capture what the container flushed before dying; descendants that
        # inherited the pipes could hold them open forever, so cap the wait.
        await asyncio.wait(pumps, timeout=_DRAIN_AFTER_EXIT_S)
        for pump in pumps:
            pump.cancel()

        code = 0
        if not self._write_exit_file(report):
            code = 1  # leave no false doorbell; the daemon's poller takes over
        else:
            self._ring_daemon()
        self._finish_waiters(report)
        self._broadcast_exit_notice(report)

        server.close()
        await server.wait_closed()
        # Parked connections (wait repliers, attach holders) were unblocked by
        # the broadcast; let them flush their last writes, cancel stragglers.
        if self.conn_tasks:
            _, pending = await asyncio.wait(
                self.conn_tasks, timeout=_SHUTDOWN_GRACE_S
            )
            for task in pending:
                task.cancel()
            if pending:
                await asyncio.wait(pending, timeout=1.0)
        with contextlib.suppress(FileNotFoundError):
            os.unlink(sock_path)
        self.log_fh.close()
        return code

    def _container_reaped(self, future: asyncio.Future[int]) -> None:
        status = future.result()
        self.exit_report = sandbox.report_from_status(self.boot.container_id, status)
        if self.stdin_writer is not None and not self.stdin_writer.is_closing():
            self.stdin_writer.close()
        self.exited.set()

    async def _handshake(self) -> None:
        """Tell the daemon both identities; harmless to fail (daemon may be gone)."""
        message = encode_message(
            {
                "op": "launched",
                "id": self.boot.container_id,
                "token": self.boot.launch_token,
                "monitor": sandbox.current_identity().to_dict(),
                "container": self.boot.container.to_dict(),
            }
        )
        for _ in range(_HANDSHAKE_ATTEMPTS):
            try:
                reader, writer = await asyncio.open_unix_connection(
                    str(self.layout.daemon_sock)
                )
            except (ConnectionError, FileNotFoundError, OSError):
                await asyncio.sleep(_HANDSHAKE_RETRY_DELAY)
                continue
            try:
                writer.write(message)
                await writer.drain()
                await asyncio.wait_for(reader.readline(), timeout=2.0)
                return
            except (ConnectionError, asyncio.TimeoutError, OSError):
                return  # daemon answered the connect; do not spam retries
            finally:
                writer.close()
                with contextlib.suppress(Exception):
                    await writer.wait_closed()

    def _write_exit_file(self, report: ExitReport) -> bool:
        for attempt in (0, 1):  # one retry on I/O failure
            try:
                write_exit_report(self.layout, report)
                return True
            except OSError:
                if attempt == 1:
                    return False
        return False

    def _ring_daemon(self) -> None:
        """Signal whichever daemon currently owns the state dir, if alive.

        The boot-time daemon may be gone and its pid recycled; daemon.pid is
        re-read so the signal never lands on an unrelated process. A missing
        or dead daemon is fine: it will scan exits/ when it next starts.
        """
        try:
            current = read_pid_file(self.layout.daemon_pid)
        except (OSError, PidFileError):
            return
        if not sandbox.is_alive(current):
            return
        with contextlib.suppress(ProcessLookupError, PermissionError):
            os.kill(current.pid, self.boot.signal_plan.exit_notify)

    def _finish_waiters(self, report: ExitReport) -> None:
        for future in self.wait_futures:
            if not future.done():
                future.set_result(report)
        self.wait_futures.clear()

    def _broadcast_exit_notice(self, report: ExitReport) -> None:
        frame = encode_frame(FRAME_EXIT_NOTICE, encode_exit_report(report).encode())
        for sink in list(self.sinks):
            sink.send(frame)
            # A sink mid-replay gets the notice via its backlog; its own task
            # closes the connection once the backlog is flushed.
            if sink.backlog is None and not sink.writer.is_closing():
                sink.writer.close()
        self.sinks.clear()

    # -- stdout/stderr pumping ---------------------------------------------

    async def _pump(self, fd: int, tag: int) -> None:
        loop = asyncio.get_running_loop()
        reader = asyncio.StreamReader(loop=loop)
        transport, _ = await loop.connect_read_pipe(
            lambda: asyncio.StreamReaderProtocol(reader, loop=loop),
            os.fdopen(fd, "rb", buffering=0),
        )
        try:
            while True:
                data = await reader.read(_PUMP_CHUNK)
                if not data:
                    break
                frame = encode_frame(tag, data)
                self.log_fh.write(frame)
                self.log_fh.flush()
                for sink in list(self.sinks):
                    sink.send(frame)
        finally:
            transport.close()

    # -- per-connection API ---------------------------------------------------

    def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        task = asyncio.create_task(self._serve_connection(reader, writer))
        self.conn_tasks.add(task)
        task.add_done_callback(self.conn_tasks.discard)

    async def _serve_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        if self.connections >= MAX_MONITOR_CONNECTIONS:
            writer.write(encode_message({"ok": False, "error": "connection_limit"}))
            with contextlib.suppress(Exception):
                await writer.drain()
            writer.close()
            return
        self.connections += 1
        try:
            try:
                request = decode_message(await reader.readline())
            except MessageFormatError as exc:
                await self._reply(writer, {"ok": False, "error": f"bad_message: {exc}"})
                return
            op = request.get("op")
            if op == "wait":
                await self._op_wait(writer)
            elif op == "attach":
                await self._op_attach(
                    reader, writer, replay=bool(request.get("replay", False))
                )
            elif op == "logs":
                await self._op_logs(
                    reader, writer, follow=bool(request.get("follow", False))
                )
            elif op == "exec":
                await self._op_exec(reader, writer, request)
            elif op == "ping":
                await self._reply(
                    writer,
                    {
                        "ok": True,
                        "id": self.boot.container_id,
                        "container": self.boot.container.to_dict(),
                        "exited": self.exit_report is not None,
                    },
                )
            else:
                await self._reply(writer, {"ok": False, "error": "unknown_op"})
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self.connections -= 1
            if not writer.is_closing():
                writer.close()

    async def _reply(self, writer: asyncio.StreamWriter, payload: dict[str, Any]) -> None:
        writer.write(encode_message(payload))
        await writer.drain()

    @staticmethod
    def _report_fields(report: ExitReport) -> dict[str, Any]:
        return {
            "exit_code": report.exit_code,
            "term_signal": report.term_signal,
            "finished_at": report.finished_at,
            "line": encode_exit_report(report).rstrip("\n"),
        }

    async def _op_wait(self, writer: asyncio.StreamWriter) -> None:
        if self.exit_report is None:
            future: asyncio.Future[ExitReport] = asyncio.get_running_loop().create_future()
            self.wait_futures.append(future)
            report = await future
        else:
            report = self.exit_report
        await self._reply(writer, {"ok": True, **self._report_fields(report)})

    async def _op_attach(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        *,
        replay: bool = False,
    ) -> None:
        """Bridge the client to the container's stdio.

        With replay (what a foreground `run` asks for), the captured log is
        streamed first so a command that finished before the client dialed
        in still shows its output; a plain attach is live-only and rejects
        an exited container.
        """
        if self.exit_report is not None and not replay:
            await self._reply(writer, {"ok": False, "error": "container_not_running"})
            return
        await self._reply(writer, {"ok": True})
        sink: _Sink | None = None
        if self.exit_report is None:
            # Buffer live frames during a replay; add + snapshot happen in
            # one loop step so nothing is lost or duplicated at the seam.
            sink = _Sink(writer, buffering=replay)
            self.sinks.add(sink)
        if replay:
            if not await self._replay_snapshot(writer):
                if sink is not None:
                    self.sinks.discard(sink)
                return
            if sink is None:
                self._send_exit_notice_to(writer)
                return
            sink.release_backlog()
            if self.exit_report is not None:
                return  # exit landed mid-replay; the notice left via backlog
        assert sink is not None
        decoder = FrameDecoder()
        try:
            while True:
                data = await reader.read(_PUMP_CHUNK)
                if not data:
                    await self._attach_eof(writer)
                    break
                try:
                    frames = decoder.feed(data)
                except FrameError:
                    break
                for tag, payload in frames:
                    if tag != FRAME_STDIN:
                        continue
                    stdin = self.stdin_writer
                    if stdin is None or stdin.is_closing():
                        continue  # container gone; swallow late keystrokes
                    stdin.write(payload)
                    await stdin.drain()
        finally:
            self.sinks.discard(sink)

    async def _attach_eof(self, writer: asyncio.StreamWriter) -> None:
        """The client half-closed its write side: end of stdin.

        Close the container's stdin so pipe readers see EOF, but keep the
        sink registered and stay on the connection until the exit notice has
        gone out (the broadcast closes the writer). A client that vanished
        outright instead of half-closing is caught by wait_closed once any
        write to it fails; a silent container can keep this handler parked
        until exit, which costs one connection slot and nothing else.
        """
        stdin = self.stdin_writer
        if stdin is not None and not stdin.is_closing():
            stdin.close()
        exited_task = asyncio.create_task(self.exited.wait())
        closed_task = asyncio.create_task(writer.wait_closed())
        try:
            await asyncio.wait(
                {exited_task, closed_task}, return_when=asyncio.FIRST_COMPLETED
            )
        finally:
            exited_task.cancel()
            closed_task.cancel()

    async def _op_logs(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        *,
        follow: bool,
    ) -> None:
        await self._reply(writer, {"ok": True})
        sink: _Sink | None = None
        if follow and self.exit_report is None:
            sink = _Sink(writer, buffering=True)
            self.sinks.add(sink)
        if not await self._replay_snapshot(writer):
            if sink is not None:
                self.sinks.discard(sink)
            return
        if sink is None:
            if self.exit_report is not None and follow:
                self._send_exit_notice_to(writer)
            return
        sink.release_backlog()
        # Live now; hold the connection until container exit (the backlog or
        # broadcast delivers the exit notice) or the client hangs up.
        exited_task = asyncio.create_task(self.exited.wait())
        hangup_task = asyncio.create_task(_drain_until_eof(reader))
        try:
            await asyncio.wait(
                {exited_task, hangup_task}, return_when=asyncio.FIRST_COMPLETED
            )
        finally:
            exited_task.cancel()
            hangup_task.cancel()
            self.sinks.discard(sink)

    async def _replay_snapshot(self, writer: asyncio.StreamWriter) -> bool:
        """Stream the log captured so far; False if the client hung up.

        The snapshot boundary is frozen before the first await, in the same
        loop step the caller registered its (buffering) sink, so live frames
        land in exactly one of the two streams.
        """
        self.log_fh.flush()
        snapshot_size = os.fstat(self.log_fh.fileno()).st_size
        try:
            with open(self.layout.log_path(self.boot.container_id), "rb") as replay:
                remaining = snapshot_size
                while remaining > 0:
                    chunk = replay.read(min(_PUMP_CHUNK, remaining))
                    if not chunk:
                        break
                    remaining -= len(chunk)
                    writer.write(chunk)
                    await writer.drain()
        except (ConnectionError, OSError):
            return False
        return True

    def _send_exit_notice_to(self, writer: asyncio.StreamWriter) -> None:
        assert self.exit_report is not None
        frame = encode_frame(
            FRAME_EXIT_NOTICE, encode_exit_report(self.exit_report).encode()
        )
        if not writer.is_closing():
            writer.write(frame)

    async def _op_exec(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        request: dict[str, Any],
    ) -> None:
        if self.exit_report is not None:
            await self._reply(writer, {"ok": False, "error": "container_not_running"})
            return
        command = tuple(request.get("command") or ())
        if not command or not command[0]:
            await self._reply(writer, {"ok": False, "error": "bad_command"})
            return
        env = tuple(request.get("env") or self.boot.spec.env)
        boot = self.boot
        try:
            handle = sandbox.spawn_exec(
                command,
                env,
                pgid=boot.pgid,
                ns_of_pid=(
                    boot.container.pid
                    if boot.spec.isolation is Isolation.NAMESPACES
                    else None
                ),
            )
        except (sandbox.SpawnError, sandbox.IsolationUnsupported) as exc:
            await self._reply(writer, {"ok": False, "error": str(exc)})
            return
        status_future = self.reaper.watch(handle.container.pid)
        await self._reply(writer, {"ok": True, "pid": handle.container.pid})

        stdin_writer = await _open_pipe_writer(asyncio.get_running_loop(), handle.stdin_w)
        out_task = asyncio.create_task(
            _pump_fd_to_writer(handle.stdout_r, FRAME_STDOUT, writer)
        )
        err_task = asyncio.create_task(
            _pump_fd_to_writer(handle.stderr_r, FRAME_STDERR, writer)
        )
        feed_task = asyncio.create_task(_feed_stdin(reader, stdin_writer))

        status = await status_future
        await asyncio.wait({out_task, err_task}, timeout=_DRAIN_AFTER_EXIT_S)
        for task in (out_task, err_task, feed_task):
            task.cancel()
        if not stdin_writer.is_closing():
            stdin_writer.close()
        report = sandbox.report_from_status(boot.container_id, status)
        with contextlib.suppress(ConnectionError):
            self._send_exec_notice(writer, report)
            await writer.drain()

    def _send_exec_notice(self, writer: asyncio.StreamWriter, report: ExitReport) -> None:
        frame = encode_frame(FRAME_EXIT_NOTICE, encode_exit_report(report).encode())
        if not writer.is_closing():
            writer.write(frame)


async def _open_pipe_writer(
    loop: asyncio.AbstractEventLoop, fd: int
) -> asyncio.StreamWriter:
    transport, protocol = await loop.connect_write_pipe(
        lambda: asyncio.streams.FlowControlMixin(loop=loop),
        os.fdopen(fd, "wb", buffering=0),
    )
    return asyncio.StreamWriter(transport, protocol, None, loop)


async def _pump_fd_to_writer(fd: int, tag: int, writer: asyncio.StreamWriter) -> None:
    loop = asyncio.get_running_loop()
    reader = asyncio.StreamReader(loop=loop)
    transport, _ = await loop.connect_read_pipe(
        lambda: asyncio.StreamReaderProtocol(reader, loop=loop),
        os.fdopen(fd, "rb", buffering=0),
    )
    try:
        while True:
            data = await reader.read(_PUMP_CHUNK)
            if not data:
                break
            if not writer.is_closing():
                writer.write(encode_frame(tag, data))
                await writer.drain()
    except ConnectionError:
        pass
    finally:
        transport.close()


async def _drain_until_eof(reader: asyncio.StreamReader) -> None:
    while await reader.read(_PUMP_CHUNK):
        pass


async def _feed_stdin(
    reader: asyncio.StreamReader, stdin_writer: asyncio.StreamWriter
) -> None:
    decoder = FrameDecoder()
    try:
        while True:
            data = await reader.read(_PUMP_CHUNK)
            if not data:
                break
            for tag, payload in decoder.feed(data):
                if tag == FRAME_STDIN and not stdin_writer.is_closing():
                    stdin_writer.write(payload)
                    await stdin_writer.drain()
    except (ConnectionError, FrameError):
        pass
    finally:
        if not stdin_writer.is_closing():
            stdin_writer.close()


def monitor_entry() -> int:
    """Process entry point for the hidden monitor subcommand."""
    payload = os.environ.pop(BOOT_ENV, None)
    if payload is None:
        print(f"{MONITOR_SUBCOMMAND} requires {BOOT_ENV}", file=sys.stderr)
        return 2
    boot = MonitorBootArgs.from_json(payload)
    return asyncio.run(Monitor(boot).run())
