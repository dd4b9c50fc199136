"""Monitor socket behavior: attach, logs, wait, exec, against live engines."""

from __future__ import annotations

import threading

import pytest

from hydra.client import (
    MonitorStream,
    RequestFailed,
    exit_code_from_notice,
    read_log_frames,
)
from hydra.protocol import FRAME_EXIT_NOTICE, FRAME_STDERR, FRAME_STDOUT

from .conftest import wait_for


def collect_until_exit(stream: MonitorStream, *, timeout: float = 20.0):
    """All frames up to and including the exit notice."""
    got: list[tuple[int, bytes]] = []
    for tag, payload in stream.frames(timeout=timeout):
        got.append((tag, payload))
        if tag == FRAME_EXIT_NOTICE:
            break
    return got


def stream_bytes(frames, tag: int) -> bytes:
    return b"".join(payload for t, payload in frames if t == tag)


def exit_payload(frames) -> bytes:
    notices = [payload for t, payload in frames if t == FRAME_EXIT_NOTICE]
    assert notices, f"no exit notice in {frames!r}"
    return notices[-1]


def log_contains(engine, container_id: str, needle: bytes) -> bool:
    path = engine.layout.log_path(container_id)
    try:
        return needle in path.read_bytes()
    except OSError:
        return False


def test_ping_reports_identity(engine):
    reply = engine.run(["sleep", "30"])
    with MonitorStream(reply["monitor_sock"], {"op": "ping"}) as stream:
        assert stream.reply["id"] == reply["id"]
        assert stream.reply["exited"] is False
        assert stream.reply["container"]["pid"] == reply["pid"]


def test_attach_round_trips_stdin_to_stdout(engine):
    reply = engine.run(["cat"])
    with MonitorStream(reply["monitor_sock"], {"op": "attach"}) as stream:
        stream.send_stdin(b"first line\n")
        stream.send_stdin(b"\x00\xffbinary too\n")
        got = b""
        for tag, payload in stream.frames(timeout=10.0):
            if tag == FRAME_STDOUT:
                got += payload
            if got.endswith(b"binary too\n"):
                break
        assert got == b"first line\n\x00\xffbinary too\n"
        # half-close: cat sees stdin EOF, exits 0, notice comes back
        stream.close_write()
        frames = collect_until_exit(stream)
        assert exit_code_from_notice(exit_payload(frames)) == 0


def test_attach_keeps_stdout_and_stderr_apart(engine):
    reply = engine.run(["sh", "-c", "read x; echo ok-out; echo ok-err >&2"])
    with MonitorStream(reply["monitor_sock"], {"op": "attach"}) as stream:
        stream.send_stdin(b"go\n")
        frames = collect_until_exit(stream)
    assert stream_bytes(frames, FRAME_STDOUT) == b"ok-out\n"
    assert stream_bytes(frames, FRAME_STDERR) == b"ok-err\n"
    assert exit_code_from_notice(exit_payload(frames)) == 0


def test_attach_with_replay_recovers_earlier_output(engine):
    reply = engine.run(["sh", "-c", "echo early; sleep 30"])
    assert wait_for(lambda: log_contains(engine, reply["id"], b"early\n"))
    with MonitorStream(
        reply["monitor_sock"], {"op": "attach", "replay": True}
    ) as stream:
        engine.client.request("kill", id=reply["id"])
        frames = collect_until_exit(stream)
    assert b"early\n" in stream_bytes(frames, FRAME_STDOUT)
    assert exit_code_from_notice(exit_payload(frames)) == 137  # 128 + SIGKILL


def test_plain_attach_is_live_only(engine):
    reply = engine.run(["sh", "-c", "echo early; sleep 30"])
    assert wait_for(lambda: log_contains(engine, reply["id"], b"early\n"))
    with MonitorStream(reply["monitor_sock"], {"op": "attach"}) as stream:
        frames = list(stream.frames(timeout=0.5))
    assert stream_bytes(frames, FRAME_STDOUT) == b""


def test_logs_without_follow_ends_after_snapshot(engine):
    reply = engine.run(["sh", "-c", "echo one; sleep 30"])
    assert wait_for(lambda: log_contains(engine, reply["id"], b"one\n"))
    with MonitorStream(reply["monitor_sock"], {"op": "logs"}) as stream:
        frames = list(stream.frames(timeout=10.0))
    assert stream_bytes(frames, FRAME_STDOUT) == b"one\n"
    assert not any(tag == FRAME_EXIT_NOTICE for tag, _ in frames)


def test_logs_follow_streams_snapshot_then_live(engine):
    reply = engine.run(["sh", "-c", "echo one; sleep 0.4; echo two; exit 4"])
    assert wait_for(lambda: log_contains(engine, reply["id"], b"one\n"))
    with MonitorStream(
        reply["monitor_sock"], {"op": "logs", "follow": True}
    ) as stream:
        frames = collect_until_exit(stream)
    out = stream_bytes(frames, FRAME_STDOUT)
    assert out == b"one\ntwo\n"
    assert exit_code_from_notice(exit_payload(frames)) == 4


def test_wait_reports_exit_code(engine):
    reply = engine.run(["sh", "-c", "sleep 0.3; exit 5"])
    with MonitorStream(
        reply["monitor_sock"], {"op": "wait"}, timeout=20.0
    ) as stream:
        assert stream.reply["exit_code"] == 5
        assert stream.reply["term_signal"] is None


def test_wait_reports_signal_death(engine):
    reply = engine.run(["sleep", "60"])
    timer = threading.Timer(
        0.3, lambda: engine.client.request("kill", id=reply["id"])
    )
    timer.start()
    try:
        with MonitorStream(
            reply["monitor_sock"], {"op": "wait"}, timeout=20.0
        ) as stream:
            assert stream.reply["exit_code"] is None
            assert stream.reply["term_signal"] == 9
    finally:
        timer.cancel()


def test_exec_runs_alongside_container(engine):
    reply = engine.run(["sleep", "60"])
    with MonitorStream(
        reply["monitor_sock"],
        {"op": "exec", "command": ["sh", "-c", "echo hi-from-exec; exit 7"]},
    ) as stream:
        assert stream.reply["pid"] > 0
        frames = collect_until_exit(stream)
    assert stream_bytes(frames, FRAME_STDOUT) == b"hi-from-exec\n"
    assert exit_code_from_notice(exit_payload(frames)) == 7
    # the exec child must not disturb the container itself
    rows = engine.ps()
    assert rows[0]["state"] == "running"
    assert rows[0]["pid"] == reply["pid"]


def test_exec_feeds_stdin(engine):
    reply = engine.run(["sleep", "60"])
    with MonitorStream(
        reply["monitor_sock"], {"op": "exec", "command": ["cat"]}
    ) as stream:
        stream.send_stdin(b"through exec\n")
        stream.close_write()
        frames = collect_until_exit(stream)
    assert stream_bytes(frames, FRAME_STDOUT) == b"through exec\n"
    assert exit_code_from_notice(exit_payload(frames)) == 0


def test_exec_joins_container_process_group(engine):
    reply = engine.run(["sleep", "60"])
    with MonitorStream(
        reply["monitor_sock"],
        {"op": "exec", "command": ["sh", "-c", "ps -o pgid= -p $$"]},
    ) as stream:
        frames = collect_until_exit(stream)
    pgid = int(stream_bytes(frames, FRAME_STDOUT).strip())
    assert pgid == reply["pid"]


def test_exec_rejected_once_exited(engine):
    reply = engine.run(["true"])
    engine.client.request("wait", id=reply["id"])
    with pytest.raises(RequestFailed) as info:
        engine.client.request("exec", id=reply["id"])
    assert info.value.code == "not_running"


def test_fast_exit_output_lands_in_log(engine):
    reply = engine.run(["sh", "-c", "echo gone; exit 3"])
    done = engine.client.request("wait", id=reply["id"])
    assert done["exit_code"] == 3
    frames = list(read_log_frames(engine.layout.log_path(reply["id"])))
    assert stream_bytes(frames, FRAME_STDOUT) == b"gone\n"


def test_monitor_socket_removed_after_exit(engine):
    reply = engine.run(["true"])
    engine.client.request("wait", id=reply["id"])
    sock = engine.layout.monitor_sock(reply["id"])
    assert wait_for(lambda: not sock.exists())
