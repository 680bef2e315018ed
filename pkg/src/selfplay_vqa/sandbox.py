"""Guest program execution: process isolation, bridge mediation, run limits.

The host launches one guest process per run and speaks line-delimited JSON
over its stdin/stdout. Tool calls issued by the guest are mediated here, so
the host enforces the tool budget and rejects tool use from seeds that have
no tool. A scripted runner stands in for the process runner in tests.
"""

from __future__ import annotations

import hashlib
import json
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .errors import ScriptedMiss

OK = "ok"
ERROR = "error"
TIMEOUT = "timeout"

KILL_GRACE_SECONDS = 1.0
ANSWER_METHOD = "answer"
DESCRIBE_METHOD = "describe"

ToolHandle = Callable[[str, Optional[str]], str]


@dataclass(frozen=True)
class GuestProgram:
    source: str
    answer_var: str = "ans"
    example_id: str = ""
    seed_tag: str = ""
    attempt: int = 0

    def __post_init__(self):
        if not self.source:
            raise ValueError("guest program source must be nonempty")


@dataclass(frozen=True)
class ToolCall:
    method: str
    question: Optional[str]
    reply: str


@dataclass
class GuestRunResult:
    status: str
    answer: Optional[str] = None
    error_type: Optional[str] = None
    error_trace: Optional[str] = None
    tool_calls: list[ToolCall] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == OK and self.answer is not None

    @property
    def missing_answer(self) -> bool:
        return self.status == OK and self.answer is None


@dataclass(frozen=True)
class RunLimits:
    wall_timeout: float = 20.0
    max_tool_calls: int = 16
    max_output_bytes: int = 1 << 20

    def __post_init__(self):
        if self.wall_timeout <= 0 or self.max_tool_calls <= 0 or self.max_output_bytes <= 0:
            raise ValueError("run limits must be positive")


def _truncate(text: Optional[str], limit: int) -> Optional[str]:
    if text is None or len(text) <= limit:
        return text
    return text[:limit] + "...[truncated]"


class ProcessRunner:
    """Runs guest programs in a subprocess speaking the bridge protocol."""

    def __init__(self, shim_cmd: Sequence[str]):
        if not shim_cmd:
            raise ValueError("shim_cmd must name the guest runtime command")
        self.shim_cmd = list(shim_cmd)

    def run(
        self,
        program: GuestProgram,
        image_ref: str,
        tool: Optional[ToolHandle],
        limits: RunLimits,
    ) -> GuestRunResult:
        return run_guest(program, image_ref, tool, limits, self.shim_cmd)


def run_guest(
    program: GuestProgram,
    image_ref: str,
    tool: Optional[ToolHandle],
    limits: RunLimits,
    shim_cmd: Sequence[str],
) -> GuestRunResult:
    """Execute one guest program under limits, mediating its tool calls.

    Always returns a result: guest crashes, protocol violations, deadline
    overruns, and tool-budget overruns all map onto the error taxonomy.
    """
    start = time.monotonic()
    deadline = start + limits.wall_timeout
    tool_calls: list[ToolCall] = []

    def finish(status, answer=None, error_type=None, error_trace=None):
        return GuestRunResult(
            status=status,
            answer=answer,
            error_type=error_type,
            error_trace=_truncate(error_trace, limits.max_output_bytes),
            tool_calls=tool_calls,
            wall_time=time.monotonic() - start,
        )

    try:
        proc = subprocess.Popen(
            list(shim_cmd),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
    except OSError as exc:
        return finish(ERROR, error_type="ShimLaunchFailed", error_trace=str(exc))

    lines: queue.Queue = queue.Queue()

    def pump():
        # Chunked reads keep memory bounded even when the guest never emits a
        # newline; the budget check runs before a line is ever assembled.
        read = 0
        buf = ""
        try:
            while True:
                chunk = proc.stdout.readline(65536)
                if chunk == "":
                    break
                read += len(chunk)
                if read > limits.max_output_bytes:
                    lines.put(("overflow", None))
                    return
                buf += chunk
                if buf.endswith("\n"):
                    lines.put(("line", buf))
                    buf = ""
        except ValueError:
            pass
        finally:
            lines.put(("eof", None))

    reader = threading.Thread(target=pump, daemon=True)
    reader.start()

    stderr_chunks: list[str] = []

    def drain_stderr():
        # Keeps the guest from blocking on a full stderr pipe; retains a tail
        # for crash reports.
        kept = 0
        try:
            for chunk in proc.stderr:
                if kept < 65536:
                    stderr_chunks.append(chunk)
                    kept += len(chunk)
        except ValueError:
            pass

    threading.Thread(target=drain_stderr, daemon=True).start()

    def kill():
        try:
            proc.kill()
        except OSError:
            pass
        try:
            proc.wait(timeout=KILL_GRACE_SECONDS)
        except subprocess.TimeoutExpired:
            pass

    init = {
        "type": "init",
        "source": program.source,
        "answer_var": program.answer_var,
        "image_path": image_ref,
    }
    try:
        proc.stdin.write(json.dumps(init) + "\n")
        proc.stdin.flush()
    except (BrokenPipeError, OSError):
        kill()
        return finish(ERROR, error_type="GuestCrashed", error_trace="guest closed stdin before init")

    try:
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                kill()
                return finish(TIMEOUT, error_type="Timeout", error_trace=f"exceeded {limits.wall_timeout}s")
            try:
                kind, line = lines.get(timeout=min(remaining, 0.5))
            except queue.Empty:
                continue
            if kind == "overflow":
                kill()
                return finish(ERROR, error_type="OutputLimitExceeded", error_trace="guest output exceeded max_output_bytes")
            if kind == "eof":
                kill()
                stderr_tail = "".join(stderr_chunks)[-2000:]
                return finish(ERROR, error_type="GuestCrashed", error_trace=stderr_tail or "guest exited without a final message")
            try:
                message = json.loads(line)
                msg_type = message["type"]
            except (json.JSONDecodeError, KeyError, TypeError):
                kill()
                return finish(ERROR, error_type="BridgeProtocolError", error_trace=f"unparseable bridge message: {line[:200]!r}")

            if msg_type == "tool_call":
                if tool is None:
                    kill()
                    return finish(ERROR, error_type="ToolUnavailable", error_trace="seed has no tool; tool calls are not allowed")
                if len(tool_calls) >= limits.max_tool_calls:
                    kill()
                    return finish(ERROR, error_type="ToolBudgetExceeded", error_trace=f"more than {limits.max_tool_calls} tool calls")
                method = message.get("method", "")
                question = message.get("question")
                if method not in (ANSWER_METHOD, DESCRIBE_METHOD) or (method == ANSWER_METHOD and not question):
                    kill()
                    return finish(ERROR, error_type="BridgeProtocolError", error_trace=f"bad tool_call: {line[:200]!r}")
                if message.get("id") != len(tool_calls) + 1:
                    kill()
                    return finish(ERROR, error_type="BridgeProtocolError",
                                  error_trace=f"tool_call ids must increase from 1; got {message.get('id')!r}")
                try:
                    reply = tool(method, question)
                except Exception as exc:
                    kill()
                    return finish(ERROR, error_type="ToolFailed", error_trace=str(exc))
                tool_calls.append(ToolCall(method=method, question=question, reply=reply))
                try:
                    proc.stdin.write(json.dumps({"type": "tool_result", "id": message.get("id"), "text": reply}) + "\n")
                    proc.stdin.flush()
                except (BrokenPipeError, OSError):
                    kill()
                    return finish(ERROR, error_type="GuestCrashed", error_trace="guest went away mid tool call")
            elif msg_type == "final":
                kill()
                status = message.get("status")
                if status == "ok":
                    answer = message.get("answer")
                    return finish(OK, answer=_truncate(answer, limits.max_output_bytes))
                return finish(
                    ERROR,
                    error_type=message.get("error_type") or "UnknownGuestError",
                    error_trace=message.get("error_trace") or "",
                )
            else:
                kill()
                return finish(ERROR, error_type="BridgeProtocolError", error_trace=f"unexpected message type {msg_type!r}")
    finally:
        if proc.poll() is None:
            kill()
        for stream in (proc.stdin, proc.stdout, proc.stderr):
            try:
                stream.close()
            except (OSError, ValueError):
                pass


def fingerprint(source: str) -> str:
    """Stable identifier for a program's source text."""
    return hashlib.sha256(source.encode("utf-8")).hexdigest()


class ScriptedRunner:
    """In-process runner double: program fingerprint -> prearranged result."""

    def __init__(self):
        self._results: dict[str, GuestRunResult] = {}
        self.log: list[GuestProgram] = []
        self._lock = threading.Lock()

    def script(self, source: str, result: GuestRunResult) -> "ScriptedRunner":
        self._results[fingerprint(source)] = result
        return self

    def run(
        self,
        program: GuestProgram,
        image_ref: str,
        tool: Optional[ToolHandle],
        limits: RunLimits,
    ) -> GuestRunResult:
        with self._lock:
            self.log.append(program)
        key = fingerprint(program.source)
        if key not in self._results:
            raise ScriptedMiss(f"no scripted result for program {key[:12]}... ({program.source[:60]!r})")
        scripted = self._results[key]
        return GuestRunResult(
            status=scripted.status,
            answer=scripted.answer,
            error_type=scripted.error_type,
            error_trace=scripted.error_trace,
            tool_calls=list(scripted.tool_calls),
            wall_time=scripted.wall_time,
        )


def scripted_runner(script: dict[str, GuestRunResult] | None = None) -> ScriptedRunner:
    """Build a scripted runner from source-text -> result mappings."""
    runner = ScriptedRunner()
    for source, result in (script or {}).items():
        runner.script(source, result)
    return runner
