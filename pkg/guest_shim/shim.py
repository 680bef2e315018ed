"""In-sandbox guest runtime.

Reads one init message from stdin, executes the supplied program source in a
fresh namespace where ``ImageObject`` is bound to a bridge-backed
implementation, and emits exactly one final message. Tool calls issued by the
program travel as line-delimited JSON over the real stdout; everything the
program itself prints is swallowed.

Runs standalone with no dependencies beyond the standard library:

    python shim.py < bridge-messages
"""

from __future__ import annotations

import builtins
import io
import json
import sys
import traceback


class BridgeProtocolViolation(Exception):
    """The host sent something that is not a well-formed bridge message."""


class Bridge:
    """One guest session's view of the host connection."""

    def __init__(self, reader, writer):
        self._reader = reader
        self._writer = writer
        self._next_call_id = 1
        self._final_sent = False

    def read_message(self) -> dict:
        line = self._reader.readline()
        if not line:
            raise BridgeProtocolViolation("host closed the connection")
        try:
            message = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BridgeProtocolViolation(f"unparseable message: {exc}")
        if not isinstance(message, dict) or "type" not in message:
            raise BridgeProtocolViolation("message is not an object with a type")
        return message

    def _write(self, message: dict) -> None:
        self._writer.write(json.dumps(message) + "\n")
        self._writer.flush()

    def tool_call(self, method: str, question=None) -> str:
        call_id = self._next_call_id
        self._next_call_id += 1
        message = {"type": "tool_call", "id": call_id, "method": method}
        if question is not None:
            message["question"] = question
        self._write(message)
        reply = self.read_message()
        if reply.get("type") != "tool_result" or reply.get("id") != call_id:
            raise BridgeProtocolViolation(f"expected tool_result id {call_id}, got {reply!r}")
        text = reply.get("text")
        if not isinstance(text, str):
            raise BridgeProtocolViolation("tool_result carries no text")
        return text

    def final_ok(self, answer=None) -> None:
        message = {"type": "final", "status": "ok"}
        if answer is not None:
            message["answer"] = answer
        self._final(message)

    def final_error(self, error_type: str, error_trace: str) -> None:
        self._final(
            {
                "type": "final",
                "status": "error",
                "error_type": error_type,
                "error_trace": error_trace,
            }
        )

    def _final(self, message: dict) -> None:
        if self._final_sent:
            return
        self._final_sent = True
        self._write(message)


class _ImageHandle:
    """Opaque stand-in for the session's image; only the shim gives it meaning."""

    def __init__(self, path: str):
        self.path = path

    def __repr__(self):
        return f"<image {self.path!r}>"


def make_image_object(bridge: Bridge):
    """The ImageObject class exposed to guest code, backed by the bridge."""

    class ImageObject:
        """Image class which holds the image and is able to answer questions."""

        def __init__(self, image):
            self._image = image

        def answer(self, question) -> str:
            return bridge.tool_call("answer", str(question))

        def describe(self) -> str:
            return bridge.tool_call("describe")

    return ImageObject


def stringify_answer(value) -> str:
    """Canonical answer text: integral floats render without a trailing .0."""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _install_guards(image_path: str) -> None:
    """Best-effort guards: no sockets, no file access beyond the image."""
    try:
        import socket

        def _blocked(*args, **kwargs):
            raise PermissionError("network access is not available in the guest sandbox")

        socket.socket = _blocked
        socket.create_connection = _blocked
    except ImportError:
        pass

    real_open = builtins.open

    def guarded_open(file, mode="r", *args, **kwargs):
        allowed = isinstance(file, (str, bytes)) and str(file) == image_path and "r" in mode and "w" not in mode and "a" not in mode and "+" not in mode
        if not allowed:
            raise PermissionError(f"file access is not available in the guest sandbox: {file!r}")
        return real_open(file, mode, *args, **kwargs)

    builtins.open = guarded_open


def run_session(reader, writer) -> None:
    """Serve exactly one guest session over the given streams."""
    bridge = Bridge(reader, writer)
    try:
        init = bridge.read_message()
    except BridgeProtocolViolation as exc:
        bridge.final_error("BridgeProtocolError", str(exc))
        return
    if init.get("type") != "init" or not isinstance(init.get("source"), str):
        bridge.final_error("BridgeProtocolError", f"expected init, got {init.get('type')!r}")
        return
    source = init["source"]
    answer_var = init.get("answer_var") or "ans"
    image_path = init.get("image_path") or ""

    _install_guards(image_path)
    namespace = {
        "__name__": "__guest__",
        "ImageObject": make_image_object(bridge),
        "image": _ImageHandle(image_path),
    }

    saved_stdout = sys.stdout
    sys.stdout = io.StringIO()
    try:
        exec(compile(source, "<guest>", "exec"), namespace)
    except BridgeProtocolViolation as exc:
        sys.stdout = saved_stdout
        bridge.final_error("BridgeProtocolError", str(exc))
        return
    except BaseException as exc:
        sys.stdout = saved_stdout
        trace = traceback.format_exception_only(type(exc), exc)
        bridge.final_error(type(exc).__name__, "".join(trace).strip())
        return
    finally:
        sys.stdout = saved_stdout

    if answer_var in namespace:
        bridge.final_ok(stringify_answer(namespace[answer_var]))
    else:
        bridge.final_ok(None)


def main() -> int:
    run_session(sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
