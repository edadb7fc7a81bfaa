"""Running third-party restorers as shell commands.

A restorer is a command template with ``{in}`` (the sequence directory) and
``{out}`` (where the restored image must be written). Exit status 0 and a
readable image at ``{out}`` mean success.
"""

from __future__ import annotations

import logging
import os
import shlex
import shutil
import signal
import subprocess
import time
from pathlib import Path

from ..imgcore import Image, ImageIOError, load_image

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 600.0
OUTPUT_NAME = "restored.png"
_SHELL_BUILTINS = {"cd", "exec", "exit", "true", "false", "test", "[", ":", "echo", "printf", "sleep"}


class ExternalRestorerError(Exception):
    status = "error"


class ExternalExitError(ExternalRestorerError):
    status = "error"

    def __init__(self, returncode: int, log_path: Path):
        super().__init__(f"restorer exited with status {returncode} (log: {log_path})")
        self.returncode = returncode


class ExternalMissingOutput(ExternalRestorerError):
    status = "missing_output"


class ExternalTimeout(ExternalRestorerError):
    status = "timeout"


def check_template(cmd_template: str) -> None:
    for ph in ("{in}", "{out}"):
        if ph not in cmd_template:
            raise ValueError(f"command template lacks the {ph} placeholder: {cmd_template!r}")


def command_binary(cmd_template: str) -> str:
    """First word of the template, i.e. the program the shell will launch."""
    words = shlex.split(cmd_template.replace("{in}", "IN").replace("{out}", "OUT"))
    if not words:
        raise ValueError("empty command template")
    return words[0]


def binary_available(cmd_template: str) -> bool:
    prog = command_binary(cmd_template)
    if os.sep in prog:
        return os.access(prog, os.X_OK)
    return shutil.which(prog) is not None or prog in _SHELL_BUILTINS


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
    proc.wait()


def run_external_restorer(seq_dir: str | Path, cmd_template: str, workdir: str | Path,
                          timeout: float = DEFAULT_TIMEOUT_S) -> Image:
    """Run one restorer on ``seq_dir`` and load its output.

    stdout and stderr go to ``workdir/restorer.log``. On timeout the whole
    process group is killed.
    """
    check_template(cmd_template)
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    out_path = workdir / OUTPUT_NAME
    if out_path.exists():
        out_path.unlink()
    cmd = cmd_template.replace("{in}", shlex.quote(str(Path(seq_dir)))).replace("{out}", shlex.quote(str(out_path)))
    log_path = workdir / "restorer.log"
    start = time.monotonic()
    with open(log_path, "wb") as fh:
        fh.write(f"$ {cmd}\n".encode())
        fh.flush()
        proc = subprocess.Popen(cmd, shell=True, stdout=fh, stderr=subprocess.STDOUT,
                                stdin=subprocess.DEVNULL, start_new_session=True)
        try:
            rc = proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            raise ExternalTimeout(f"restorer exceeded {timeout:g} s (log: {log_path})") from None
    log.debug("restorer finished in %.2f s with status %d", time.monotonic() - start, rc)
    if rc != 0:
        raise ExternalExitError(rc, log_path)
    if not out_path.exists():
        raise ExternalMissingOutput(f"restorer wrote nothing to {out_path} (log: {log_path})")
    try:
        return load_image(out_path)
    except (ImageIOError, ValueError, OSError) as exc:
        raise ExternalMissingOutput(f"unreadable restorer output {out_path}: {exc}") from exc
