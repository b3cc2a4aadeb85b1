"""Launch command construction and task execution.

Tasks are programs: every unit runs as its own child process (in its own
process group) inside its sandbox.
"""

from __future__ import annotations

import os
import shlex
import shutil
import signal
import subprocess
import time
from dataclasses import dataclass, field
from typing import Mapping

from ..exceptions import MissingTemplate, SpawnFailure
from ..model import UnitDescription
from ..resources import ResourceConfig
from .slots import Placement

DIRECT = "DIRECT"
PARALLEL = "PARALLEL"


@dataclass(frozen=True)
class LaunchCommand:
    command: str
    workdir: str
    environment: Mapping[str, str]
    stdout: str
    stderr: str
    pre_exec: tuple = ()
    unit_environment: Mapping[str, str] = field(default_factory=dict)
    executable: str = ""

    @property
    def script(self) -> str:
        """Shell script run for the unit.

        pre_exec lines run first (any failure aborts the unit), then the
        unit environment is re-exported so it wins over pre_exec effects,
        then the launch command replaces the shell.
        """
        lines = [f"{line} || exit $?" for line in self.pre_exec]
        lines += [f"export {k}={shlex.quote(v)}" for k, v in sorted(self.unit_environment.items())]
        lines.append(f"exec {self.command}")
        return "\n".join(lines) + "\n"


def _substitute(template: str, values: Mapping[str, str]) -> str:
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


def build_launch_command(unit, placement: Placement, config: ResourceConfig, sandbox=None) -> LaunchCommand:
    """Render the unit's launch command from the resource templates."""
    desc: UnitDescription = unit.description
    sandbox = str(sandbox if sandbox is not None else (unit.sandbox or "."))
    kind = PARALLEL if desc.mpi else DIRECT
    template = config.launch_templates.get(kind)
    if template is None:
        raise MissingTemplate(kind)
    values = {
        "EXE": shlex.quote(desc.executable),
        "ARGS": shlex.join(desc.arguments),
        "NPROC": str(desc.cores),
        "NODES": ",".join(placement.nodes),
    }
    command = _substitute(template, values).strip()
    env = dict(config.environment)
    env.update({
        "PILOTKIT_UNIT_ID": unit.id,
        "PILOTKIT_CORES": str(placement.cores),
        "PILOTKIT_GPUS": str(placement.gpus),
        "PILOTKIT_PLACEMENT": ";".join(
            f"{a.node}:{','.join(map(str, a.cores))}" for a in placement.node_assignments),
    })
    env.update(desc.environment)
    return LaunchCommand(
        command=command,
        workdir=sandbox,
        environment=env,
        stdout=os.path.join(sandbox, "STDOUT"),
        stderr=os.path.join(sandbox, "STDERR"),
        pre_exec=tuple(desc.pre_exec),
        unit_environment=dict(desc.environment),
        executable=desc.executable,
    )


def check_executable(executable: str, env: Mapping[str, str] | None = None):
    path_var = (env or {}).get("PATH", os.environ.get("PATH", os.defpath))
    if os.sep in executable:
        if not (os.path.isfile(executable) and os.access(executable, os.X_OK)):
            raise SpawnFailure(f"{executable} is missing or not executable")
    elif shutil.which(executable, path=path_var) is None:
        raise SpawnFailure(f"{executable} not found on PATH")


def spawn(cmd: LaunchCommand) -> subprocess.Popen:
    """Start the unit process without waiting for it."""
    env = dict(os.environ)
    env.update(cmd.environment)
    exe = cmd.executable
    if exe and os.sep in exe:
        check_executable(os.path.join(cmd.workdir, exe), env)
    elif exe and not cmd.pre_exec:
        # pre_exec may alter PATH, so bare names are only checked without it
        check_executable(exe, env)
    try:
        with open(cmd.stdout, "wb") as out, open(cmd.stderr, "wb") as err:
            return subprocess.Popen(["/bin/sh", "-c", cmd.script], cwd=cmd.workdir, env=env,
                                    stdin=subprocess.DEVNULL, stdout=out, stderr=err,
                                    start_new_session=True, close_fds=True)
    except OSError as exc:
        raise SpawnFailure(str(exc)) from exc


def kill_process_group(proc: subprocess.Popen, sig=signal.SIGKILL):
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


@dataclass(frozen=True)
class ExecutionResult:
    exit_code: int
    started: float
    stopped: float


def execute_unit(cmd: LaunchCommand, timeout: float | None = None) -> ExecutionResult:
    """Run the command to completion and report its exit code and timing."""
    started = time.monotonic()
    proc = spawn(cmd)
    try:
        code = proc.wait(timeout)
    except subprocess.TimeoutExpired:
        kill_process_group(proc)
        code = proc.wait()
    return ExecutionResult(code, started, time.monotonic())
