"""Agent-side staging between the pilot staging area and unit sandboxes."""

from __future__ import annotations

import os
import shutil
from pathlib import Path

from ..exceptions import EscapePath, MissingOutput, MissingStagedFile
from ..model import StagingDirective, StagingMode


def resolve_inside(base, relative) -> Path:
    """Resolve ``relative`` under ``base``; refuse anything that leaves it."""
    base = Path(base).resolve()
    if os.path.isabs(str(relative)):
        raise EscapePath(f"{relative!r} is absolute")
    target = (base / relative).resolve()
    if target != base and base not in target.parents:
        raise EscapePath(f"{relative!r} resolves outside {base}")
    if target == base:
        raise EscapePath(f"{relative!r} names the sandbox itself")
    return target


def _place(source: Path, target: Path, mode: StagingMode):
    target.parent.mkdir(parents=True, exist_ok=True)
    if target.exists() or target.is_symlink():
        target.unlink()
    if mode is StagingMode.LINK:
        os.symlink(source, target)
    elif mode is StagingMode.MOVE:
        shutil.move(str(source), str(target))
    elif source.is_dir():
        shutil.copytree(source, target)
    else:
        shutil.copy2(source, target)


def link_inputs(directives, sandbox) -> list[Path]:
    """Make staged inputs available in the sandbox.

    Each directive's ``source`` is a file in the staging area and its
    ``destination`` a path relative to the sandbox. LINK shares the staged
    file, COPY duplicates it, MOVE hands it over.
    """
    sandbox = Path(sandbox)
    sandbox.mkdir(parents=True, exist_ok=True)
    directives = [StagingDirective.parse(d) for d in directives]
    targets = [resolve_inside(sandbox, d.destination) for d in directives]
    for d in directives:
        if not os.path.lexists(d.source):
            raise MissingStagedFile(d.source)
    for d, target in zip(directives, targets):
        _place(Path(d.source), target, d.mode)
    return targets


def collect_outputs(directives, sandbox) -> list[Path]:
    """Apply output directives: ``source`` inside the sandbox, ``destination`` anywhere."""
    sandbox = Path(sandbox)
    directives = [StagingDirective.parse(d) for d in directives]
    sources = [resolve_inside(sandbox, d.source) for d in directives]
    for d, src in zip(directives, sources):
        if not src.exists():
            raise MissingOutput(d.source)
    out = []
    for d, src in zip(directives, sources):
        target = Path(d.destination)
        if not target.is_absolute():
            target = sandbox / target
        _place(src, target, d.mode)
        out.append(target)
    return out
