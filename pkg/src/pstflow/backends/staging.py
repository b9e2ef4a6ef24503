"""Data staging into and out of per-task sandboxes."""

from __future__ import annotations

import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ..model import StagingDirective, StagingMode


class StagingFailed(Exception):
    pass


class MissingSource(StagingFailed):
    pass


class DestinationUnwritable(StagingFailed):
    pass


@dataclass(frozen=True)
class StagingContext:
    """``source`` paths resolve against ``src_root``, destinations against ``dst_root``.

    In simulation nothing touches the filesystem and every operation costs
    ``op_cost`` seconds.
    """

    src_root: Path
    dst_root: Path
    simulated: bool = False
    op_cost: float = 0.0


@dataclass(frozen=True)
class StagingReport:
    files: int = 0
    bytes: int = 0
    duration: float = 0.0
    ops: tuple[tuple[str, str, int], ...] = field(default=(), compare=False)  # (mode, dest, bytes)


def _resolve(root: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else root / path


def _size(path: Path) -> int:
    if path.is_dir():
        return sum(f.stat().st_size for f in path.rglob("*") if f.is_file() and not f.is_symlink())
    return path.stat().st_size


def stage(directives: Sequence[StagingDirective], context: StagingContext) -> StagingReport:
    if context.simulated:
        ops = []
        for d in directives:
            src = _resolve(context.src_root, d.source)
            n = _size(src) if d.mode is StagingMode.COPY and src.exists() else 0
            ops.append((d.mode.value, d.destination, n))
        return StagingReport(len(ops), sum(o[2] for o in ops), context.op_cost * len(ops), tuple(ops))

    t0 = time.monotonic()
    try:
        context.dst_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DestinationUnwritable(f"{context.dst_root}: {exc}") from exc
    ops = []
    for d in directives:
        src = _resolve(context.src_root, d.source)
        dst = _resolve(context.dst_root, d.destination)
        if not src.exists() and not src.is_symlink():
            raise MissingSource(str(src))
        try:
            dst.parent.mkdir(parents=True, exist_ok=True)
            if dst.is_symlink() or dst.is_file():
                dst.unlink()
            if d.mode is StagingMode.COPY:
                if src.is_dir():
                    shutil.copytree(src, dst, dirs_exist_ok=True)
                else:
                    shutil.copyfile(src, dst)
                n = _size(dst)
            elif d.mode is StagingMode.LINK:
                os.symlink(src.resolve(), dst)
                n = 0
            else:
                shutil.move(str(src), str(dst))
                n = 0
        except OSError as exc:
            raise DestinationUnwritable(f"{dst}: {exc}") from exc
        ops.append((d.mode.value, str(dst), n))
    return StagingReport(len(ops), sum(o[2] for o in ops), time.monotonic() - t0, tuple(ops))


def aggregate(reports: Iterable[StagingReport]) -> StagingReport:
    files = nbytes = 0
    duration = 0.0
    for r in reports:
        files += r.files
        nbytes += r.bytes
        duration += r.duration
    return StagingReport(files, nbytes, duration)
