"""
Wall-clock stamps for runs and log lines.

Stamps are rendered in the zone named by the TZ environment variable and
fall back to UTC when it is unset or unknown.
"""

from dataclasses import dataclass, field
from datetime import datetime, timezone
import os
from typing import Optional
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

DEFAULT_TIMEZONE = 'UTC'


def configured_timezone() -> ZoneInfo:
    name = os.environ.get('TZ') or DEFAULT_TIMEZONE
    try:
        return ZoneInfo(name)
    except (ZoneInfoNotFoundError, ValueError, OSError):
        return ZoneInfo(DEFAULT_TIMEZONE)


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def stamp(moment: Optional[datetime] = None) -> str:
    """ISO-8601 stamp (whole seconds) of ``moment``, now by default; naive values count as UTC."""
    moment = moment or _utc_now()
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return moment.astimezone(configured_timezone()).isoformat(timespec='seconds')


@dataclass
class RunClock:
    """Start and finish of one run, as recorded in run.json."""

    started: datetime = field(default_factory=_utc_now)
    finished: Optional[datetime] = None

    def finish(self) -> 'RunClock':
        self.finished = _utc_now()
        return self

    @property
    def elapsed_s(self) -> float:
        return ((self.finished or _utc_now()) - self.started).total_seconds()

    def to_dict(self) -> dict:
        return {
            'timezone': configured_timezone().key,
            'started_at': stamp(self.started),
            'finished_at': stamp(self.finished) if self.finished is not None else None,
            'elapsed_s': round(self.elapsed_s, 3),
        }
