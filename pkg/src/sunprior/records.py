"""Capture records and their JSONL wire format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import ParseError


@dataclass(frozen=True)
class GeoSample:
    latitude_deg: float
    longitude_deg: float
    utc: datetime
    tags: frozenset = field(default_factory=frozenset)
    altitude_deg: float | None = None
    image: str | None = None
    normalized: float | None = None
    bin: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(t.lower() for t in self.tags))

    def with_altitude(self, altitude_deg):
        return replace(self, altitude_deg=altitude_deg)


def parse_utc(text):
    """Parse an ISO-8601 timestamp; naive values are taken as UTC."""
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_utc(dt):
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _number(obj, key, line):
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"'{key}' must be a number, got {value!r}", line)
    if not math.isfinite(value):
        raise ParseError(f"'{key}' must be finite", line)
    return float(value)


def sample_from_dict(obj, line=None):
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", line)
    lat = _number(obj, "lat", line)
    lon = _number(obj, "lon", line)
    utc_text = obj.get("utc")
    if not isinstance(utc_text, str):
        raise ParseError(f"'utc' must be an ISO-8601 string, got {utc_text!r}", line)
    try:
        utc = parse_utc(utc_text)
    except ValueError as exc:
        raise ParseError(f"bad timestamp {utc_text!r}: {exc}", line) from None
    tags = obj.get("tags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise ParseError("'tags' must be an array of strings", line)
    altitude = obj.get("altitude_deg")
    if altitude is not None:
        altitude = _number(obj, "altitude_deg", line)
    image = obj.get("image")
    return GeoSample(lat, lon, utc, frozenset(tags), altitude, image)


def sample_to_dict(sample):
    out = {
        "lat": sample.latitude_deg,
        "lon": sample.longitude_deg,
        "utc": format_utc(sample.utc),
    }
    if sample.tags:
        out["tags"] = sorted(sample.tags)
    if sample.image is not None:
        out["image"] = sample.image
    if sample.altitude_deg is not None:
        out["altitude_deg"] = round(sample.altitude_deg, 4)
    if sample.normalized is not None:
        out["normalized"] = round(sample.normalized, 6)
        out["bin"] = sample.bin
    return out


def dumps_jsonl(samples):
    return "".join(json.dumps(sample_to_dict(s)) + "\n" for s in samples)
