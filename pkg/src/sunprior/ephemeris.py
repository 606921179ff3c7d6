"""Solar altitude from latitude, longitude and UTC time.

Low-accuracy solar series (NOAA solar calculator / Meeus, "Astronomical
Algorithms" ch. 25), good to roughly 0.01 deg between 1950 and 2100. The
altitude is geometric: no refraction unless requested, no parallax.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone

from .errors import RangeError

J2000 = 2451545.0
_J2000_UTC = datetime(2000, 1, 1, 12, tzinfo=timezone.utc)
WINDOW_START = datetime(1950, 1, 1, tzinfo=timezone.utc)
WINDOW_END = datetime(2100, 1, 1, tzinfo=timezone.utc)
JD_MIN = 2433282.5  # 1950-01-01T00:00Z
JD_MAX = 2488069.5  # 2100-01-01T00:00Z
DELTA_T_SECONDS = 69.0


@dataclass(frozen=True)
class GeoTime:
    latitude_deg: float
    longitude_deg: float
    utc: datetime

    def __post_init__(self):
        if not (math.isfinite(self.latitude_deg) and -90.0 <= self.latitude_deg <= 90.0):
            raise RangeError(f"latitude {self.latitude_deg} outside [-90, 90]")
        if not (math.isfinite(self.longitude_deg) and -180.0 <= self.longitude_deg <= 180.0):
            raise RangeError(f"longitude {self.longitude_deg} outside [-180, 180]")
        utc = self.utc
        if utc.tzinfo is None:
            utc = utc.replace(tzinfo=timezone.utc)
            object.__setattr__(self, "utc", utc)
        _check_window(utc)


@dataclass(frozen=True)
class SolarPosition:
    altitude_deg: float
    declination_deg: float
    hour_angle_deg: float
    julian_day: float
    latitude_deg: float
    refraction_deg: float = 0.0

    @property
    def apparent_altitude_deg(self):
        return self.altitude_deg + self.refraction_deg


def _check_window(utc):
    if not (WINDOW_START <= utc < WINDOW_END):
        raise RangeError(f"timestamp {utc.isoformat()} outside [1950-01-01, 2100-01-01)")


def julian_day(utc):
    """Continuous Julian day (UT) of a timestamp; naive datetimes are UTC."""
    if utc.tzinfo is None:
        utc = utc.replace(tzinfo=timezone.utc)
    _check_window(utc)
    delta = utc - _J2000_UTC
    return J2000 + delta.days + (delta.seconds + delta.microseconds * 1e-6) / 86400.0


def solar_coordinates(jd):
    """Return ``(declination_deg, equation_of_time_minutes)`` at Julian day ``jd`` (UT)."""
    if not (JD_MIN <= jd < JD_MAX):
        raise RangeError(f"julian day {jd} outside the supported window")
    t = (jd + DELTA_T_SECONDS / 86400.0 - J2000) / 36525.0

    mean_long = (280.46646 + t * (36000.76983 + t * 0.0003032)) % 360.0
    mean_anom = 357.52911 + t * (35999.05029 - 0.0001537 * t)
    ecc = 0.016708634 - t * (0.000042037 + 0.0000001267 * t)
    m = math.radians(mean_anom)
    center = (
        math.sin(m) * (1.914602 - t * (0.004817 + 0.000014 * t))
        + math.sin(2 * m) * (0.019993 - 0.000101 * t)
        + math.sin(3 * m) * 0.000289
    )
    true_long = mean_long + center
    omega = math.radians(125.04 - 1934.136 * t)
    app_long = math.radians(true_long - 0.00569 - 0.00478 * math.sin(omega))

    seconds = 21.448 - t * (46.815 + t * (0.00059 - t * 0.001813))
    mean_obliq = 23.0 + (26.0 + seconds / 60.0) / 60.0
    obliq = math.radians(mean_obliq + 0.00256 * math.cos(omega))

    decl = math.degrees(math.asin(math.sin(obliq) * math.sin(app_long)))

    y = math.tan(obliq / 2.0) ** 2
    l0 = math.radians(mean_long)
    eot = (
        y * math.sin(2 * l0)
        - 2 * ecc * math.sin(m)
        + 4 * ecc * y * math.sin(m) * math.cos(2 * l0)
        - 0.5 * y * y * math.sin(4 * l0)
        - 1.25 * ecc * ecc * math.sin(2 * m)
    )
    return decl, 4.0 * math.degrees(eot)


def refraction_correction(altitude_deg):
    """Atmospheric refraction in degrees (NOAA approximation)."""
    if altitude_deg > 85.0:
        return 0.0
    te = math.tan(math.radians(altitude_deg))
    if altitude_deg > 5.0:
        arcsec = 58.1 / te - 0.07 / te**3 + 0.000086 / te**5
    elif altitude_deg > -0.575:
        a = altitude_deg
        arcsec = 1735.0 + a * (-518.2 + a * (103.4 + a * (-12.79 + a * 0.711)))
    else:
        arcsec = -20.772 / te
    return arcsec / 3600.0


def altitude_from_components(latitude_deg, declination_deg, hour_angle_deg):
    phi = math.radians(latitude_deg)
    dec = math.radians(declination_deg)
    h = math.radians(hour_angle_deg)
    s = math.sin(phi) * math.sin(dec) + math.cos(phi) * math.cos(dec) * math.cos(h)
    return math.degrees(math.asin(max(-1.0, min(1.0, s))))


def solar_altitude(gt, refraction=False):
    jd = julian_day(gt.utc)
    decl, eot = solar_coordinates(jd)
    minutes_ut = ((jd + 0.5) % 1.0) * 1440.0
    true_solar_time = (minutes_ut + eot + 4.0 * gt.longitude_deg) % 1440.0
    hour_angle = true_solar_time / 4.0 - 180.0
    alt = altitude_from_components(gt.latitude_deg, decl, hour_angle)
    refr = refraction_correction(alt) if refraction else 0.0
    return SolarPosition(alt, decl, hour_angle, jd, gt.latitude_deg, refr)


@dataclass(frozen=True)
class LabelError:
    index: int
    message: str


def _label_one(sample, refraction):
    gt = GeoTime(sample.latitude_deg, sample.longitude_deg, sample.utc)
    pos = solar_altitude(gt, refraction=refraction)
    alt = pos.apparent_altitude_deg if refraction else pos.altitude_deg
    return sample.with_altitude(alt)


def label_batch(records, strict=False, refraction=False, workers=1):
    """Attach solar altitude to every record.

    Returns ``(labeled, errors)``. In lenient mode records that fail
    validation are dropped and reported as :class:`LabelError` with their
    input index; in strict mode the first failure raises.
    """

    def work(item):
        i, rec = item
        try:
            return _label_one(rec, refraction), None
        except RangeError as exc:
            if strict:
                raise RangeError(f"record {i}: {exc}") from None
            return None, LabelError(i, str(exc))

    items = list(enumerate(records))
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]

    labeled = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    return labeled, errors
