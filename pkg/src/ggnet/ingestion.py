"""On-disk dataset format and a client for the NASA POWER point API.

A dataset directory holds ``data.csv`` (long form, one row per observed
value) and ``meta.json`` (channel catalogue, location table, full time
index, resolution and format version).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from importlib import resources
from pathlib import Path

import numpy as np
import requests

from .dataset import SpatioTemporalDataset
from .exceptions import CatalogueError, ConfigError, FetchError, FormatError, ParseError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DATA_HEADER = ("location_id", "timestamp", "channel", "value", "observed")
RESOLUTIONS = ("daily", "hourly")
DEFAULT_BASE_URL = "https://power.larc.nasa.gov/api/temporal/{resolution}/point"
BASE_URL_ENV = "GGNET_POWER_BASE_URL"
DEFAULT_FILL_VALUE = -999.0


# --------------------------------------------------------------------- dataset directory

def save_dataset(ds: SpatioTemporalDataset, path, fill_value=DEFAULT_FILL_VALUE):
    """Write ``ds`` in canonical order (location, time, channel); only observed rows go to CSV."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "data.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DATA_HEADER)
            for n, t, d in np.argwhere(ds.mask == 1):
                w.writerow([ds.location_ids[n], ds.timestamps[t], ds.channel_names[d],
                            repr(float(ds.values[n, t, d])), 1])
        (out / "meta.json").write_text(json.dumps(_meta(ds, fill_value), indent=2) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write dataset to {out}: {exc.strerror or exc}") from exc
    return out


def _meta(ds, fill_value):
    coords = ds.coords
    return {
        "format_version": FORMAT_VERSION,
        "resolution": ds.resolution,
        "fill_value": fill_value,
        "channels": [{"name": c, "unit": u} for c, u in zip(ds.channel_names, ds.units)],
        "locations": [{"id": lid,
                       "lat": None if coords is None else float(coords[i, 0]),
                       "lon": None if coords is None else float(coords[i, 1])}
                      for i, lid in enumerate(ds.location_ids)],
        "timestamps": list(ds.timestamps),
    }


def _check_timestamps(stamps, resolution):
    if resolution not in RESOLUTIONS:
        raise FormatError(f"unknown resolution {resolution!r}")
    parsed = []
    for s in stamps:
        try:
            ts = datetime.fromisoformat(s)
        except (TypeError, ValueError):
            raise FormatError(f"timestamp {s!r} is not ISO-8601") from None
        if resolution == "daily" and (len(s) != 10 or ts.time() != datetime.min.time()):
            raise FormatError(f"timestamp {s!r} does not match daily resolution")
        if resolution == "hourly" and (ts.minute or ts.second):
            raise FormatError(f"timestamp {s!r} does not match hourly resolution")
        parsed.append(ts)
    if any(b <= a for a, b in zip(parsed, parsed[1:])):
        raise FormatError("timestamps must be strictly increasing")


def load_dataset(path) -> SpatioTemporalDataset:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root / 'meta.json'}: invalid JSON ({exc.msg})") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version!r}")
    try:
        channels = [c["name"] for c in meta["channels"]]
        units = [c.get("unit", "") for c in meta["channels"]]
        locations = meta["locations"]
        stamps = list(meta["timestamps"])
        resolution = meta.get("resolution", "daily")
    except (KeyError, TypeError) as exc:
        raise FormatError(f"meta.json lacks required field {exc}") from None
    _check_timestamps(stamps, resolution)
    ids = [loc["id"] for loc in locations]
    for name, keys in (("location", ids), ("channel", channels), ("timestamp", stamps)):
        if len(set(keys)) != len(keys):
            raise FormatError(f"duplicate {name} in meta.json")
    coords = None
    if locations and all(loc.get("lat") is not None for loc in locations):
        coords = np.array([[loc["lat"], loc["lon"]] for loc in locations], dtype=np.float64)
    li = {k: i for i, k in enumerate(ids)}
    ti = {k: i for i, k in enumerate(stamps)}
    ci = {k: i for i, k in enumerate(channels)}
    values = np.zeros((len(ids), len(stamps), len(channels)))
    mask = np.zeros(values.shape, dtype=np.uint8)
    seen = np.zeros(values.shape, dtype=bool)
    csv_path = root / "data.csv"
    try:
        fh = open(csv_path, newline="")
    except FileNotFoundError:
        raise FormatError(f"{root}: missing data.csv") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != DATA_HEADER:
            raise FormatError(f"{csv_path}: header must be {','.join(DATA_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(DATA_HEADER):
                raise FormatError(f"{csv_path}:{row_no}: expected 5 fields, got {len(row)}")
            lid, stamp, channel, raw, observed = row
            if channel not in ci:
                raise CatalogueError(f"{csv_path}:{row_no}: channel {channel!r} not in catalogue")
            if lid not in li:
                raise FormatError(f"{csv_path}:{row_no}: unknown location {lid!r}")
            if stamp not in ti:
                raise FormatError(f"{csv_path}:{row_no}: timestamp {stamp!r} not in time index")
            idx = (li[lid], ti[stamp], ci[channel])
            if seen[idx]:
                raise FormatError(f"{csv_path}:{row_no}: duplicate entry for "
                                  f"({lid}, {stamp}, {channel})")
            seen[idx] = True
            if observed not in ("0", "1"):
                raise FormatError(f"{csv_path}:{row_no}: observed must be 0 or 1")
            if observed == "1":
                try:
                    values[idx] = float(raw)
                except ValueError:
                    raise FormatError(f"{csv_path}:{row_no}: value {raw!r} is not a number") from None
                mask[idx] = 1
    return SpatioTemporalDataset(values, mask, tuple(channels), tuple(stamps), tuple(ids),
                                 coords, resolution, tuple(units))


# --------------------------------------------------------------------- static assets

def _asset(name):
    return resources.files("ggnet").joinpath("data", name).read_text()


def world_capitals():
    """Rows of the bundled national-capitals table as dicts with float ``lat``/``lon``."""
    rows = list(csv.DictReader(io.StringIO(_asset("world_capitals.csv"))))
    for r in rows:
        r["lat"], r["lon"] = float(r["lat"]), float(r["lon"])
    return rows


def parameter_catalogue(resolution="daily"):
    """POWER parameter codes available at ``resolution`` with names and units."""
    if resolution not in RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {RESOLUTIONS}")
    rows = csv.DictReader(io.StringIO(_asset("power_parameters.csv")))
    return [r for r in rows if r[resolution] == "1"]


# --------------------------------------------------------------------- POWER client

def _as_date(value):
    if isinstance(value, date):
        return value
    try:
        return date.fromisoformat(str(value))
    except ValueError:
        raise ConfigError(f"dates must be YYYY-MM-DD, got {value!r}") from None


@dataclass(frozen=True)
class PowerRequest:
    latitude: float
    longitude: float
    start: date
    end: date
    parameters: tuple = ()
    resolution: str = "daily"
    community: str = "RE"
    location_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "start", _as_date(self.start))
        object.__setattr__(self, "end", _as_date(self.end))
        object.__setattr__(self, "parameters", tuple(self.parameters))
        if self.end < self.start:
            raise ConfigError(f"empty date range {self.start} .. {self.end}")
        if not self.parameters:
            raise ConfigError("parameter list is empty")
        if self.resolution not in RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {RESOLUTIONS}")
        if not (-90 <= self.latitude <= 90 and -180 <= self.longitude <= 180):
            raise ConfigError(f"invalid coordinates ({self.latitude}, {self.longitude})")
        if not self.location_id:
            object.__setattr__(self, "location_id", f"{self.latitude:.4f}_{self.longitude:.4f}")

    def query(self):
        return {
            "parameters": ",".join(self.parameters),
            "community": self.community,
            "latitude": self.latitude,
            "longitude": self.longitude,
            "start": self.start.strftime("%Y%m%d"),
            "end": self.end.strftime("%Y%m%d"),
            "format": "JSON",
        }

    def time_axis(self):
        """``(payload keys, ISO timestamps)`` expected for this request."""
        days = (self.end - self.start).days + 1
        dates = [self.start + timedelta(days=i) for i in range(days)]
        if self.resolution == "daily":
            return [d.strftime("%Y%m%d") for d in dates], [d.isoformat() for d in dates]
        keys, stamps = [], []
        for d in dates:
            for h in range(24):
                keys.append(f"{d.strftime('%Y%m%d')}{h:02d}")
                stamps.append(f"{d.isoformat()}T{h:02d}:00")
        return keys, stamps


def capital_requests(start, end, resolution="daily", parameters=None):
    """One request per bundled capital, using the full catalogue by default."""
    if parameters is None:
        parameters = [r["code"] for r in parameter_catalogue(resolution)]
    return [PowerRequest(r["lat"], r["lon"], start, end, tuple(parameters), resolution,
                         location_id=r["location_id"]) for r in world_capitals()]


def base_url(resolution, override=None):
    url = override or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL
    return url.format(resolution=resolution)


def parse_power_payload(payload, request: PowerRequest):
    """``(values (T, D), mask (T, D))`` from a POWER JSON document.

    Fill values become mask 0.  Any mismatch between the payload's date axis
    and the requested range is an error.
    """
    excerpt = json.dumps(payload)[:200] if not isinstance(payload, str) else payload[:200]
    try:
        params = payload["properties"]["parameter"]
        fill = float((payload.get("header") or {}).get("fill_value", DEFAULT_FILL_VALUE))
    except (KeyError, TypeError, AttributeError):
        raise ParseError(f"unexpected payload layout: {excerpt}") from None
    keys, _ = request.time_axis()
    values = np.zeros((len(keys), len(request.parameters)))
    mask = np.zeros(values.shape, dtype=np.uint8)
    for d, code in enumerate(request.parameters):
        series = params.get(code) if isinstance(params, dict) else None
        if not isinstance(series, dict):
            raise ParseError(f"parameter {code} missing from payload: {excerpt}")
        if set(series) != set(keys):
            extra = sorted(set(series) - set(keys))[:3]
            missing = sorted(set(keys) - set(series))[:3]
            raise ParseError(f"date axis of {code} disagrees with the requested range "
                             f"(unexpected {extra}, missing {missing})")
        for t, k in enumerate(keys):
            v = series[k]
            if v is None:
                continue
            try:
                v = float(v)
            except (TypeError, ValueError):
                raise ParseError(f"non-numeric value {v!r} for {code} at {k}") from None
            if v != fill and np.isfinite(v):
                values[t, d] = v
                mask[t, d] = 1
    return values, mask


@dataclass
class FetchReport:
    succeeded: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)


def _download(request, url, retries, backoff, session, sleep, timeout):
    last = None
    for attempt in range(retries + 1):
        try:
            resp = session.get(url, params=request.query(), timeout=timeout)
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError:
                    raise ParseError(f"response is not JSON: {resp.text[:200]}") from None
            last = f"HTTP {resp.status_code}"
        except requests.RequestException as exc:
            last = f"{type(exc).__name__}: {exc}"
        if attempt < retries:
            sleep(backoff * 2 ** attempt)
    raise FetchError(f"{request.location_id}: giving up after {retries + 1} attempts ({last})")


def fetch_power(reqs, rate_limit=1.0, retries=3, fixtures=None, url=None, session=None,
                sleep=time.sleep, backoff=1.0, timeout=60.0):
    """Fetch one series per request and assemble a dataset.

    ``rate_limit`` is the minimum number of seconds between network calls.
    With ``fixtures`` set, responses are read from ``<fixtures>/<location_id>.json``
    and no network access happens.  Returns ``(dataset, report)``; locations
    that failed are left out of the dataset and listed in ``report.failures``.
    """
    reqs = list(reqs)
    report = FetchReport()
    if not reqs:
        return SpatioTemporalDataset(np.zeros((0, 0, 0)), np.zeros((0, 0, 0))), report
    first = reqs[0]
    for r in reqs[1:]:
        if (r.parameters, r.resolution, r.start, r.end) != (
                first.parameters, first.resolution, first.start, first.end):
            raise ConfigError("all requests must share parameters, resolution and date range")
    if len({r.location_id for r in reqs}) != len(reqs):
        raise ConfigError("location ids must be unique")
    _, stamps = first.time_axis()
    endpoint = base_url(first.resolution, url)
    session = session or requests.Session()
    series, coords, ids = [], [], []
    last_call = None
    for r in reqs:
        try:
            if fixtures is not None:
                path = Path(fixtures) / f"{r.location_id}.json"
                try:
                    payload = json.loads(path.read_text())
                except FileNotFoundError:
                    raise FetchError(f"{r.location_id}: no fixture at {path}") from None
            else:
                if last_call is not None:
                    wait = rate_limit - (time.monotonic() - last_call)
                    if wait > 0:
                        sleep(wait)
                last_call = time.monotonic()
                payload = _download(r, endpoint, retries, backoff, session, sleep, timeout)
            values, mask = parse_power_payload(payload, r)
        except FetchError as exc:
            log.warning("%s", exc)
            report.failures[r.location_id] = str(exc)
            continue
        series.append((values, mask))
        coords.append((r.latitude, r.longitude))
        ids.append(r.location_id)
        report.succeeded.append(r.location_id)
    catalogue = {row["code"]: row["unit"] for row in parameter_catalogue(first.resolution)}
    D = len(first.parameters)
    if series:
        values = np.stack([s[0] for s in series])
        mask = np.stack([s[1] for s in series])
    else:
        values = np.zeros((0, len(stamps), D))
        mask = np.zeros(values.shape, dtype=np.uint8)
    ds = SpatioTemporalDataset(
        values, mask, first.parameters, tuple(stamps), tuple(ids),
        np.array(coords, dtype=np.float64).reshape(-1, 2) if coords else None,
        first.resolution, tuple(catalogue.get(c, "") for c in first.parameters))
    return ds, report
