import json
import logging
import os
import re
import threading
from pathlib import Path
from typing import Any

from keboola.component.exceptions import UserException
from keboola.http_client import HttpClient
from requests import HTTPError, RequestException
from requests.exceptions import RetryError

CACHE_DIR_ENV = "IOHFUSE_CACHE_DIR"
DEFAULT_CACHE_DIR = Path.home() / ".cache" / "iohfuse"


class CaseNotFoundError(UserException):
    """The external repository has no case with the requested id."""


class ExternalFetchError(Exception):
    """Network failure while downloading a case; safe to retry."""


class PayloadParseError(UserException):
    """The external repository answered with something that is not a sample array."""


class DescriptionClientError(Exception):
    """The description endpoint timed out, failed, or answered with an empty reply."""


class ApiKeyFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.msg = self._mask(record.msg)
        record.args = self._mask(record.args)
        record.exc_text = self._mask(record.exc_text)
        return True

    def _mask(self, obj):
        if isinstance(obj, str):
            obj = re.sub(r"Bearer\s+[^\s'\"]+", "Bearer ---API-KEY---", obj)
            return re.sub(
                r"(['\"]?(?:#?api_key|Authorization)['\"]?\s*[:=]\s*['\"]?)[^'\"\s,}]+", r"\1---API-KEY---", obj
            )

        if isinstance(obj, Exception):
            masked_str = self._mask(str(obj))
            try:
                return type(obj)(masked_str)
            except Exception:
                return masked_str

        if isinstance(obj, tuple):
            return type(obj)(self._mask(v) for v in obj)

        return obj


api_key_filter = ApiKeyFilter()

logger = logging.getLogger(__name__)

logging.getLogger().addFilter(api_key_filter)
for name in logging.root.manager.loggerDict:
    logging.getLogger(name).addFilter(api_key_filter)


def resolve_cache_dir(cache_dir: str | Path | None = None) -> Path:
    """Environment variable wins over the configured directory, which wins over the default."""
    if override := os.environ.get(CACHE_DIR_ENV):
        return Path(override)
    return Path(cache_dir) if cache_dir else DEFAULT_CACHE_DIR


def _parse_samples(payload: Any, case_id: str) -> list[tuple[float, float]]:
    """Accept ``[[t, v], ...]`` or ``[{"time": t, "value": v}, ...]``, optionally wrapped in ``{"data": ...}``."""
    if isinstance(payload, dict) and "data" in payload:
        payload = payload["data"]
    if not isinstance(payload, list) or not payload:
        raise PayloadParseError(f"Case '{case_id}': expected a non-empty JSON array of samples")
    samples = []
    try:
        for item in payload:
            if isinstance(item, dict):
                time_s, value = item["time"], item["value"]
            else:
                time_s, value = item
            if value is None:
                continue
            samples.append((float(time_s), float(value)))
    except (KeyError, TypeError, ValueError) as e:
        raise PayloadParseError(f"Case '{case_id}': malformed sample {item!r}") from e
    if not samples:
        raise PayloadParseError(f"Case '{case_id}': payload holds no valid samples")
    samples.sort(key=lambda sample: sample[0])
    return samples


class VitalCaseClient:
    """Downloads raw vital-sign tracks per case and keeps every answer in an on-disk cache."""

    def __init__(self, endpoint: str, cache_dir: str | Path | None = None, timeout_s: float = 30.0):
        self.cache_dir = resolve_cache_dir(cache_dir)
        self.timeout_s = timeout_s
        self.network_calls = 0
        self._cache_lock = threading.Lock()
        self.client = HttpClient(
            base_url=endpoint,
            default_http_header={"Accept": "application/json"},
            status_forcelist=(500, 502, 503, 504),
            max_retries=3,
        )

    def _cache_path(self, case_id: str, track_name: str) -> Path:
        key = re.sub(r"[^A-Za-z0-9_.-]", "_", f"{case_id}__{track_name}")
        return self.cache_dir / f"{key}.json"

    def fetch_case(self, case_id: str, track_name: str) -> list[tuple[float, float]]:
        cache_path = self._cache_path(case_id, track_name)
        if cache_path.exists():
            logger.debug(f"Case {case_id}/{track_name} served from cache {cache_path}")
            with cache_path.open(encoding="utf-8") as fh:
                return _parse_samples(json.load(fh), case_id)

        try:
            self.network_calls += 1
            payload = self.client.get(
                endpoint_path=f"cases/{case_id}",
                params={"track": track_name},
                timeout=self.timeout_s,
            )
        except HTTPError as e:
            if e.response is not None and e.response.status_code == 404:
                raise CaseNotFoundError(f"Case '{case_id}' was not found at {self.client.base_url}") from e
            raise ExternalFetchError(f"Case '{case_id}': HTTP error {e}") from e
        except ValueError as e:
            raise PayloadParseError(f"Case '{case_id}': response is not valid JSON") from e
        except (RetryError, RequestException) as e:
            raise ExternalFetchError(f"Case '{case_id}': request failed after retries: {e}") from e

        samples = _parse_samples(payload, case_id)
        with self._cache_lock:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            tmp_path = cache_path.with_suffix(".tmp")
            with tmp_path.open("w", encoding="utf-8") as fh:
                json.dump(payload, fh)
            tmp_path.replace(cache_path)
        logger.info(f"Fetched case {case_id}/{track_name}: {len(samples)} samples")
        return samples


def fetch_external_case(
    endpoint: str, case_id: str, track_name: str, cache_dir: str | Path | None = None
) -> list[tuple[float, float]]:
    return VitalCaseClient(endpoint, cache_dir).fetch_case(case_id, track_name)


class DescriptionClient:
    """Plain-text completion endpoint used to fill the clinical description template."""

    def __init__(self, endpoint: str, api_key: str | None = None, model: str = "gpt-4o", timeout_s: float = 30.0):
        self.model = model
        self.timeout_s = timeout_s
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.client = HttpClient(
            base_url=endpoint,
            default_http_header=headers,
            status_forcelist=(500, 502, 503, 504),
            max_retries=2,
        )

    def complete(self, prompt: str) -> str:
        try:
            response = self.client.post_raw(
                json={"model": self.model, "prompt": prompt},
                timeout=self.timeout_s,
            )
            response.raise_for_status()
        except (HTTPError, RetryError, RequestException) as e:
            raise DescriptionClientError(f"Description endpoint failed: {e}") from e

        text = response.text
        try:
            body = response.json()
        except ValueError:
            body = None
        if isinstance(body, dict):
            text = body.get("text") or body.get("output") or ""
        if not text or not text.strip():
            raise DescriptionClientError("Description endpoint returned an empty reply")
        return text.strip()
