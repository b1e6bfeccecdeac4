"""Optional HTTP clients for third-party scores (MOS predictor, ASR transcript).

Each endpoint receives the raw WAV bytes in a POST body and must answer with
JSON: ``{"mos": <number>}`` for the MOS endpoint, ``{"transcript": <string>}``
for the ASR endpoint. Failures never stop a run; they are logged and counted.
"""

from __future__ import annotations

import json
import logging
import math
import urllib.request
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


@dataclass
class ExternalScorer:
    mos_url: str | None = None
    asr_url: str | None = None
    timeout: float = 10.0
    warnings: int = 0
    messages: list = field(default_factory=list)

    @classmethod
    def from_config(cls, ext) -> "ExternalScorer":
        return cls(ext.mos_url, ext.asr_url, ext.timeout)

    @property
    def configured(self) -> bool:
        return bool(self.mos_url or self.asr_url)

    def _warn(self, msg):
        self.warnings += 1
        self.messages.append(msg)
        log.warning(msg)

    def _post(self, url, payload: bytes):
        req = urllib.request.Request(url, data=payload, headers={"Content-Type": "audio/wav"}, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def _query(self, url, path, key, kind):
        try:
            body = self._post(url, open(path, "rb").read())
        except Exception as exc:  # network, HTTP or JSON failure
            self._warn(f"{path}: {kind} request failed ({exc})")
            return None
        value = body.get(key) if isinstance(body, dict) else None
        if kind == "mos":
            if isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value):
                return float(value)
        elif isinstance(value, str):
            return value
        self._warn(f"{path}: malformed {kind} payload {str(body)[:80]!r}")
        return None

    def score(self, wav_paths) -> list[dict]:
        out = []
        for p in wav_paths:
            rec = {"mos_estimate": None, "transcript": None}
            if self.mos_url:
                rec["mos_estimate"] = self._query(self.mos_url, p, "mos", "mos")
            if self.asr_url:
                rec["transcript"] = self._query(self.asr_url, p, "transcript", "asr")
            out.append(rec)
        return out


def external_score(client_config, wav_paths) -> tuple[list[dict], int]:
    """Scores per file plus the number of warnings raised; no endpoint means all-null fields."""
    scorer = client_config if isinstance(client_config, ExternalScorer) else ExternalScorer.from_config(client_config)
    if not scorer.configured:
        return [{"mos_estimate": None, "transcript": None} for _ in wav_paths], 0
    return scorer.score(wav_paths), scorer.warnings
