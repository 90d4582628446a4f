"""Litigation-release corpus: loading, keyword labeling, statistics and
event-record extraction.

A release is stored as one UTF-8 ``.txt`` file whose first nonblank line is
the title and whose remaining lines form the body.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import re
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

log = logging.getLogger(__name__)

INSIDER = "insider"
NON_INSIDER = "non_insider"
LABEL_RULES = ("title", "body", "either", "both")

OVERRIDE_COLUMNS = ("case_id", "company", "ticker", "learn_date", "public_date", "illicit_gain")


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class CaseRecord:
    id: str
    title: str
    body: str
    release_date: dt.date | None = None


@dataclass(frozen=True)
class LabeledCase:
    case: CaseRecord
    in_title: bool
    in_body: bool
    label: str

    @property
    def is_insider(self) -> bool:
        return self.label == INSIDER

    @property
    def text(self) -> str:
        return self.case.title + "\n" + self.case.body

    def to_json(self) -> dict:
        return {
            "id": self.case.id,
            "title": self.case.title,
            "body": self.case.body,
            "in_title": self.in_title,
            "in_body": self.in_body,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabeledCase":
        case = CaseRecord(id=obj["id"], title=obj["title"], body=obj["body"])
        return cls(case, bool(obj["in_title"]), bool(obj["in_body"]), obj["label"])


@dataclass(frozen=True)
class LabelStats:
    total: int = 0
    title_hits: int = 0
    body_hits: int = 0
    either_hits: int = 0
    both_hits: int = 0

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "title": self.title_hits,
            "body": self.body_hits,
            "either": self.either_hits,
            "both": self.both_hits,
        }


@dataclass(frozen=True)
class EventRecord:
    case_id: str
    company: str
    learn_date: dt.date
    ticker: str | None = None
    public_date: dt.date | None = None
    illicit_gain: float | None = None

    def __post_init__(self):
        if self.public_date is not None and self.learn_date > self.public_date:
            raise CorpusError(
                f"case {self.case_id}: learn_date {self.learn_date} after public_date {self.public_date}"
            )


@dataclass
class CaseSet:
    """Cases ordered by id, plus the files that were skipped while loading."""

    cases: list[CaseRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def __getitem__(self, i):
        return self.cases[i]


def parse_release(case_id: str, text: str) -> CaseRecord | None:
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.strip():
            title = line.strip()
            body = "\n".join(lines[i + 1:]).strip()
            return CaseRecord(id=case_id, title=title, body=body)
    return None


def load_cases(source_dir: str | Path) -> CaseSet:
    source = Path(source_dir)
    if not source.is_dir():
        raise CorpusError(f"corpus directory not readable: {source}")
    out = CaseSet()
    for path in sorted(source.glob("*.txt"), key=lambda p: p.stem):
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            out.warnings.append(f"{path.name}: unreadable ({exc})")
            continue
        record = parse_release(path.stem, text)
        if record is None:
            out.warnings.append(f"{path.name}: empty file")
            continue
        out.cases.append(record)
    for w in out.warnings:
        log.warning("skipped %s", w)
    return out


def fetch_release(url: str, dest_dir: str | Path, case_id: str,
                  opener: Callable[[str], bytes] | None = None) -> Path:
    """Download one release as plain text into ``dest_dir/<case_id>.txt``.

    ``opener`` maps a URL to raw bytes; the default uses urllib.
    """
    if opener is None:
        def opener(u):
            with urllib.request.urlopen(u, timeout=30) as resp:
                return resp.read()
    raw = opener(url)
    text = raw.decode("utf-8", errors="replace")
    dest = Path(dest_dir) / f"{case_id}.txt"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(text, encoding="utf-8")
    return dest


def keyword_pattern(keyword: str, stem: bool = False) -> re.Pattern:
    if not keyword or not keyword.strip():
        raise CorpusError("keyword must be nonempty")
    suffix = r"(?:s|es)?" if stem else ""
    # letters on either side disqualify the match; hyphens and digits do not
    return re.compile(r"(?<![^\W\d_])" + re.escape(keyword.strip()) + suffix + r"(?![^\W\d_])",
                      re.IGNORECASE)


def label_cases(cases: Iterable[CaseRecord | LabeledCase], keyword: str = INSIDER,
                rule: str = "either", stem: bool = False) -> list[LabeledCase]:
    if rule not in LABEL_RULES:
        raise CorpusError(f"unknown labeling rule {rule!r}; expected one of {LABEL_RULES}")
    pat = keyword_pattern(keyword, stem)
    labeled = []
    for c in cases:
        if isinstance(c, LabeledCase):
            c = c.case
        in_title = bool(pat.search(c.title))
        in_body = bool(pat.search(c.body))
        hit = {
            "title": in_title,
            "body": in_body,
            "either": in_title or in_body,
            "both": in_title and in_body,
        }[rule]
        labeled.append(LabeledCase(c, in_title, in_body, INSIDER if hit else NON_INSIDER))
    return labeled


def corpus_stats(labeled: Sequence[LabeledCase]) -> LabelStats:
    title = sum(lc.in_title for lc in labeled)
    body = sum(lc.in_body for lc in labeled)
    either = sum(lc.in_title or lc.in_body for lc in labeled)
    both = sum(lc.in_title and lc.in_body for lc in labeled)
    return LabelStats(len(labeled), title, body, either, both)


def write_labeled_jsonl(labeled: Iterable[LabeledCase], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lc in labeled:
            fh.write(json.dumps(lc.to_json(), ensure_ascii=False, sort_keys=False) + "\n")


def read_labeled_jsonl(path: str | Path) -> list[LabeledCase]:
    with open(path, encoding="utf-8") as fh:
        return [LabeledCase.from_json(json.loads(line)) for line in fh if line.strip()]


# --- event extraction -------------------------------------------------------

_MONTHS = ("january february march april may june july august september "
           "october november december").split()
_MONTH_RE = r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|" \
            r"sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)\.?"
DATE_RE = (r"(?:(?P<month>" + _MONTH_RE + r")\s+(?P<day>\d{1,2}),?\s+(?P<year>\d{4})"
           r"|(?P<iso>\d{4}-\d{2}-\d{2}))")

_LEARN_RE = re.compile(
    r"\b(?:learned|learnt|was\s+told|were\s+told|was\s+tipped|were\s+tipped|obtained|received)"
    r"\b[^.]{0,40}?\b(?:on|by|as\s+of)\s+" + DATE_RE,
    re.IGNORECASE,
)
_PUBLIC_RE = re.compile(
    r"\b(?:publicly\s+announced|announced|made\s+public|became\s+public|disclosed)"
    r"\b[^.]{0,40}?\b(?:on|by)\s+" + DATE_RE,
    re.IGNORECASE,
)
_CAP = r"[A-Z][A-Za-z0-9&'.-]*"
_SUFFIX = r"(?:Corp(?:oration)?|Inc|Ltd|LLC|L\.L\.C|Co|Company|plc|PLC|Holdings|Group|Bank|Pharmaceuticals)\b\.?"
_COMPANY_SUFFIX_RE = re.compile(r"\b((?:" + _CAP + r"\s+){0,4}" + _SUFFIX + r")")
_COMPANY_AFTER_THAT_RE = re.compile(r"\bthat\s+(" + _CAP + r"(?:\s+" + _CAP + r"){0,4})")
_GAIN_RE = re.compile(r"(?:illicit|illegal|ill-gotten)\s+(?:profits?|gains?)\s+of\s+"
                      r"(?:approximately\s+|about\s+|more\s+than\s+)?\$([\d,]+(?:\.\d+)?)",
                      re.IGNORECASE)
_COMPANY_STOP = {"The", "A", "An", "On", "In", "SEC", "He", "She", "They", "It"}


def _parse_date_match(m: re.Match) -> dt.date | None:
    try:
        if m.group("iso"):
            return dt.date.fromisoformat(m.group("iso"))
        month_token = m.group("month").lower().rstrip(".")[:3]
        month = next(i for i, name in enumerate(_MONTHS, 1) if name.startswith(month_token))
        return dt.date(int(m.group("year")), month, int(m.group("day")))
    except (ValueError, StopIteration):
        return None


def _find_company(text: str, near: int = 0) -> str | None:
    m = _COMPANY_AFTER_THAT_RE.search(text, near)
    if m:
        words = m.group(1).split()
        while words and words[0] in _COMPANY_STOP:
            words.pop(0)
        if words:
            return " ".join(words).rstrip(".,")
    m = _COMPANY_SUFFIX_RE.search(text)
    if m:
        return m.group(1).strip().rstrip(",")
    return None


def load_overrides(path: str | Path | None) -> dict[str, EventRecord]:
    """Read the manual override table (CSV with ISO-8601 dates)."""
    if path is None:
        return {}
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "case_id" not in reader.fieldnames \
                or "learn_date" not in reader.fieldnames:
            raise CorpusError(f"override table {path} must have columns {','.join(OVERRIDE_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                cid = row["case_id"].strip()
                if not cid:
                    raise ValueError("empty case_id")
                gain = (row.get("illicit_gain") or "").strip()
                out[cid] = EventRecord(
                    case_id=cid,
                    company=(row.get("company") or "").strip(),
                    ticker=(row.get("ticker") or "").strip() or None,
                    learn_date=dt.date.fromisoformat(row["learn_date"].strip()),
                    public_date=dt.date.fromisoformat(row["public_date"].strip())
                    if (row.get("public_date") or "").strip() else None,
                    illicit_gain=float(gain.replace(",", "")) if gain else None,
                )
            except (ValueError, KeyError, AttributeError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed override row ({exc})") from exc
    return out


def extract_event_record(case: LabeledCase, overrides: dict[str, EventRecord] | None = None
                         ) -> EventRecord | None:
    """Best-effort event extraction; an override entry for the case always wins.

    Grammar: a learning verb ("learned", "was told", "was tipped", ...)
    followed within the sentence by ``on <date>``, where a date is either
    ``Month D, YYYY`` or ``YYYY-MM-DD``.  The company is the capitalized
    phrase after the next ``that``, falling back to the first phrase ending
    in a corporate suffix (Corp, Inc, Ltd, ...).
    """
    if overrides and case.case.id in overrides:
        return overrides[case.case.id]
    text = case.case.title + "\n" + case.case.body
    m = _LEARN_RE.search(text)
    if not m:
        return None
    learn = _parse_date_match(m)
    company = _find_company(text, m.end())
    if learn is None or company is None:
        return None
    public = None
    pm = _PUBLIC_RE.search(text, m.end())
    if pm:
        public = _parse_date_match(pm)
        if public is not None and public < learn:
            public = None
    gm = _GAIN_RE.search(text)
    gain = float(gm.group(1).replace(",", "")) if gm else None
    return EventRecord(case_id=case.case.id, company=company, learn_date=learn,
                       public_date=public, illicit_gain=gain)


def write_events_csv(events: Iterable[EventRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OVERRIDE_COLUMNS)
        for ev in events:
            w.writerow([
                ev.case_id, ev.company, ev.ticker or "", ev.learn_date.isoformat(),
                ev.public_date.isoformat() if ev.public_date else "",
                "" if ev.illicit_gain is None else repr(ev.illicit_gain),
            ])


def read_events_csv(path: str | Path) -> list[EventRecord]:
    return list(load_overrides(path).values())
