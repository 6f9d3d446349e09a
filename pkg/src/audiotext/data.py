"""Deterministic synthetic audio-caption corpus.

Each clip holds 1-3 non-overlapping events drawn from five kinds; its caption
is a fixed-grammar rendering of the event list, e.g.
"a low sine tone then white noise".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, load_wav, write_wav

EVENT_KINDS = ("sine", "chirp", "noise", "am_tone", "click_train")
AMPLITUDE = 0.5
# short class names used for zero-shot prompts and probe targets
KIND_LABELS = {"sine": "sine tone", "chirp": "chirp", "noise": "white noise",
               "am_tone": "pulsing tone", "click_train": "click train"}
FADE_S = 0.005


@dataclass
class Event:
    kind: str
    start: float
    duration: float
    frequency: float | None = None


@dataclass
class CorpusItem:
    index: int
    caption: str
    events: list
    duration: float
    path: str | None = None
    samples: np.ndarray | None = field(default=None, repr=False)

    def audio(self) -> np.ndarray:
        if self.samples is None:
            if self.path is None:
                raise ValueError("corpus item has neither samples nor a path")
            self.samples = load_wav(self.path)
        return self.samples


@dataclass
class SyntheticCorpus:
    items: list
    seed: int

    def __len__(self):
        return len(self.items)

    def captions(self) -> list:
        return [it.caption for it in self.items]

    def subset(self, indices) -> "SyntheticCorpus":
        return SyntheticCorpus([self.items[i] for i in indices], self.seed)


def pitch_word(freq: float) -> str:
    if freq < 400:
        return "low"
    if freq < 1500:
        return "mid"
    return "high"


def describe(event: Event) -> str:
    if event.kind == "sine":
        return f"a {pitch_word(event.frequency)} sine tone"
    if event.kind == "chirp":
        return "a rising chirp" if event.frequency < 1000 else "a falling chirp"
    if event.kind == "noise":
        return "white noise"
    if event.kind == "am_tone":
        return f"a {pitch_word(event.frequency)} pulsing tone"
    if event.kind == "click_train":
        return "a fast click train" if event.frequency >= 10 else "a slow click train"
    raise ValueError(f"unknown event kind {event.kind!r}")


def item_kind(item: CorpusItem) -> str:
    """Kind of the item's first event (the class label for zero-shot and probes)."""
    return min(item.events, key=lambda e: e.start).kind


def render_caption(events) -> str:
    return " then ".join(describe(e) for e in sorted(events, key=lambda e: e.start))


def render_event(event: Event, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    if event.kind == "sine":
        x = np.sin(2 * np.pi * event.frequency * t)
    elif event.kind == "chirp":
        f0 = event.frequency
        f1 = f0 * 4.0 if f0 < 1000 else f0 / 4.0
        k = (f1 - f0) / max(event.duration, 1e-9)
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * k * t * t))
    elif event.kind == "noise":
        x = rng.uniform(-1.0, 1.0, size=n)
    elif event.kind == "am_tone":
        x = np.sin(2 * np.pi * event.frequency * t) * 0.5 * (1.0 + np.sin(2 * np.pi * 8.0 * t))
    elif event.kind == "click_train":
        x = np.zeros(n)
        period = int(SAMPLE_RATE / event.frequency)
        for start in range(0, n, period):
            x[start:start + 40] = np.hanning(80)[40:][: min(40, n - start)]
    else:
        raise ValueError(f"unknown event kind {event.kind!r}")
    fade = min(int(FADE_S * SAMPLE_RATE), n // 2)
    if fade:
        ramp = np.linspace(0.0, 1.0, fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return AMPLITUDE * x


def render_clip(events, duration: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    out = np.zeros(n)
    for e in events:
        a = int(round(e.start * SAMPLE_RATE))
        b = min(n, a + int(round(e.duration * SAMPLE_RATE)))
        out[a:b] += render_event(e, b - a, rng)
    return out


def _sample_frequency(kind: str, rng: np.random.Generator) -> float | None:
    if kind in ("sine", "am_tone"):
        return float(rng.choice([220.0, 330.0, 700.0, 1000.0, 2000.0, 3000.0]))
    if kind == "chirp":
        return float(rng.choice([300.0, 500.0, 2400.0, 4000.0]))
    if kind == "click_train":
        return float(rng.choice([4.0, 6.0, 20.0, 30.0]))
    return None


def sample_events(duration: float, rng: np.random.Generator, max_events: int = 3,
                  kinds=EVENT_KINDS) -> list:
    n_events = int(rng.integers(1, max_events + 1))
    slot = duration / n_events
    events = []
    for i in range(n_events):
        kind = str(rng.choice(kinds))
        length = slot * float(rng.uniform(0.6, 0.9))
        start = i * slot + float(rng.uniform(0.0, slot - length))
        events.append(Event(kind, round(start, 4), round(length, 4), _sample_frequency(kind, rng)))
    return events


def generate_corpus(seed: int, n: int, dur_range=(1.0, 2.0), out_dir=None, *,
                    unique_captions: bool = True, max_events: int = 3,
                    kinds=EVENT_KINDS) -> SyntheticCorpus:
    """Render ``n`` clips deterministically from ``seed``.

    With ``out_dir`` the WAVs plus ``manifest.jsonl`` are written there. When
    ``unique_captions`` is set, event lists whose caption was already used are
    redrawn (deterministically) so every clip has a distinct caption.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = dur_range
    rng = np.random.default_rng(seed)
    items, used = [], set()
    for idx in range(n):
        for _ in range(1000):
            duration = round(float(rng.uniform(lo, hi)), 2) if hi > lo else float(lo)
            events = sample_events(duration, rng, max_events, kinds)
            caption = render_caption(events)
            if not unique_captions or caption not in used:
                break
        else:
            raise RuntimeError("could not draw a unique caption; lower n or allow duplicates")
        used.add(caption)
        samples = render_clip(events, duration, rng)
        items.append(CorpusItem(idx, caption, events, duration, None, samples))
    corpus = SyntheticCorpus(items, seed)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def write_corpus(corpus: SyntheticCorpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for it in corpus.items:
        rel = f"wav/{it.index:05d}.wav"
        write_wav(out / rel, it.samples)
        it.path = str(out / rel)
        # reload so in-memory samples equal what a fresh reader would see
        it.samples = load_wav(it.path)
        lines.append(json.dumps({"path": rel, "caption": it.caption, "duration": it.duration,
                                 "events": [asdict(e) for e in it.events], "seed": corpus.seed},
                                sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out


def load_corpus(root) -> SyntheticCorpus:
    root = Path(root)
    items, seed = [], 0
    for idx, line in enumerate((root / "manifest.jsonl").read_text().splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        seed = rec.get("seed", 0)
        events = [Event(**e) for e in rec["events"]]
        items.append(CorpusItem(idx, rec["caption"], events, rec["duration"], str(root / rec["path"])))
    return SyntheticCorpus(items, seed)


def is_validation(index: int, seed: int, fraction_denominator: int = 8) -> bool:
    """Seed-stable hash split: roughly one item in ``fraction_denominator`` is validation."""
    h = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return h[0] % fraction_denominator == 0


def split_corpus(corpus: SyntheticCorpus):
    val = [i for i in range(len(corpus)) if is_validation(i, corpus.seed)]
    train = [i for i in range(len(corpus)) if i not in set(val)]
    if not train:
        train, val = val, []
    return corpus.subset(train), corpus.subset(val)
