"""App records: smali/manifest fixture parsing, corpus loading, permission and
intent vectors, and seeded synthetic corpora with planted malware motifs."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    EmptyApp,
    EmptyCorpus,
    MalformedInvoke,
    MissingLabel,
    ParseError,
    SpecInvalid,
    UnknownDirective,
    UnterminatedMethod,
)
from .rng import SplitMix64

log = logging.getLogger(__name__)

LABELS = ("benign", "malware")

_CLASS_DESC = r"\[*(?:L[^;\s]+;|[ZBSCIJFDV])"
_INVOKE_RE = re.compile(
    r"^invoke-[a-z-]+(?:/range)?\s+\{[^}]*\},\s*(" + _CLASS_DESC + r")->([^\s(]+)\(([^)\s]*)\)(\S+)$"
)


def is_api_name(value: str) -> bool:
    return bool(value) and value.count("->") == 1 and not any(c.isspace() for c in value)


@dataclass(frozen=True)
class CodeBlock:
    block_id: int
    calls: tuple[str, ...]

    def __post_init__(self):
        if not self.calls:
            raise ValueError(f"block {self.block_id} has no calls")


@dataclass(frozen=True)
class AppRecord:
    app_id: str
    label: str
    blocks: tuple[CodeBlock, ...]
    permissions: frozenset[str] = frozenset()
    intents: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.label not in LABELS:
            raise MissingLabel(f"app {self.app_id}: bad label {self.label!r}")
        if not self.blocks:
            raise EmptyApp(f"app {self.app_id} has no code blocks")

    @property
    def y(self) -> int:
        return LABELS.index(self.label)


@dataclass(frozen=True)
class Corpus:
    apps: tuple[AppRecord, ...]
    split: dict[str, str]

    def __post_init__(self):
        ids = [a.app_id for a in self.apps]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate app_id in corpus")
        missing = set(ids) - set(self.split)
        if missing:
            raise ValueError(f"split does not cover {sorted(missing)[:3]}")

    def train(self) -> list[AppRecord]:
        return [a for a in self.apps if self.split[a.app_id] == "train"]

    def test(self) -> list[AppRecord]:
        return [a for a in self.apps if self.split[a.app_id] == "test"]

    def by_id(self) -> dict[str, AppRecord]:
        return {a.app_id: a for a in self.apps}


# ---------------------------------------------------------------- parsing


def parse_smali(text: str) -> list[CodeBlock]:
    """Split smali text into code blocks of API calls.

    One block per ``.method``/``.end method`` pair that holds at least one
    invoke; parameter and return signatures are dropped from API names.
    """
    blocks: list[CodeBlock] = []
    open_line = None
    calls: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith(".method"):
            if open_line is not None:
                raise UnterminatedMethod(f".method opened at line {open_line} is not closed", line=lineno)
            open_line = lineno
            calls = []
        elif line.startswith(".end method"):
            if open_line is None:
                raise UnterminatedMethod(".end method without matching .method", line=lineno)
            if calls:
                blocks.append(CodeBlock(len(blocks), tuple(calls)))
            open_line = None
        elif line.startswith("invoke-"):
            m = _INVOKE_RE.match(line)
            if m is None:
                raise MalformedInvoke(f"cannot parse invoke: {line!r}", line=lineno)
            if open_line is not None:
                calls.append(f"{m.group(1)}->{m.group(2)}")
    if open_line is not None:
        raise UnterminatedMethod(f".method opened at line {open_line} is not closed", line=open_line)
    return blocks


def parse_manifest(text: str) -> tuple[frozenset[str], frozenset[str]]:
    permissions, intents = set(), set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        value = value.strip()
        if not sep or not value or key.strip() not in ("permission", "intent"):
            raise UnknownDirective(f"unrecognized manifest line: {line!r}", line=lineno)
        (permissions if key.strip() == "permission" else intents).add(value)
    return frozenset(permissions), frozenset(intents)


# ---------------------------------------------------------------- splitting


def stratified_split(apps, ratio: float, seed: int) -> dict[str, str]:
    """Seeded label-stratified train/test assignment.

    The overall train count is ``round(ratio * n)``; per-label quotas use
    largest remainders and keep each label on both sides when it has at
    least two apps.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    groups: dict[str, list[str]] = {}
    for a in apps:
        groups.setdefault(a.label, []).append(a.app_id)
    n = sum(len(g) for g in groups.values())
    target = int(np.floor(ratio * n + 0.5))
    quotas = {lab: int(np.floor(ratio * len(ids))) for lab, ids in groups.items()}
    order = sorted(groups, key=lambda lab: (-(ratio * len(groups[lab]) - quotas[lab]), lab))
    for lab in order:
        if sum(quotas.values()) >= target:
            break
        if quotas[lab] < len(groups[lab]):
            quotas[lab] += 1
    for lab, ids in groups.items():
        if len(ids) >= 2:
            quotas[lab] = min(max(quotas[lab], 1), len(ids) - 1)

    root = SplitMix64(seed).split("split")
    split = {}
    for lab in sorted(groups):
        ids = sorted(groups[lab])
        perm = root.split(lab).permutation(len(ids))
        for rank, i in enumerate(perm):
            split[ids[i]] = "train" if rank < quotas[lab] else "test"
    return split


# ---------------------------------------------------------------- loading


def load_app(app_dir: Path, app_id: str, label: str) -> AppRecord:
    blocks: list[CodeBlock] = []
    for path in sorted((app_dir / "classes").glob("*.smali")):
        try:
            parsed = parse_smali(path.read_text(encoding="utf-8"))
        except ParseError as e:
            raise e.with_context(app_id=app_id, path=path)
        base = len(blocks)
        blocks.extend(CodeBlock(base + i, b.calls) for i, b in enumerate(parsed))
    manifest = app_dir / "manifest.txt"
    perms, intents = frozenset(), frozenset()
    if manifest.exists():
        try:
            perms, intents = parse_manifest(manifest.read_text(encoding="utf-8"))
        except ParseError as e:
            raise e.with_context(app_id=app_id, path=manifest)
    return AppRecord(app_id, label, tuple(blocks), perms, intents)


def load_corpus(root, split_ratio: float = 0.7, seed: int = 0) -> Corpus:
    root = Path(root)
    index = root / "index.jsonl"
    if not index.exists():
        raise EmptyCorpus(f"no index.jsonl under {root}")
    labels: dict[str, str] = {}
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        entry = json.loads(line)
        app_id = entry.get("app_id")
        label = entry.get("label")
        if not app_id:
            raise MissingLabel(f"{index} line {lineno}: missing app_id")
        if label not in LABELS:
            raise MissingLabel(f"{index} line {lineno}: app {app_id} has label {label!r}")
        labels[app_id] = label
    for d in root.iterdir():
        if d.is_dir() and d.name not in labels:
            raise MissingLabel(f"app directory {d.name} has no entry in {index}")
    if not labels:
        raise EmptyCorpus(f"{root} lists no apps")
    apps = tuple(load_app(root / app_id, app_id, labels[app_id]) for app_id in sorted(labels))
    return Corpus(apps, stratified_split(apps, split_ratio, seed))


# ---------------------------------------------------------------- writing


def render_smali(app: AppRecord) -> str:
    lines = [".class public Lsynth/" + app.app_id.replace("-", "_") + "/Main;", ".super Ljava/lang/Object;", ""]
    for b in app.blocks:
        lines.append(f".method public m{b.block_id}()V")
        lines.append("    .locals 1")
        for call in b.calls:
            lines.append(f"    invoke-virtual {{v0}}, {call}()V")
        lines.append("    return-void")
        lines.append(".end method")
        lines.append("")
    return "\n".join(lines)


def render_manifest(app: AppRecord) -> str:
    lines = [f"permission: {p}" for p in sorted(app.permissions)]
    lines += [f"intent: {i}" for i in sorted(app.intents)]
    return "\n".join(lines) + ("\n" if lines else "")


def write_corpus(corpus: Corpus, root) -> Path:
    """Write the on-disk fixture layout; output bytes depend only on ``corpus``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index_lines = []
    for app in sorted(corpus.apps, key=lambda a: a.app_id):
        d = root / app.app_id / "classes"
        d.mkdir(parents=True, exist_ok=True)
        (d / "Main.smali").write_text(render_smali(app), encoding="utf-8")
        (root / app.app_id / "manifest.txt").write_text(render_manifest(app), encoding="utf-8")
        index_lines.append(json.dumps({"app_id": app.app_id, "label": app.label}))
    (root / "index.jsonl").write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    return root


# ---------------------------------------------------------------- synthetic


def api_name(i: int) -> str:
    return f"Lcom/synth/p{i // 100}/Api{i:04d};->call"


DEFAULT_PERMISSIONS = (
    # name, p(benign), p(malware)
    ("android.permission.INTERNET", 0.90, 0.95),
    ("android.permission.ACCESS_NETWORK_STATE", 0.70, 0.75),
    ("android.permission.WAKE_LOCK", 0.30, 0.45),
    ("android.permission.VIBRATE", 0.35, 0.25),
    ("android.permission.CAMERA", 0.25, 0.15),
    ("android.permission.ACCESS_FINE_LOCATION", 0.25, 0.35),
    ("android.permission.READ_CONTACTS", 0.10, 0.30),
    ("android.permission.WRITE_EXTERNAL_STORAGE", 0.45, 0.55),
    ("android.permission.READ_PHONE_STATE", 0.20, 0.55),
    ("android.permission.SEND_SMS", 0.04, 0.40),
    ("android.permission.RECEIVE_SMS", 0.05, 0.35),
    ("android.permission.READ_SMS", 0.04, 0.30),
    ("android.permission.RECEIVE_BOOT_COMPLETED", 0.15, 0.45),
    ("android.permission.SYSTEM_ALERT_WINDOW", 0.05, 0.20),
    ("android.permission.GET_TASKS", 0.05, 0.20),
    ("android.permission.CALL_PHONE", 0.06, 0.15),
    ("android.permission.BLUETOOTH", 0.15, 0.05),
    ("android.permission.RECORD_AUDIO", 0.12, 0.10),
)

DEFAULT_INTENTS = (
    ("android.intent.action.MAIN", 0.98, 0.95),
    ("android.intent.category.LAUNCHER", 0.95, 0.85),
    ("android.intent.action.VIEW", 0.40, 0.20),
    ("android.intent.action.SEND", 0.25, 0.10),
    ("android.intent.action.BOOT_COMPLETED", 0.10, 0.40),
    ("android.provider.Telephony.SMS_RECEIVED", 0.03, 0.30),
    ("android.intent.action.USER_PRESENT", 0.04, 0.25),
    ("android.intent.action.PACKAGE_ADDED", 0.05, 0.15),
)


@dataclass
class SyntheticSpec:
    """Generator settings. Motifs are lists of API indices into the synthetic
    vocabulary; motif APIs never appear in background blocks."""

    n_benign: int = 300
    n_malware: int = 300
    vocab_size: int = 500
    blocks_per_app: tuple[int, int] = (4, 10)
    apis_per_block: tuple[int, int] = (1, 5)
    zipf_exponent: float = 1.0
    motifs: list[list[int]] = field(
        default_factory=lambda: [[480, 481, 482], [483, 484, 485], [486, 487, 488], [489, 490, 491]]
    )
    motif_blocks_per_malware: tuple[int, int] = (1, 2)
    motif_extra_apis: tuple[int, int] = (0, 1)
    # benign-typical co-occurrence groups; planted with per-label probability
    benign_motifs: list[list[int]] = field(default_factory=lambda: [[470, 471, 472], [473, 474, 475]])
    benign_motif_prob: tuple[float, float] = (0.8, 0.15)
    permissions: tuple = DEFAULT_PERMISSIONS
    intents: tuple = DEFAULT_INTENTS
    split_ratio: float = 0.7

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise SpecInvalid(f"unknown synthetic spec keys: {sorted(unknown)}")
        for k in ("blocks_per_app", "apis_per_block", "motif_blocks_per_malware", "motif_extra_apis", "benign_motif_prob"):
            if k in known:
                known[k] = tuple(known[k])
        for k in ("permissions", "intents"):
            if k in known:
                known[k] = tuple(tuple(row) for row in known[k])
        return cls(**known)

    def validate(self) -> None:
        if self.n_benign < 0 or self.n_malware < 0 or self.n_benign + self.n_malware < 1:
            raise SpecInvalid("need at least one app and nonnegative counts")
        if self.vocab_size < 1:
            raise SpecInvalid("vocab_size must be >= 1")
        for name in ("blocks_per_app", "apis_per_block", "motif_blocks_per_malware", "motif_extra_apis"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise SpecInvalid(f"{name} must be an ordered nonnegative range")
        if self.blocks_per_app[0] < 1 or self.apis_per_block[0] < 1:
            raise SpecInvalid("apps need >= 1 block and blocks >= 1 API")
        if self.n_malware and not self.motifs:
            raise SpecInvalid("malware apps need at least one motif")
        reserved = set()
        for m in list(self.motifs) + list(self.benign_motifs):
            if not m or any(not 0 <= i < self.vocab_size for i in m):
                raise SpecInvalid(f"motif {m} has APIs outside the vocabulary of size {self.vocab_size}")
            reserved.update(m)
        if len(reserved) >= self.vocab_size:
            raise SpecInvalid("motifs leave no background APIs")
        if not 0.0 < self.split_ratio < 1.0:
            raise SpecInvalid("split_ratio must lie in (0, 1)")
        for name, pb, pm in tuple(self.permissions) + tuple(self.intents):
            if not (0 <= pb <= 1 and 0 <= pm <= 1):
                raise SpecInvalid(f"probabilities for {name} must lie in [0, 1]")


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int) -> Corpus:
    spec.validate()
    root = SplitMix64(seed).split("synthetic")
    reserved = sorted({i for m in list(spec.motifs) + list(spec.benign_motifs) for i in m})
    background = np.array([i for i in range(spec.vocab_size) if i not in set(reserved)])
    # zipf-like popularity over a seeded ranking of background APIs
    rank = root.split("popularity").permutation(len(background))
    weights = np.empty(len(background))
    weights[rank] = 1.0 / np.arange(1, len(background) + 1) ** spec.zipf_exponent
    cdf = np.cumsum(weights / weights.sum())

    def draw_background(r: SplitMix64, k: int) -> list[int]:
        k = min(k, len(background))
        chosen: list[int] = []
        while len(chosen) < k:
            for u in r.uniform(k):
                j = int(background[min(np.searchsorted(cdf, u, side="right"), len(background) - 1)])
                if j not in chosen and len(chosen) < k:
                    chosen.append(j)
        return chosen

    apps = []
    labels = ["benign"] * spec.n_benign + ["malware"] * spec.n_malware
    counters = {"benign": 0, "malware": 0}
    for label in labels:
        app_id = f"{label[:3]}{counters[label]:05d}"
        counters[label] += 1
        r = root.split("app", app_id)
        blocks: list[list[int]] = []
        for _ in range(r.randint(*spec.blocks_per_app)):
            blk = draw_background(r, r.randint(*spec.apis_per_block))
            blocks.append(blk)
        p_benign_motif = spec.benign_motif_prob[0 if label == "benign" else 1]
        for m in spec.benign_motifs:
            if r.random() < p_benign_motif:
                blocks.insert(r.randint(0, len(blocks)), list(m) + draw_background(r, r.randint(0, 1)))
        if label == "malware":
            for _ in range(r.randint(*spec.motif_blocks_per_malware)):
                m = spec.motifs[r.randint(0, len(spec.motifs) - 1)]
                blk = list(m) + draw_background(r, r.randint(*spec.motif_extra_apis))
                order = r.permutation(len(blk))
                blocks.insert(r.randint(0, len(blocks)), [blk[i] for i in order])
        perm_bits = r.bernoulli([row[1 + LABELS.index(label)] for row in spec.permissions])
        intent_bits = r.bernoulli([row[1 + LABELS.index(label)] for row in spec.intents])
        apps.append(
            AppRecord(
                app_id,
                label,
                tuple(CodeBlock(i, tuple(api_name(a) for a in b)) for i, b in enumerate(blocks)),
                frozenset(row[0] for row, bit in zip(spec.permissions, perm_bits) if bit),
                frozenset(row[0] for row, bit in zip(spec.intents, intent_bits) if bit),
            )
        )
    apps_t = tuple(sorted(apps, key=lambda a: a.app_id))
    return Corpus(apps_t, stratified_split(apps_t, spec.split_ratio, seed))


# ---------------------------------------------------------------- PI vectors


@dataclass(frozen=True)
class PiVocabulary:
    entries: tuple[str, ...]

    @cached_property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)


def build_pi_vocab(corpus: Corpus) -> PiVocabulary:
    names = set()
    for app in corpus.train():
        names |= app.permissions | app.intents
    return PiVocabulary(tuple(sorted(names)))


def vectorize_pi(app: AppRecord, vocab: PiVocabulary) -> np.ndarray:
    index = vocab.index
    bits = np.zeros(len(vocab), dtype=np.int8)
    for name in app.permissions | app.intents:
        i = index.get(name)
        if i is not None:
            bits[i] = 1
    return bits
