"""Label -> expanded prompt -> conditioning embedding.

A pluggable LLM client enriches the attacker's class label into a short
scene description; every call is recorded in an append-only transcript so
runs replay offline. The template fallback guarantees a usable prompt even
with no client at all. Desk-scale conditioning keeps the expanded prompt
for reporting and semantic scoring while generation conditions on the
learned class embedding.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import torch

log = logging.getLogger(__name__)

TEMPLATE = "A photo of a {label}, centered, clearly visible"


@dataclass
class PromptSpec:
    label_id: int
    label_name: str
    expanded_prompt: str
    condition: torch.Tensor

    def __post_init__(self):
        if not self.expanded_prompt:
            raise ValueError("expanded prompt must be non-empty")
        if self.label_id < 0:
            raise ValueError("label id must be non-negative")


class LlmClientError(RuntimeError):
    """A client attempt failed (timeout, bad output, cache miss, ...)."""


@dataclass
class SubprocessLlmClient:
    """Runs an external command; prompt on stdin, expansion on stdout."""

    command: list[str]
    timeout: float = 20.0
    retries: int = 2

    def complete(self, prompt: str) -> str:
        try:
            proc = subprocess.run(
                self.command, input=prompt, capture_output=True, text=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise LlmClientError(str(exc)) from exc
        if proc.returncode != 0:
            raise LlmClientError(f"client exited with {proc.returncode}")
        text = proc.stdout.strip()
        if not text:
            raise LlmClientError("client returned empty text")
        return text


@dataclass
class CannedLlmClient:
    """Deterministic in-memory client for tests and replays."""

    responses: dict[str, str]
    retries: int = 0

    def complete(self, prompt: str) -> str:
        if prompt not in self.responses:
            raise LlmClientError(f"no canned response for {prompt!r}")
        return self.responses[prompt]


class TranscriptCache:
    """Append-only JSONL file mapping sha256(prompt) -> response."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, str] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                self._entries[rec["hash"]] = rec["response"]

    @staticmethod
    def key(prompt: str) -> str:
        return hashlib.sha256(prompt.encode()).hexdigest()

    def get(self, prompt: str) -> str | None:
        return self._entries.get(self.key(prompt))

    def put(self, prompt: str, response: str) -> None:
        key = self.key(prompt)
        if key in self._entries:
            return
        self._entries[key] = response
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(json.dumps({"hash": key, "prompt": prompt, "response": response}) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class CachedLlmClient:
    """Transcript-backed client; cache-only when no inner client is given."""

    cache: TranscriptCache
    inner: object | None = None
    retries: int = field(default=0)

    def __post_init__(self):
        if self.inner is not None:
            self.retries = getattr(self.inner, "retries", self.retries)

    def complete(self, prompt: str) -> str:
        hit = self.cache.get(prompt)
        if hit is not None:
            return hit
        if self.inner is None:
            raise LlmClientError(f"cache-only mode and no transcript entry for {prompt!r}")
        text = self.inner.complete(prompt)
        self.cache.put(prompt, text)
        return text


def template_expand(label_name: str) -> str:
    """Deterministic offline expansion; the label is lower-cased."""
    if not label_name or not label_name.strip():
        raise ValueError("label name must be non-empty")
    return TEMPLATE.format(label=label_name.strip().lower())


def expand_prompt(label_name: str, client, events: list[str] | None = None) -> str:
    """One-sentence scene description mentioning the label.

    Tries the client (with its retry budget); any failure, empty output, or
    response that does not mention the label falls back to template_expand.
    The fallback is never an error, only a recorded event.
    """
    if not label_name or not label_name.strip():
        raise ValueError("label name must be non-empty")
    attempts = 1 + max(0, getattr(client, "retries", 0)) if client is not None else 0
    for attempt in range(attempts):
        try:
            text = client.complete(label_name).strip()
        except LlmClientError as exc:
            log.debug("LLM attempt %d for %r failed: %s", attempt + 1, label_name, exc)
            continue
        if text and label_name.strip().lower() in text.lower():
            return text
        log.debug("LLM attempt %d for %r returned unusable text %r", attempt + 1, label_name, text)
    fallback = template_expand(label_name)
    if events is not None:
        events.append(f"llm_fallback:{label_name}")
    log.info("using template fallback for %r", label_name)
    return fallback


def embed_condition(label_id: int, table: torch.Tensor) -> torch.Tensor:
    """Learned class embedding row; stable across calls."""
    if table.ndim != 2:
        raise ValueError("embedding table must be [num_classes, dim]")
    if not 0 <= label_id < table.shape[0]:
        raise ValueError(f"label id {label_id} outside [0, {table.shape[0]})")
    return table[label_id].detach().clone()


def build_prompt_spec(label_id: int, label_name: str, table: torch.Tensor,
                      client=None, events: list[str] | None = None) -> PromptSpec:
    return PromptSpec(
        label_id=label_id,
        label_name=label_name,
        expanded_prompt=expand_prompt(label_name, client, events),
        condition=embed_condition(label_id, table),
    )
