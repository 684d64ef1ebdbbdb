"""Record/replay of backend responses.

A store is a directory with one ``<request digest>.json`` file per recorded
response. Files are never rewritten once created.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import replace
from pathlib import Path

from ..records import atomic_write_text
from .base import BackendRequest, BackendResponse, MissingRecording, Source


class ReplayStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._write_lock = threading.Lock()

    def path_for(self, request: BackendRequest) -> Path:
        return self.root / f"{request.digest()}.json"

    def __contains__(self, request: BackendRequest) -> bool:
        return self.path_for(request).exists()

    def __len__(self) -> int:
        return len(list(self.root.glob("*.json"))) if self.root.exists() else 0

    def record(self, request: BackendRequest, response: BackendResponse) -> bool:
        """Store ``response``; returns False if the digest was already recorded."""
        path = self.path_for(request)
        body = {
            "model": request.model_name,
            "params": request.params.to_record(),
            "response": response.to_record(),
        }
        with self._write_lock:
            if path.exists():
                return False
            atomic_write_text(path, json.dumps(body, ensure_ascii=False, indent=1) + "\n")
        return True

    def replay(self, request: BackendRequest) -> BackendResponse:
        path = self.path_for(request)
        try:
            with open(path, encoding="utf-8") as fh:
                body = json.load(fh)
        except FileNotFoundError:
            raise MissingRecording(f"no recording for request {request.digest()[:12]}") from None
        return replace(BackendResponse.from_record(body["response"]), source=Source.REPLAY)


class ReplayBackend:
    def __init__(self, store: ReplayStore | str | os.PathLike, model_name: str = "replay"):
        self.store = store if isinstance(store, ReplayStore) else ReplayStore(store)
        self.model_name = model_name
        self.calls = 0

    async def complete(self, request: BackendRequest) -> BackendResponse:
        self.calls += 1
        return self.store.replay(request)


class RecordingBackend:
    """Wrap a backend and record every response it returns."""

    def __init__(self, inner, store: ReplayStore | str | os.PathLike):
        self.inner = inner
        self.store = store if isinstance(store, ReplayStore) else ReplayStore(store)

    @property
    def model_name(self) -> str:
        return self.inner.model_name

    @property
    def calls(self) -> int:
        return getattr(self.inner, "calls", 0)

    async def complete(self, request: BackendRequest) -> BackendResponse:
        response = await self.inner.complete(request)
        self.store.record(request, response)
        return response
