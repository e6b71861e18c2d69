"""Pluggable text providers: embedders and remote text generators.

Everything here has an offline deterministic default.  A remote
provider speaks a minimal HTTP contract: POST ``{"system", "user"}``
as JSON, receive UTF-8 text.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import urllib.error
import urllib.request
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .errors import ProviderError
from .geo import normalize_name

log = logging.getLogger(__name__)

PROVIDER_ENV = "TRAJPRISM_PROVIDER_URL"


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class TextProvider(Protocol):
    def __call__(self, system: str, user: str) -> str: ...


class HashEmbedder:
    """Feature-hashed character trigrams, L2-normalised.

    Stable across processes (keyed blake2b, not ``hash()``).
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)
        self._one = lru_cache(maxsize=65536)(self._embed_one)

    def __repr__(self):
        return f"HashEmbedder(dim={self.dim}, seed={self.seed})"

    def _embed_one(self, text: str) -> tuple:
        norm = " " + normalize_name(text) + " "
        vec = np.zeros(self.dim)
        for i in range(len(norm) - 2):
            digest = hashlib.blake2b(norm[i:i + 3].encode("utf-8"), digest_size=8, key=self._key).digest()
            h = int.from_bytes(digest, "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        n = np.linalg.norm(vec)
        if n == 0:
            vec[0] = 1.0
        else:
            vec /= n
        return tuple(vec)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if isinstance(texts, str):
            texts = [texts]
        if not texts:
            return np.zeros((0, self.dim))
        return np.array([self._one(t) for t in texts])


class HttpProvider:
    """Remote text provider with a cap on concurrent requests."""

    def __init__(self, url: str, timeout: float = 60.0, max_in_flight: int = 4):
        self.url = url
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def __repr__(self):
        return f"HttpProvider({self.url!r})"

    def __call__(self, system: str, user: str) -> str:
        body = json.dumps({"system": system, "user": user}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.read().decode("utf-8")
            except (urllib.error.URLError, OSError, UnicodeDecodeError) as exc:
                raise ProviderError(f"provider at {self.url} failed: {exc}") from exc


def provider_from_env(env=None) -> HttpProvider | None:
    url = (env if env is not None else os.environ).get(PROVIDER_ENV)
    if not url:
        return None
    log.info("using remote provider %s", url)
    return HttpProvider(url)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-300)
    return an @ bn.T
