"""Coherence scorers: every family maps a batch of ``(text1, text2)`` pairs to scores."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .backends import BackendError, EncoderBackend, GenerativeBackend
from .heads import MLP, ConvMaxPool, bce_with_logits, concat_features, concat_features_grad, margin_loss, sigmoid

TextPair = tuple[str, str]
FAMILIES = ("classifier", "cnn", "discriminative", "generative", "similarity_baseline")
DIRECTIONS = ("forward", "backward", "mean")
DEFAULT_PROB_FLOOR = 1e-12


class ScoringError(RuntimeError):
    pass


class _SentenceCache:
    def __init__(self, backend: EncoderBackend):
        self.backend = backend
        self._vecs: dict[str, np.ndarray] = {}

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        out = []
        for t in texts:
            v = self._vecs.get(t)
            if v is None:
                v = self._vecs[t] = np.asarray(self.backend.sentence_vector(t), dtype=float)
            out.append(v)
        return np.stack(out)


# --------------------------------------------------------------------------
# A: sequence-pair classifier

class ClassifierScorer:
    """``sigmoid(FFNN(pair_representation))``."""

    family = "classifier"

    def __init__(self, backend: EncoderBackend, head: MLP | None = None):
        self.backend = backend
        self.head = head
        self._pair_cache: dict[TextPair, np.ndarray] = {}

    @property
    def params(self) -> dict[str, np.ndarray]:
        self._require_head()
        return self.head.params

    def _require_head(self) -> None:
        if self.head is None:
            raise ScoringError("classifier head is untrained; train or load a checkpoint first")

    def features(self, pairs: Sequence[TextPair]) -> np.ndarray:
        rows = []
        for p in pairs:
            v = self._pair_cache.get(p)
            if v is None:
                v = self._pair_cache[p] = np.asarray(self.backend.pair_representation(*p), dtype=float)
            rows.append(v)
        return np.stack(rows)

    def logits(self, pairs: Sequence[TextPair]) -> np.ndarray:
        self._require_head()
        z, _ = self.head.forward(self.features(pairs))
        return z

    def score(self, pairs: Sequence[TextPair]) -> np.ndarray:
        return sigmoid(self.logits(pairs))

    def loss_and_grads(self, pairs: Sequence[TextPair], labels: np.ndarray):
        self._require_head()
        z, cache = self.head.forward(self.features(pairs))
        loss, dz = bce_with_logits(z, labels)
        grads, _ = self.head.backward(cache, dz)
        return loss, grads


def classifier_score(pair: TextPair, backend: EncoderBackend, head: MLP | None) -> float:
    return float(ClassifierScorer(backend, head).score([pair])[0])


# --------------------------------------------------------------------------
# A': CNN over frozen word vectors

def build_cnn_input(pair: TextPair, backend: EncoderBackend) -> np.ndarray:
    """Word vectors of both utterances side by side, shape ``(d, n1 + n2)``."""
    left = backend.word_vectors(pair[0])
    right = backend.word_vectors(pair[1])
    if left.shape[1] + right.shape[1] == 0:
        raise ScoringError("cannot build CNN input for an empty pair")
    return np.concatenate([left, right], axis=1)


class CNNScorer:
    family = "cnn"

    def __init__(self, backend: EncoderBackend, conv: ConvMaxPool | None = None, head: MLP | None = None):
        self.backend = backend
        self.conv = conv
        self.head = head
        self._inputs: dict[TextPair, np.ndarray] = {}

    @property
    def params(self) -> dict[str, np.ndarray]:
        self._require()
        out = {f"conv.{k}": v for k, v in self.conv.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    def _require(self) -> None:
        if self.conv is None or self.head is None:
            raise ScoringError("CNN scorer is untrained; train or load a checkpoint first")

    def _input(self, pair: TextPair) -> np.ndarray:
        x = self._inputs.get(pair)
        if x is None:
            x = self._inputs[pair] = build_cnn_input(pair, self.backend)
        return x

    def _forward(self, pairs: Sequence[TextPair]):
        self._require()
        caches = []
        pooled = []
        for p in pairs:
            m, c = self.conv.forward(self._input(p))
            pooled.append(m)
            caches.append(c)
        z, head_cache = self.head.forward(np.stack(pooled))
        return z, caches, head_cache

    def logits(self, pairs: Sequence[TextPair]) -> np.ndarray:
        return self._forward(pairs)[0]

    def score(self, pairs: Sequence[TextPair]) -> np.ndarray:
        return sigmoid(self.logits(pairs))

    def loss_and_grads(self, pairs: Sequence[TextPair], labels: np.ndarray):
        z, caches, head_cache = self._forward(pairs)
        loss, dz = bce_with_logits(z, labels)
        head_grads, d_pooled = self.head.backward(head_cache, dz)
        grads = {f"head.{k}": v for k, v in head_grads.items()}
        conv_grads = {k: np.zeros_like(v) for k, v in self.conv.params.items()}
        for cache, d in zip(caches, d_pooled):
            for k, g in self.conv.backward(cache, d).items():
                conv_grads[k] += g
        grads.update({f"conv.{k}": v for k, v in conv_grads.items()})
        return loss, grads


# --------------------------------------------------------------------------
# B: discriminative margin model

class DiscriminativeScorer:
    """One-hidden-layer MLP over ``concat_features(U1, U2)`` of frozen sentence vectors."""

    family = "discriminative"

    def __init__(self, backend: EncoderBackend, mlp: MLP | None = None, direction: str = "forward"):
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        self.backend = backend
        self.mlp = mlp
        self.direction = direction
        self._vectors = _SentenceCache(backend)

    @property
    def params(self) -> dict[str, np.ndarray]:
        self._require()
        return self.mlp.params

    def _require(self) -> None:
        if self.mlp is None:
            raise ScoringError("discriminative MLP is untrained; train or load a checkpoint first")

    def _f(self, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
        return self.mlp.forward(concat_features(u1, u2))[0]

    def score(self, pairs: Sequence[TextPair], direction: str | None = None) -> np.ndarray:
        self._require()
        direction = direction or self.direction
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        u1 = self._vectors([p[0] for p in pairs])
        u2 = self._vectors([p[1] for p in pairs])
        if direction == "forward":
            return self._f(u1, u2)
        if direction == "backward":
            return self._f(u2, u1)
        return 0.5 * (self._f(u1, u2) + self._f(u2, u1))

    def loss_and_grads(self, triples: Sequence[tuple[str, str, str]], margin: float):
        """Bidirectional hinge loss over ``(anchor, positive partner, negative partner)`` triples.

        Per triple: ``L(f(a,p), f(a,n)) + L(f(p,a), f(n,a))``; the mean over
        triples is returned with its gradient.
        """
        self._require()
        a = self._vectors([t[0] for t in triples])
        p = self._vectors([t[1] for t in triples])
        n = self._vectors([t[2] for t in triples])
        b = len(triples)
        x = concat_features(np.concatenate([a, a, p, n]), np.concatenate([p, n, a, a]))
        f, cache = self.mlp.forward(x)
        fp_fwd, fn_fwd, fp_bwd, fn_bwd = f[:b], f[b : 2 * b], f[2 * b : 3 * b], f[3 * b :]
        h_fwd = margin_loss(fp_fwd, fn_fwd, margin)
        h_bwd = margin_loss(fp_bwd, fn_bwd, margin)
        loss = float((h_fwd + h_bwd).mean())
        act_f = (h_fwd > 0).astype(float) / b
        act_b = (h_bwd > 0).astype(float) / b
        d_out = np.concatenate([-act_f, act_f, -act_b, act_b])
        grads, _ = self.mlp.backward(cache, d_out)
        return loss, grads


def discriminative_score(pair: TextPair, backend: EncoderBackend, mlp: MLP, direction: str = "forward") -> float:
    return float(DiscriminativeScorer(backend, mlp, direction).score([pair])[0])


# --------------------------------------------------------------------------
# C: zero-shot generative

def sequence_perplexity(pair: TextPair, backend: GenerativeBackend, floor: float | None = DEFAULT_PROB_FLOOR) -> float:
    """``exp(-(1/t) * sum_i log p(w_i | w_<i))`` over the pair's tokens.

    Zero-probability tokens are clamped to ``floor``; with ``floor=None`` they
    raise instead.
    """
    ll = np.asarray(backend.token_loglik(*pair), dtype=float)
    if ll.size == 0:
        raise ScoringError("cannot compute perplexity of an empty pair")
    if np.any(np.isnan(ll)) or np.any(ll > 1e-9):
        raise ScoringError("backend returned invalid log-likelihoods")
    ll = np.minimum(ll, 0.0)
    if np.any(np.isneginf(ll)):
        if floor is None:
            raise ScoringError("zero-probability token in pair")
        ll = np.maximum(ll, math.log(floor))
    return math.exp(-ll.mean())


def generative_score(pair: TextPair, backend: GenerativeBackend, floor: float | None = DEFAULT_PROB_FLOOR) -> float:
    return 1.0 - sequence_perplexity(pair, backend, floor)


class GenerativeScorer:
    family = "generative"

    def __init__(self, backend: GenerativeBackend, floor: float | None = DEFAULT_PROB_FLOOR):
        self.backend = backend
        self.floor = floor

    def score(self, pairs: Sequence[TextPair]) -> np.ndarray:
        return np.array([generative_score(p, self.backend, self.floor) for p in pairs])


# --------------------------------------------------------------------------
# D: cosine-similarity baseline

def baseline_similarity_score(pair: TextPair, backend: EncoderBackend) -> float:
    u = np.asarray(backend.sentence_vector(pair[0]), dtype=float)
    v = np.asarray(backend.sentence_vector(pair[1]), dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ScoringError("zero-norm sentence vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


class SimilarityScorer:
    family = "similarity_baseline"

    def __init__(self, backend: EncoderBackend):
        self.backend = backend

    def score(self, pairs: Sequence[TextPair]) -> np.ndarray:
        try:
            return np.array([baseline_similarity_score(p, self.backend) for p in pairs])
        except BackendError as exc:
            raise ScoringError(str(exc)) from exc
