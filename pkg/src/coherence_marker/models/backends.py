"""Encoder and generative language-model backends.

Backends are selected by an identifier string ``name[:key=value,...]``:

========================  ==================================================
``hash``                  deterministic hashed word embeddings (CPU, tests)
``uniform``               uniform next-token model over a fixed vocabulary
``bigram``                add-alpha bigram LM, trainable by gradient descent
``sbert:<model>``         sentence-transformers encoder (optional dependency)
``hf-words:<model>``      averaged transformer word embeddings (optional)
``hf-causal:<model>``     causal LM from transformers (optional)
========================  ==================================================
"""

from __future__ import annotations

import copy
import hashlib
import math
from abc import ABC, abstractmethod
from typing import Callable, Iterable, Sequence

import numpy as np

BOS = "<s>"
UNK = "<unk>"


class BackendError(RuntimeError):
    pass


class CapabilityError(BackendError):
    """The backend does not support the requested operation."""


def _tokens(text: str) -> list[str]:
    return text.split()


class EncoderBackend(ABC):
    """Maps utterances (or utterance pairs) to fixed-size vectors."""

    name: str = "encoder"
    concurrent_safe: bool = True

    @property
    @abstractmethod
    def dim(self) -> int:
        """Dimension of word and sentence vectors."""

    @property
    def pair_dim(self) -> int:
        return self.dim

    @abstractmethod
    def word_vectors(self, text: str) -> np.ndarray:
        """Matrix of shape ``(dim, n_words)``."""

    def sentence_vector(self, text: str) -> np.ndarray:
        words = self.word_vectors(text)
        if words.shape[1] == 0:
            raise BackendError("cannot embed an empty utterance")
        return words.mean(axis=1)

    @abstractmethod
    def pair_representation(self, text1: str, text2: str) -> np.ndarray:
        """Pooled vector for the joint input ``[CLS] text1 [SEP] text2``."""

    def parameters(self) -> dict[str, np.ndarray]:
        return {}


class GenerativeBackend(ABC):
    """Next-token model used for perplexity scoring of a pair."""

    name: str = "generator"
    concurrent_safe: bool = True
    trainable: bool = False

    @abstractmethod
    def token_loglik(self, text1: str, text2: str) -> np.ndarray:
        """Natural-log probabilities ``log p(w_i | w_<i)`` for every token of the pair."""

    def conditional_loss(self, text1: str, text2: str) -> float:
        """Mean negative log-likelihood of ``text2``'s tokens given ``text1``."""
        ll = self.token_loglik(text1, text2)
        n2 = len(_tokens(text2))
        return float(-ll[len(ll) - n2 :].mean())

    def train_step(self, pairs: Sequence[tuple[str, str]], learning_rate: float) -> float:
        raise CapabilityError(f"backend {self.name!r} does not support conditional training")


# --------------------------------------------------------------------------
# deterministic toy backends

class HashEncoder(EncoderBackend):
    """Word vectors drawn from a Gaussian seeded by a hash of the word.

    Sentence vectors average the word vectors. The pair representation is a
    fixed random two-segment mixing ``tanh(A s1 + B s2)`` followed by the raw
    segments, standing in for a pooled ``[CLS]`` token.
    """

    name = "hash"

    def __init__(self, dim: int = 128, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self._dim = int(dim)
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0x5EED])
        scale = 1.0 / math.sqrt(self._dim)
        self._mix_a = rng.normal(0.0, 2.0 * scale, size=(self._dim, self._dim))
        self._mix_b = rng.normal(0.0, 2.0 * scale, size=(self._dim, self._dim))
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def pair_dim(self) -> int:
        return 3 * self._dim

    def word_vector(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{word}".encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.normal(0.0, 1.0 / math.sqrt(self._dim), size=self._dim)
            vec.setflags(write=False)
            self._cache[word] = vec
        return vec

    def word_vectors(self, text: str) -> np.ndarray:
        words = _tokens(text)
        if not words:
            return np.zeros((self._dim, 0))
        return np.stack([self.word_vector(w) for w in words], axis=1)

    def pair_representation(self, text1: str, text2: str) -> np.ndarray:
        s1 = self.sentence_vector(text1)
        s2 = self.sentence_vector(text2)
        return np.concatenate([np.tanh(self._mix_a @ s1 + self._mix_b @ s2), s1, s2])

    def parameters(self) -> dict[str, np.ndarray]:
        return {"mix_a": self._mix_a, "mix_b": self._mix_b}


class UniformLM(GenerativeBackend):
    """Every token has probability ``1 / vocab_size``."""

    name = "uniform"

    def __init__(self, vocab_size: int = 16):
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        self.vocab_size = int(vocab_size)

    def token_loglik(self, text1: str, text2: str) -> np.ndarray:
        n = len(_tokens(text1)) + len(_tokens(text2))
        return np.full(n, -math.log(self.vocab_size))


class BigramLM(GenerativeBackend):
    """Bigram language model with softmax-parameterised transition rows.

    ``fit`` initialises the logits to log add-alpha probabilities, which makes
    the model exactly the smoothed count estimator. ``train_step`` then updates
    the logits by gradient descent on the conditional loss of the second
    utterance given the first. Words outside the vocabulary map to ``<unk>``.
    """

    name = "bigram"
    trainable = True

    def __init__(self, vocab: Sequence[str] = (), alpha: float = 0.1):
        self.alpha = float(alpha)
        words = [BOS, UNK] + sorted(set(vocab) - {BOS, UNK})
        self.vocab = {w: i for i, w in enumerate(words)}
        v = len(words)
        self.logits = np.full((v, v), -math.log(v))
        self.concurrent_safe = True

    @classmethod
    def fit(cls, texts: Iterable[str], alpha: float = 0.1) -> "BigramLM":
        texts = list(texts)
        model = cls(sorted({w for t in texts for w in _tokens(t)}), alpha)
        v = len(model.vocab)
        counts = np.zeros((v, v))
        for t in texts:
            ids = model._ids(t)
            prev = model.vocab[BOS]
            for i in ids:
                counts[prev, i] += 1
                prev = i
        probs = (counts + model.alpha) / (counts.sum(axis=1, keepdims=True) + model.alpha * v)
        model.logits = np.log(probs)
        return model

    def _ids(self, text: str) -> list[int]:
        unk = self.vocab[UNK]
        return [self.vocab.get(w, unk) for w in _tokens(text)]

    def _log_softmax(self, rows: np.ndarray) -> np.ndarray:
        z = rows - rows.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def _transitions(self, text1: str, text2: str) -> tuple[np.ndarray, np.ndarray]:
        ids = self._ids(text1) + self._ids(text2)
        prev = np.array([self.vocab[BOS]] + ids[:-1], dtype=int)
        return prev, np.array(ids, dtype=int)

    def token_loglik(self, text1: str, text2: str) -> np.ndarray:
        prev, nxt = self._transitions(text1, text2)
        if nxt.size == 0:
            return np.zeros(0)
        logp = self._log_softmax(self.logits[prev])
        return logp[np.arange(nxt.size), nxt]

    def conditional_grad(self, text1: str, text2: str) -> tuple[float, np.ndarray]:
        """Conditional loss of ``text2`` given ``text1`` and its gradient w.r.t. the logits."""
        prev, nxt = self._transitions(text1, text2)
        n2 = len(_tokens(text2))
        if n2 == 0:
            raise BackendError("target utterance is empty")
        prev, nxt = prev[-n2:], nxt[-n2:]
        logp = self._log_softmax(self.logits[prev])
        loss = float(-logp[np.arange(n2), nxt].mean())
        d_rows = np.exp(logp)
        d_rows[np.arange(n2), nxt] -= 1.0
        grad = np.zeros_like(self.logits)
        np.add.at(grad, prev, d_rows / n2)
        return loss, grad

    def train_step(self, pairs: Sequence[tuple[str, str]], learning_rate: float) -> float:
        if not pairs:
            raise BackendError("no training pairs")
        total_loss = 0.0
        total_grad = np.zeros_like(self.logits)
        for t1, t2 in pairs:
            loss, grad = self.conditional_grad(t1, t2)
            total_loss += loss
            total_grad += grad
        self.logits -= learning_rate * total_grad / len(pairs)
        return total_loss / len(pairs)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"logits": self.logits}


# --------------------------------------------------------------------------
# optional pretrained backends (weights must be available locally or via the hub)

class SentenceTransformerEncoder(EncoderBackend):
    concurrent_safe = False

    def __init__(self, model: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendError("sentence-transformers is not installed") from exc
        self.name = f"sbert:{model}"
        self._model = SentenceTransformer(model, device="cpu")
        self._dim = int(self._model.get_sentence_embedding_dimension())
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def pair_dim(self) -> int:
        return 2 * self._dim

    def sentence_vector(self, text: str) -> np.ndarray:
        if text not in self._cache:
            self._cache[text] = np.asarray(self._model.encode(text), dtype=float)
        return self._cache[text]

    def word_vectors(self, text: str) -> np.ndarray:
        out = self._model.encode(text, output_value="token_embeddings")
        return np.asarray(out, dtype=float).T

    def pair_representation(self, text1: str, text2: str) -> np.ndarray:
        return np.concatenate([self.sentence_vector(text1), self.sentence_vector(text2)])


class TransformerWordEncoder(EncoderBackend):
    """Frozen transformer: word vectors from the last layer, pair vector from the first token."""

    concurrent_safe = False

    def __init__(self, model: str):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendError("transformers/torch are not installed") from exc
        self._torch = torch
        self.name = f"hf-words:{model}"
        self._tok = AutoTokenizer.from_pretrained(model)
        self._model = AutoModel.from_pretrained(model).eval()
        self._dim = int(self._model.config.hidden_size)

    @property
    def dim(self) -> int:
        return self._dim

    def _hidden(self, *texts: str):
        enc = self._tok(*texts, return_tensors="pt", truncation=True)
        with self._torch.no_grad():
            return self._model(**enc).last_hidden_state[0].numpy().astype(float)

    def word_vectors(self, text: str) -> np.ndarray:
        return self._hidden(text)[1:-1].T

    def pair_representation(self, text1: str, text2: str) -> np.ndarray:
        return self._hidden(text1, text2)[0]


class TransformerCausalLM(GenerativeBackend):
    concurrent_safe = False

    def __init__(self, model: str):
        try:
            import torch
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendError("transformers/torch are not installed") from exc
        self._torch = torch
        self.name = f"hf-causal:{model}"
        self._tok = AutoTokenizer.from_pretrained(model)
        self._model = AutoModelForCausalLM.from_pretrained(model).eval()

    def token_loglik(self, text1: str, text2: str) -> np.ndarray:
        torch = self._torch
        ids = self._tok(f"{text1} {text2}", return_tensors="pt").input_ids
        bos = self._tok.bos_token_id
        if bos is not None:
            ids = torch.cat([torch.tensor([[bos]]), ids], dim=1)
        with torch.no_grad():
            logits = self._model(ids).logits[0, :-1]
        logp = torch.log_softmax(logits, dim=-1)
        return logp.gather(1, ids[0, 1:, None])[:, 0].numpy().astype(float)


# --------------------------------------------------------------------------
# registry

def parse_backend_id(identifier: str) -> tuple[str, str, dict[str, str]]:
    """Split ``name[:arg][,key=value...]`` into name, positional arg and options."""
    name, _, rest = identifier.partition(":")
    arg = ""
    options: dict[str, str] = {}
    for part in filter(None, rest.split(",")):
        if "=" in part:
            k, v = part.split("=", 1)
            options[k.strip()] = v.strip()
        elif not arg:
            arg = part.strip()
        else:
            raise BackendError(f"cannot parse backend identifier {identifier!r}")
    return name.strip(), arg, options


def _hash_factory(arg: str, opts: dict[str, str], texts) -> EncoderBackend:
    return HashEncoder(dim=int(opts.get("dim", 128)), seed=int(opts.get("seed", 0)))


ENCODERS: dict[str, Callable] = {
    "hash": _hash_factory,
    "sbert": lambda arg, opts, texts: SentenceTransformerEncoder(arg),
    "hf-words": lambda arg, opts, texts: TransformerWordEncoder(arg),
}


def _bigram_factory(arg: str, opts: dict[str, str], texts) -> GenerativeBackend:
    if texts is None:
        raise BackendError("the bigram backend needs training texts to estimate its counts")
    return BigramLM.fit(texts, alpha=float(opts.get("alpha", 0.1)))


GENERATORS: dict[str, Callable] = {
    "uniform": lambda arg, opts, texts: UniformLM(int(opts.get("vocab", 16))),
    "bigram": _bigram_factory,
    "hf-causal": lambda arg, opts, texts: TransformerCausalLM(arg),
}


def get_encoder(identifier: str) -> EncoderBackend:
    name, arg, opts = parse_backend_id(identifier)
    if name not in ENCODERS:
        raise BackendError(f"unknown encoder backend {name!r}; known: {sorted(ENCODERS)}")
    backend = ENCODERS[name](arg, opts, None)
    backend.identifier = identifier
    return backend


def get_generator(identifier: str, texts: Iterable[str] | None = None) -> GenerativeBackend:
    name, arg, opts = parse_backend_id(identifier)
    if name not in GENERATORS:
        raise BackendError(f"unknown generative backend {name!r}; known: {sorted(GENERATORS)}")
    backend = GENERATORS[name](arg, opts, texts)
    backend.identifier = identifier
    return backend


def clone(backend: GenerativeBackend) -> GenerativeBackend:
    return copy.deepcopy(backend)
