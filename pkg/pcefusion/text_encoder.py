"""Tokenization and encoding of the four context-layer strings of a device.

A layer string such as "Spiro-MeOTAD" or "FTO/TiO2" is split by a rule-based tokenizer, mapped to ids through a
:class:`Vocabulary`, embedded, optionally refined by one self-attention block, and summarized by the vector at the
leading CLS position (or by the mean over its tokens when the block is disabled).
"""
import collections
import re
from logging import getLogger
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from ase.data import chemical_symbols

from pcefusion import tensor as T
from pcefusion.coattention import ForwardContext, MultiHeadAttention
from pcefusion.component import Component
from pcefusion.errors import ContractError, DataError
from pcefusion.nn import LayerNorm, Module
from pcefusion.tensor import Tensor

logger = getLogger(__name__)

LAYER_ROLES = ("substrate", "etl", "htl", "back_contact")

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN)
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2

DEFAULT_MAX_TOKENS = 32
DEFAULT_MIN_COUNT = 1

ELEMENTS = frozenset(chemical_symbols[1:119])

_piece_pat = re.compile(r"[A-Za-z]+|[0-9]+|[^\sA-Za-z0-9]")


class LayerText(Component):
    """The text describing one context layer of a device.

    Attributes:
        role (str): One of "substrate", "etl", "htl" and "back_contact".
        text (str): The compound string, e.g. "Spiro-MeOTAD".
    """

    def __init__(self, role: str, text: str):
        if role not in LAYER_ROLES:
            raise ContractError(f"unknown layer role {role!r}; expected one of {LAYER_ROLES}")
        self.role: str = role
        self.text: str = text

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(role=self.role, text=self.text)

    def to_string(self) -> str:
        """Convert this object into a string."""
        return f"<LayerText, role: {self.role}, text: {self.text}>"


def canonical_layers(layers: Iterable[LayerText]) -> List[LayerText]:
    """Order layers as (substrate, etl, htl, back_contact).

    Raises:
        ContractError: If a role is missing or appears twice.
    """
    by_role: Dict[str, LayerText] = {}
    for layer in layers:
        if layer.role in by_role:
            raise ContractError(f"duplicate layer role {layer.role!r}")
        by_role[layer.role] = layer
    missing = [role for role in LAYER_ROLES if role not in by_role]
    if missing:
        raise ContractError(f"missing layer roles {missing}")
    return [by_role[role] for role in LAYER_ROLES]


def _split_elements(word: str) -> Optional[List[str]]:
    """Split ``word`` into element symbols, or return None when it is not a run of symbols.

    Two-letter symbols are preferred wherever the remainder still splits.
    """
    n = len(word)
    # step[i] is the symbol length taken at position i on a complete split of word[i:], 0 if none exists.
    # step[n] marks the end of the word.
    step = [0] * (n + 1)
    step[n] = -1
    for i in range(n - 1, -1, -1):
        for size in (2, 1):
            if i + size <= n and step[i + size] and word[i : i + size] in ELEMENTS:
                step[i] = size
                break
    if not step[0]:
        return None
    symbols, i = [], 0
    while i < n:
        symbols.append(word[i : i + step[i]])
        i += step[i]
    return symbols


def split_tokens(text: str) -> List[str]:
    """Split a compound string into tokens.

    Letters, digits and punctuation form separate runs. A letter run that reads entirely as element symbols is
    split at symbol boundaries ("TiO" -> "Ti", "O"); any other run, such as "Spiro", is kept whole.
    """
    tokens: List[str] = []
    for piece in _piece_pat.findall(text.strip()):
        if piece[0].isalpha():
            tokens.extend(_split_elements(piece) or [piece])
        else:
            tokens.append(piece)
    return tokens


class Vocabulary(Component):
    """A dense token <-> id mapping with PAD=0, UNK=1 and CLS=2.

    Attributes:
        id_to_token (List[str]): Tokens by id.
        token_to_id (Dict[str, int]): The inverse mapping.
    """

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: List[str] = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def tokenize(self, text: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> List[int]:
        """Map ``text`` to exactly ``max_tokens`` ids: CLS, the token ids, then PAD.

        Unknown tokens become UNK; long strings are truncated.
        """
        if max_tokens < 1:
            raise ContractError(f"max_tokens must be positive, got {max_tokens}")
        ids = [CLS_ID] + [self.lookup(t) for t in split_tokens(text)]
        ids = ids[:max_tokens]
        return ids + [PAD_ID] * (max_tokens - len(ids))

    def save(self, path: str) -> None:
        """Write one "token<TAB>id" line per entry."""
        with open(path, "w") as f:
            for i, token in enumerate(self.id_to_token):
                f.write(f"{token}\t{i}\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        entries = []
        with open(path) as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                token, sep, index = line.rpartition("\t")
                if not sep or not index.isdigit():
                    raise DataError(f"{path}:{line_no}: expected 'token<TAB>id', got {line!r}")
                entries.append((int(index), token))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))) or [t for _, t in entries[:3]] != list(
            SPECIAL_TOKENS
        ):
            raise DataError(f"{path}: ids must be dense and start with {SPECIAL_TOKENS}")
        return cls([t for _, t in entries[3:]])

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(tokens=self.id_to_token)

    def to_string(self) -> str:
        """Convert this object into a string."""
        return f"<Vocabulary, #tokens: {len(self)}>"


def tokenize(text: str, vocab: Vocabulary, max_tokens: int = DEFAULT_MAX_TOKENS) -> List[int]:
    """See :meth:`Vocabulary.tokenize`."""
    return vocab.tokenize(text, max_tokens)


def build_vocab(corpus: Sequence[str], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """See :class:`VocabularyBuilder`."""
    return VocabularyBuilder.build(corpus, min_count)


class VocabularyBuilder:
    @classmethod
    def build(cls, corpus: Sequence[str], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
        """Collect tokens seen at least ``min_count`` times, most frequent first, ties in lexicographic order."""
        logger.debug("Create a Vocabulary.")
        if not corpus:
            raise ContractError("cannot build a vocabulary from an empty corpus")
        counts = collections.Counter(t for text in corpus for t in split_tokens(text))
        tokens = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
        vocab = Vocabulary(tokens)
        logger.debug(f"Successfully created {vocab}.")
        return vocab


class TextEncoder(Module):
    """Token and position embeddings, an optional self-attention block, and a read-out.

    With attention the read-out is the vector at the CLS position; without it, the mean over non-PAD positions.

    Attributes:
        token_embedding (Tensor): V x d_bert.
        position_embedding (Tensor): max_tokens x d_bert.
        block_attn (MultiHeadAttention): Self-attention over token positions (absent when disabled).
        block_norm (LayerNorm): Post-norm of the self-attention block (absent when disabled).
    """

    def __init__(
        self,
        rng: np.random.Generator,
        vocab_size: int,
        d_bert: int,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        num_heads: int = 4,
        use_attention: bool = True,
    ):
        self.token_embedding = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d_bert)), requires_grad=True)
        self.position_embedding = Tensor(rng.normal(0.0, 0.1, size=(max_tokens, d_bert)), requires_grad=True)
        if use_attention:
            self.block_attn = MultiHeadAttention(rng, d_bert, num_heads)
            self.block_norm = LayerNorm(d_bert)
        self._use_attention = use_attention

    @property
    def d_bert(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def max_tokens(self) -> int:
        return self.position_embedding.shape[0]

    def __call__(self, token_ids: np.ndarray, ctx: Optional[ForwardContext] = None) -> Tensor:
        """Encode token-id rows.

        Args:
            token_ids: An integer array of shape (..., max_tokens) whose first column is CLS.

        Returns:
            The string vectors, shape (..., d_bert).
        """
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.shape[-1] != self.max_tokens:
            raise ContractError(f"expected {self.max_tokens} tokens per string, got {token_ids.shape[-1]}")
        if np.any(token_ids >= self.token_embedding.shape[0]) or np.any(token_ids < 0):
            raise ContractError("token id outside the vocabulary")
        lead = token_ids.shape[:-1]
        flat = token_ids.reshape(-1, self.max_tokens)
        x = T.take(self.token_embedding, flat) + self.position_embedding
        if self._use_attention:
            ctx = ctx or ForwardContext()
            update = self.block_attn(x, x, x, flat != PAD_ID, ctx, "token_self")
            x = self.block_norm(x + ctx.dropout(update))
            pooled = x[:, 0, :]
        else:
            pooled = T.masked_mean(x, (flat != PAD_ID)[..., None], axis=1)
        return T.reshape(pooled, lead + (self.d_bert,))


def encode_layers(
    layers: Sequence[LayerText],
    encoder: TextEncoder,
    vocab: Vocabulary,
    ctx: Optional[ForwardContext] = None,
) -> Tensor:
    """Encode the four layer strings of one device into a 4 x d_bert tensor in canonical role order."""
    ordered = canonical_layers(layers)
    ids = np.array([vocab.tokenize(layer.text, encoder.max_tokens) for layer in ordered], dtype=np.int64)
    return encoder(ids, ctx)
