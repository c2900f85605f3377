"""Per-class learnable prompt tokens and the "a photo of a [X]... person" template."""

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

VOCAB = ("<sos>", "<eos>", "a", "photo", "of", "person")
PREFIX_WORDS = ("<sos>", "a", "photo", "of", "a")
SUFFIX_WORDS = ("person", "<eos>")


def template_ids():
    index = {w: i for i, w in enumerate(VOCAB)}
    return [index[w] for w in PREFIX_WORDS], [index[w] for w in SUFFIX_WORDS]


class PromptBank(nn.Module):
    """K learnable ``L x d`` token matrices plus fixed template embeddings.

    Only the first ``n_fused`` (M) tokens of a class may be replaced by fused
    tokens; the tail is always copied from ``tokens`` as-is.
    """

    def __init__(self, tokens: torch.Tensor, n_fused: int, prefix: torch.Tensor, suffix: torch.Tensor):
        super().__init__()
        n_classes, length, dim = tokens.shape
        if not 1 <= n_fused < length:
            raise ConfigError(f"need 1 <= M < L, got M={n_fused}, L={length}")
        if prefix.shape[-1] != dim or suffix.shape[-1] != dim:
            raise ShapeError("template embeddings must share the token dimension")
        self.n_fused = n_fused
        self.tokens = nn.Parameter(tokens)
        self.register_buffer("prefix", prefix.detach().clone())
        self.register_buffer("suffix", suffix.detach().clone())

    @property
    def n_classes(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def prefix_len(self) -> int:
        return self.prefix.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.prefix.shape[0] + self.length + self.suffix.shape[0]

    def _check_ids(self, class_ids: torch.Tensor) -> None:
        if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= self.n_classes):
            raise IndexError(f"class id out of range [0, {self.n_classes})")

    def sequences(self, class_ids, head=None, tokens=None) -> torch.Tensor:
        """Batched assembly.

        ``head`` (B, M, d) replaces the first M prompt tokens; ``tokens``
        (B, L, d) replaces the whole prompt (used by the meta-net baseline).
        """
        class_ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
        self._check_ids(class_ids)
        b = class_ids.shape[0]
        if tokens is None:
            tokens = self.tokens[class_ids]
            if head is not None:
                if tuple(head.shape) != (b, self.n_fused, self.dim):
                    raise ShapeError(
                        f"fused head must be {(b, self.n_fused, self.dim)}, got {tuple(head.shape)}"
                    )
                tokens = torch.cat([head, tokens[:, self.n_fused:]], dim=1)
        elif tuple(tokens.shape) != (b, self.length, self.dim):
            raise ShapeError(f"tokens must be {(b, self.length, self.dim)}, got {tuple(tokens.shape)}")
        prefix = self.prefix.expand(b, -1, -1)
        suffix = self.suffix.expand(b, -1, -1)
        return torch.cat([prefix, tokens, suffix], dim=1)


def init_prompt_bank(
    n_classes: int,
    length: int,
    n_fused: int,
    dim: int,
    seed: int,
    prefix: torch.Tensor | None = None,
    suffix: torch.Tensor | None = None,
    dtype=torch.float32,
) -> PromptBank:
    """Draw every class's tokens i.i.d. from N(0, 0.02^2) using ``seed``.

    Template embeddings default to draws from the same generator; pass the
    text encoder's word embeddings to tie them to its vocabulary.
    """
    if n_classes < 1:
        raise ConfigError(f"need at least one class, got {n_classes}")
    if not 1 <= n_fused < length:
        raise ConfigError(f"need 1 <= M < L, got M={n_fused}, L={length}")
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randn(n_classes, length, dim, generator=gen, dtype=torch.float64) * 0.02
    if prefix is None:
        prefix = torch.randn(len(PREFIX_WORDS), dim, generator=gen, dtype=torch.float64) * 0.02
    if suffix is None:
        suffix = torch.randn(len(SUFFIX_WORDS), dim, generator=gen, dtype=torch.float64) * 0.02
    return PromptBank(tokens.to(dtype), n_fused, prefix.to(dtype), suffix.to(dtype))


def assemble_sequence(bank: PromptBank, class_id: int, fused_tokens=None) -> torch.Tensor:
    """Return the ``(T, d)`` token sequence for one class."""
    if not 0 <= class_id < bank.n_classes:
        raise IndexError(f"class id {class_id} out of range [0, {bank.n_classes})")
    head = None
    if fused_tokens is not None:
        head = torch.as_tensor(fused_tokens, dtype=bank.tokens.dtype)
        if tuple(head.shape) != (bank.n_fused, bank.dim):
            raise ShapeError(f"fused tokens must be {(bank.n_fused, bank.dim)}, got {tuple(head.shape)}")
        head = head.unsqueeze(0)
    return bank.sequences([class_id], head=head)[0]
