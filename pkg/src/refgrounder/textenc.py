"""Expression encoder: embeddings -> BiLSTM -> optional self-attention
blocks -> per-token features, plus attentive pooling to one global vector.

PAD positions never receive attention weight and are zeroed in the output,
so appending extra padding cannot change any result.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .data import EmbeddingTable


class TextEncodeError(ValueError):
    pass


@dataclass
class TextFeatures:
    per_token: torch.Tensor  # (B, L, D), PAD rows zeroed
    pooled: torch.Tensor     # (B, D), convex combination of valid rows
    valid_len: torch.Tensor  # (B,)


def padding_mask(valid_len: torch.Tensor, max_len: int) -> torch.Tensor:
    """True at PAD positions."""
    positions = torch.arange(max_len, device=valid_len.device)
    return positions[None, :] >= valid_len[:, None]


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual multi-head attention + feed-forward."""

    def __init__(self, dim: int, heads: int = 8, ff_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, dim * ff_mult),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(dim * ff_mult, dim),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask, need_weights=False):
        h = self.norm1(x)
        attn_out, weights = self.attn(
            h, h, h,
            key_padding_mask=pad_mask,
            need_weights=need_weights,
            average_attn_weights=True,
        )
        x = x + self.dropout(attn_out)
        x = x + self.ff(self.norm2(x))
        return x, weights


class AttentivePool(nn.Module):
    """Softmax-weighted sum of valid rows; an MLP scores each row."""

    def __init__(self, dim: int):
        super().__init__()
        self.score = nn.Sequential(
            nn.Linear(dim, dim),
            nn.ReLU(inplace=True),
            nn.Linear(dim, 1),
        )

    def forward(self, per_token: torch.Tensor, valid_len: torch.Tensor):
        mask = padding_mask(valid_len, per_token.shape[1])
        scores = self.score(per_token).squeeze(-1)
        scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        # multiply-and-sum instead of matmul: extra PAD positions contribute
        # exact zeros, so trailing padding cannot perturb the result bitwise
        pooled = (weights.unsqueeze(-1) * per_token).sum(dim=1)
        return pooled, weights


def attentive_pool(per_token: torch.Tensor, valid_len: torch.Tensor,
                   pool: AttentivePool) -> torch.Tensor:
    pooled, _ = pool(per_token, valid_len)
    return pooled


class TextEncoder(nn.Module):
    """Token indices in, 512-d per-token features and pooled vector out.

    ``external_encoder`` swaps the embedding+BiLSTM stage for a plug-in
    callable (token ids, valid lengths) -> (B, L, hidden_dim); self-attention
    blocks, masking and pooling still apply on top.  Pretrained transformer
    encoders attach through this hook.
    """

    def __init__(self, table: EmbeddingTable, hidden_dim: int = 512,
                 sa_layers: int = 0, heads: int = 8, dropout: float = 0.1,
                 freeze_embeddings: bool = True, external_encoder=None):
        super().__init__()
        if hidden_dim % 2 != 0:
            raise TextEncodeError("hidden_dim must be even (BiLSTM halves it)")
        self.hidden_dim = hidden_dim
        self.external_encoder = external_encoder
        if external_encoder is None:
            self.embedding = nn.Embedding.from_pretrained(
                torch.from_numpy(table.matrix.copy()),
                freeze=freeze_embeddings,
                padding_idx=0,
            )
            self.lstm = nn.LSTM(
                table.dim, hidden_dim // 2, batch_first=True, bidirectional=True
            )
        self.sa_blocks = nn.ModuleList(
            SelfAttentionBlock(hidden_dim, heads=heads, dropout=dropout)
            for _ in range(sa_layers)
        )
        self.pool = AttentivePool(hidden_dim)

    def _recurrent_features(self, indices, valid_len, max_len):
        emb = self.embedding(indices)
        packed = pack_padded_sequence(
            emb, valid_len.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.lstm(packed)
        per_token, _ = pad_packed_sequence(out, batch_first=True, total_length=max_len)
        return per_token

    def forward(self, indices: torch.Tensor, valid_len: torch.Tensor,
                need_weights: bool = False) -> TextFeatures:
        if torch.any(valid_len < 1):
            raise TextEncodeError("every sequence needs at least one valid token")
        max_len = indices.shape[1]
        if self.external_encoder is not None:
            per_token = self.external_encoder(indices, valid_len)
            if per_token.shape != (indices.shape[0], max_len, self.hidden_dim):
                raise TextEncodeError(
                    f"external encoder returned {tuple(per_token.shape)}, "
                    f"expected {(indices.shape[0], max_len, self.hidden_dim)}"
                )
        else:
            per_token = self._recurrent_features(indices, valid_len, max_len)

        mask = padding_mask(valid_len, max_len)
        self._attn_weights = []
        for block in self.sa_blocks:
            per_token, w = block(per_token, mask, need_weights=need_weights)
            if need_weights:
                self._attn_weights.append(w.detach())
        per_token = per_token.masked_fill(mask[..., None], 0.0)

        pooled, pool_weights = self.pool(per_token, valid_len)
        self._pool_weights = pool_weights.detach()
        return TextFeatures(per_token=per_token, pooled=pooled, valid_len=valid_len)
