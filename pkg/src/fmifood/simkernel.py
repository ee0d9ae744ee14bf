"""Patch-token similarity kernels.

Reduces a patch x token cosine-similarity grid to a single image-text score
three ways:

* flexible matching -- per patch, average every token score above the upper
  threshold; if none clears it, take the row max when it lands inside
  [lower, upper]; drop the patch entirely when its best token falls below
  the lower threshold.  The pair score is the mean over surviving patches.
* mean-max -- per patch, take the best token score and average (FILIP).
* global cosine -- one dot product between pooled embeddings (CLIP).

All functions are pure and differentiable through torch autograd; masked
rows/columns never influence any score.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import torch

from .exceptions import ConfigurationError, ValidationError

# Finite stand-in for "minus infinity" when masking similarity entries.
# Keeps max/where NaN-free in both float32 and float64.
_MASK_FILL = -1e30

_UNIT_NORM_TOL = 1e-6
_COSINE_SLACK = 1e-6


class TokenKind(str, enum.Enum):
    IMAGE_PATCH = "image_patch"
    TEXT_TOKEN = "text_token"


class Direction(str, enum.Enum):
    IMAGE_TO_TEXT = "image_to_text"
    TEXT_TO_IMAGE = "text_to_image"


class Scorer(str, enum.Enum):
    FMIFOOD = "fmifood"
    FILIP = "filip"
    CLIP = "clip"


class MatchBranch(str, enum.Enum):
    AVERAGED_ABOVE_UPPER = "averaged_above_d"
    MAX_IN_BAND = "max_in_band"
    DROPPED = "dropped"


@dataclass(frozen=True)
class MatchingThresholds:
    """Lower/upper cutoffs for the three-branch matching rule.

    Thresholds are compared against raw cosine values (before any
    temperature scaling) and are fixed run constants, never learned.
    """

    lower: float = 0.0
    upper: float = 0.85

    def __post_init__(self):
        if not (self.lower <= self.upper):
            raise ValidationError(
                f"lower threshold {self.lower} must not exceed upper {self.upper}"
            )


@dataclass
class TokenEmbeddings:
    """Bank of per-patch or per-token feature vectors with a validity mask.

    Rows with ``mask == True`` must be unit length; masked-out rows are
    padding and never reach any score.
    """

    vectors: torch.Tensor  # [n_tokens, dim]
    mask: torch.Tensor  # [n_tokens] bool
    kind: TokenKind

    def __post_init__(self):
        self.kind = TokenKind(self.kind)
        if self.vectors.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got shape {tuple(self.vectors.shape)}")
        if self.mask.shape != self.vectors.shape[:1]:
            raise ValidationError("mask length must equal the number of rows")
        if self.mask.dtype != torch.bool:
            self.mask = self.mask.to(torch.bool)
        if self.vectors.shape[0] < 1:
            raise ValidationError("need at least one token row")
        if not bool(self.mask.any()):
            raise ValidationError("at least one row must be unmasked")
        norms = self.vectors[self.mask].norm(dim=-1)
        if bool((norms < 1e-8).any()):
            raise ValidationError("unmasked row has zero norm")
        if bool(((norms - 1.0).abs() > _UNIT_NORM_TOL).any()):
            worst = float((norms - 1.0).abs().max())
            raise ValidationError(f"unmasked rows must be unit norm (off by {worst:.2e})")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def n_tokens(self) -> int:
        return int(self.vectors.shape[0])


@dataclass
class SimilarityMatrix:
    """Patch x token cosine grid plus the masks inherited from both banks."""

    scores: torch.Tensor  # [n_img_patches, n_text_tokens]
    row_mask: torch.Tensor  # [n_img_patches] bool
    col_mask: torch.Tensor  # [n_text_tokens] bool

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise ValidationError("scores must be 2-D")
        if self.row_mask.shape != self.scores.shape[:1] or self.col_mask.shape != self.scores.shape[1:]:
            raise ValidationError("mask shapes must match the score grid")
        valid = self.row_mask[:, None] & self.col_mask[None, :]
        if valid.any():
            cells = self.scores[valid]
            if bool((cells.abs() > 1.0 + _COSINE_SLACK).any()):
                worst = float(cells.abs().max())
                raise ValidationError(f"cosine entries must lie in [-1, 1] (got {worst})")

    @property
    def transposed(self) -> "SimilarityMatrix":
        return SimilarityMatrix(
            scores=self.scores.T, row_mask=self.col_mask, col_mask=self.row_mask
        )


@dataclass(frozen=True)
class PatchMatch:
    patch_index: int
    branch: MatchBranch
    matched_token_indices: tuple[int, ...]


@dataclass
class MatchReport:
    """Per-patch branch classification with the token indices each patch matched."""

    per_patch: list[PatchMatch] = field(default_factory=list)

    def to_records(self, token_words: list[str] | None = None) -> list[dict]:
        records = []
        for m in self.per_patch:
            rec = {
                "patch": m.patch_index,
                "branch": m.branch.value,
                "tokens": list(m.matched_token_indices),
            }
            if token_words is not None:
                rec["words"] = [token_words[t] for t in m.matched_token_indices]
            records.append(rec)
        return records

    def to_json(self, token_words: list[str] | None = None) -> str:
        return json.dumps({"patches": self.to_records(token_words)}, indent=2)

    def to_lines(self, token_words: list[str] | None = None) -> list[str]:
        lines = []
        for rec in self.to_records(token_words):
            shown = rec.get("words", [str(t) for t in rec["tokens"]])
            matched = ", ".join(shown) if shown else "-"
            lines.append(f"patch {rec['patch']:>3}  {rec['branch']:<18} {matched}")
        return lines


def token_similarity_matrix(img: TokenEmbeddings, txt: TokenEmbeddings) -> SimilarityMatrix:
    """Cosine grid between image patches (rows) and text tokens (columns).

    Rows are already unit norm, so the grid is a plain dot product.
    """
    if img.kind != TokenKind.IMAGE_PATCH or txt.kind != TokenKind.TEXT_TOKEN:
        raise ConfigurationError(
            f"expected (image_patch, text_token) banks, got ({img.kind.value}, {txt.kind.value})"
        )
    if img.dim != txt.dim:
        raise ConfigurationError(f"embedding dims differ: {img.dim} vs {txt.dim}")
    scores = img.vectors @ txt.vectors.T
    return SimilarityMatrix(scores=scores, row_mask=img.mask, col_mask=txt.mask)


def _flexible_reduce(
    sim: torch.Tensor,
    row_mask: torch.Tensor,
    col_mask: torch.Tensor,
    thresholds: MatchingThresholds,
) -> torch.Tensor:
    """Three-branch reduction over the last two dims of ``sim``.

    ``sim`` is [..., rows, cols]; masks broadcast against [..., rows] and
    [..., cols].  Returns [...] scores.  Dropped rows (best score below the
    lower threshold) leave both the numerator and the denominator; if every
    row drops, the score is 0.
    """
    lower, upper = thresholds.lower, thresholds.upper
    cell_valid = row_mask.unsqueeze(-1) & col_mask.unsqueeze(-2)
    masked = torch.where(cell_valid, sim, torch.full_like(sim, _MASK_FILL))
    row_max = masked.max(dim=-1).values  # [..., rows]

    above = (masked > upper) & cell_valid
    above_cnt = above.sum(dim=-1)
    above_sum = torch.where(above, sim, torch.zeros_like(sim)).sum(dim=-1)
    avg_above = above_sum / above_cnt.clamp(min=1)

    use_above = row_max > upper
    per_row = torch.where(use_above, avg_above, row_max)

    counted = row_mask & (row_max >= lower)
    per_row = torch.where(counted, per_row, torch.zeros_like(per_row))
    total = per_row.sum(dim=-1)
    denom = counted.sum(dim=-1).clamp(min=1)
    return total / denom


def _meanmax_reduce(
    sim: torch.Tensor, row_mask: torch.Tensor, col_mask: torch.Tensor
) -> torch.Tensor:
    """Mean over valid rows of the row max (the FILIP score)."""
    cell_valid = row_mask.unsqueeze(-1) & col_mask.unsqueeze(-2)
    masked = torch.where(cell_valid, sim, torch.full_like(sim, _MASK_FILL))
    row_max = masked.max(dim=-1).values
    row_max = torch.where(row_mask, row_max, torch.zeros_like(row_max))
    denom = row_mask.sum(dim=-1).clamp(min=1)
    return row_max.sum(dim=-1) / denom


def _check_nonempty(S: SimilarityMatrix):
    if not bool(S.row_mask.any()) or not bool(S.col_mask.any()):
        raise ValidationError("similarity matrix needs at least one valid row and column")


def _oriented(S: SimilarityMatrix, direction: Direction) -> SimilarityMatrix:
    return S if Direction(direction) == Direction.IMAGE_TO_TEXT else S.transposed


def flexible_match_score(
    S: SimilarityMatrix, thresholds: MatchingThresholds, direction: Direction
) -> torch.Tensor:
    """Flexible-matching pair score in one direction.

    image_to_text walks patches (rows); text_to_image is the transpose-
    symmetric walk over tokens (columns).  Returns a 0-dim tensor so
    gradients flow back into the score grid.
    """
    _check_nonempty(S)
    S = _oriented(S, direction)
    return _flexible_reduce(S.scores, S.row_mask, S.col_mask, thresholds)


def filip_score(S: SimilarityMatrix, direction: Direction) -> torch.Tensor:
    """Mean-max token-wise score (the flexible rule with an unbounded band)."""
    _check_nonempty(S)
    S = _oriented(S, direction)
    return _meanmax_reduce(S.scores, S.row_mask, S.col_mask)


def clip_score(img_global: torch.Tensor, txt_global: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between two pooled embeddings."""
    if img_global.norm() < 1e-8 or txt_global.norm() < 1e-8:
        raise ValidationError("global embeddings must be nonzero")
    return (img_global / img_global.norm()) @ (txt_global / txt_global.norm())


def combine_directions(
    i2t: torch.Tensor, t2i: torch.Tensor, combine: str = "mean"
) -> torch.Tensor:
    if combine == "mean":
        return (i2t + t2i) / 2
    if combine == "image_to_text":
        return i2t
    raise ConfigurationError(f"unknown direction combination {combine!r}")


def pair_score(
    img: TokenEmbeddings,
    txt: TokenEmbeddings,
    scorer: Scorer,
    thresholds: MatchingThresholds | None = None,
    img_global: torch.Tensor | None = None,
    txt_global: torch.Tensor | None = None,
    combine: str = "mean",
) -> torch.Tensor:
    """Single image-text pair score under the chosen scorer.

    fmifood and filip reduce the token grid in both directions and combine
    them (arithmetic mean by default); clip compares the global embeddings
    and requires them to be supplied.
    """
    scorer = Scorer(scorer)
    if scorer == Scorer.CLIP:
        if img_global is None or txt_global is None:
            raise ConfigurationError("clip scorer needs global embeddings")
        return clip_score(img_global, txt_global)
    S = token_similarity_matrix(img, txt)
    if scorer == Scorer.FMIFOOD:
        if thresholds is None:
            thresholds = MatchingThresholds()
        i2t = flexible_match_score(S, thresholds, Direction.IMAGE_TO_TEXT)
        t2i = flexible_match_score(S, thresholds, Direction.TEXT_TO_IMAGE)
    else:
        i2t = filip_score(S, Direction.IMAGE_TO_TEXT)
        t2i = filip_score(S, Direction.TEXT_TO_IMAGE)
    return combine_directions(i2t, t2i, combine)


def batch_pair_scores(
    img_vectors: torch.Tensor,
    img_mask: torch.Tensor,
    txt_vectors: torch.Tensor,
    txt_mask: torch.Tensor,
    scorer: Scorer,
    thresholds: MatchingThresholds | None = None,
    img_globals: torch.Tensor | None = None,
    txt_globals: torch.Tensor | None = None,
    combine: str = "mean",
) -> torch.Tensor:
    """All-pairs scores between B images and N texts in one shot.

    img_vectors [B, P, D] with img_mask [B, P]; txt_vectors [N, T, D] with
    txt_mask [N, T].  Returns [B, N].  Equivalent to calling pair_score on
    every pair; vectorized so a training step touches one [B, N, P, T]
    grid instead of B*N small ones.
    """
    scorer = Scorer(scorer)
    if scorer == Scorer.CLIP:
        if img_globals is None or txt_globals is None:
            raise ConfigurationError("clip scorer needs global embeddings")
        return img_globals @ txt_globals.T

    sim = torch.einsum("bpd,ntd->bnpt", img_vectors, txt_vectors)
    rows_i = img_mask[:, None, :]  # [B, 1, P]
    cols_t = txt_mask[None, :, :]  # [1, N, T]
    if scorer == Scorer.FMIFOOD:
        if thresholds is None:
            thresholds = MatchingThresholds()
        i2t = _flexible_reduce(sim, rows_i, cols_t, thresholds)
        t2i = _flexible_reduce(sim.transpose(-1, -2), cols_t, rows_i, thresholds)
    else:
        i2t = _meanmax_reduce(sim, rows_i, cols_t)
        t2i = _meanmax_reduce(sim.transpose(-1, -2), cols_t, rows_i)
    return combine_directions(i2t, t2i, combine)


def match_report(S: SimilarityMatrix, thresholds: MatchingThresholds) -> MatchReport:
    """Classify every valid patch into its matching branch.

    Branch averaged_above_d lists every token scoring above the upper
    threshold; max_in_band lists exactly the argmax token (lowest index on
    ties); dropped patches list nothing.
    """
    _check_nonempty(S)
    report = MatchReport()
    scores = S.scores.detach()
    col_idx = [t for t in range(scores.shape[1]) if bool(S.col_mask[t])]
    for i in range(scores.shape[0]):
        if not bool(S.row_mask[i]):
            continue
        row = scores[i]
        best_t = min(col_idx, key=lambda t: (-float(row[t]), t))
        best = float(row[best_t])
        if best > thresholds.upper:
            matched = tuple(t for t in col_idx if float(row[t]) > thresholds.upper)
            report.per_patch.append(PatchMatch(i, MatchBranch.AVERAGED_ABOVE_UPPER, matched))
        elif best >= thresholds.lower:
            report.per_patch.append(PatchMatch(i, MatchBranch.MAX_IN_BAND, (best_t,)))
        else:
            report.per_patch.append(PatchMatch(i, MatchBranch.DROPPED, ()))
    return report


def score_from_report(S: SimilarityMatrix, report: MatchReport) -> float:
    """Recompute the image-to-text flexible score from a match report."""
    values = []
    for m in report.per_patch:
        if m.branch == MatchBranch.DROPPED:
            continue
        row = S.scores[m.patch_index]
        values.append(sum(float(row[t]) for t in m.matched_token_indices) / len(m.matched_token_indices))
    if not values:
        return 0.0
    return sum(values) / len(values)
