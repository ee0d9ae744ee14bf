"""Loop-based reference for the flexible matching rule.

Deliberately naive: plain Python floats, explicit set construction, one
branch decision per row, nothing shared with the vectorized kernel.  Tests
compare :func:`flexible_match_oracle` against
:func:`fmifood.simkernel.flexible_match_score`; this side is the referee
and must stay boring.
"""

from __future__ import annotations

from .simkernel import Direction, MatchingThresholds, SimilarityMatrix


def _as_rows(S: SimilarityMatrix, direction: Direction) -> tuple[list[list[float]], list[bool], list[bool]]:
    grid = [[float(v) for v in row] for row in S.scores.detach().tolist()]
    row_mask = [bool(v) for v in S.row_mask.tolist()]
    col_mask = [bool(v) for v in S.col_mask.tolist()]
    if Direction(direction) == Direction.IMAGE_TO_TEXT:
        return grid, row_mask, col_mask
    transposed = [[grid[i][t] for i in range(len(grid))] for t in range(len(grid[0]))]
    return transposed, col_mask, row_mask


def flexible_match_oracle(
    S: SimilarityMatrix, thresholds: MatchingThresholds, direction: Direction
) -> float:
    """Literal per-row application of the three-branch rule.

    For each valid row: collect the scores above the upper threshold and
    average them; otherwise take the max if it sits inside [lower, upper];
    otherwise drop the row.  Average the surviving rows; 0 if none survive.
    """
    grid, row_mask, col_mask = _as_rows(S, direction)
    lower = thresholds.lower
    upper = thresholds.upper

    kept: list[float] = []
    for i, row in enumerate(grid):
        if not row_mask[i]:
            continue
        scores = [row[t] for t in range(len(row)) if col_mask[t]]
        if not scores:
            continue
        best = max(scores)
        if best > upper:
            above = [s for s in scores if s > upper]
            kept.append(sum(above) / len(above))
        elif lower <= best <= upper:
            band = [s for s in scores if lower <= s <= upper]
            kept.append(max(band))
        else:
            continue
    if not kept:
        return 0.0
    return sum(kept) / len(kept)
