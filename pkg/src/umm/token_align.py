"""Alignment of two tokenizations of the same text.

Two tokenizers split one response into different token streams.  A
global minimum-cost dynamic program matches the streams position by
position, the matched walk is cut into segments classified by shape
(one_one, one_many, many_one, many_many), and a co-occurrence count
table accumulated over a corpus then drives the projection of
per-position probability rows from the source vocabulary into the
pivot vocabulary.

Alignment costs compare token surface strings: substituting two tokens
costs their character-level edit distance divided by the longer length,
and leaving a token unmatched on either side costs 1.  Surfaces are
first stripped of leading word-boundary markers so tokenizers that
encode whitespace differently still compare cleanly.
"""

from __future__ import annotations

import json

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from umm.distro_fusion import DistributionMatrix
from umm.errors import (
    EmptySequence,
    IoFailure,
    LengthMismatch,
    OutOfVocab,
    ShapeMismatch,
)

ONE_ONE = "one_one"
ONE_MANY = "one_many"
MANY_ONE = "many_one"
MANY_MANY = "many_many"
KINDS = (ONE_ONE, ONE_MANY, MANY_ONE, MANY_MANY)

GAP_COST = 1.0
# a projected row keeping less than this fraction of its mass falls back
MIN_MAPPED_MASS = 1e-6
DEFAULT_MARKERS = ("▁", "Ġ")  # SentencePiece and byte-BPE word starts


@dataclass
class TokenSeq:
    """One tokenization: ids with their surface strings."""

    ids: list
    surfaces: list
    vocab_size: int

    def __post_init__(self) -> None:
        self.ids = [int(i) for i in self.ids]
        self.surfaces = [str(s) for s in self.surfaces]
        self.vocab_size = int(self.vocab_size)
        if len(self.ids) != len(self.surfaces):
            raise LengthMismatch(
                f"{len(self.ids)} ids but {len(self.surfaces)} surfaces"
            )
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be positive, got {self.vocab_size}")
        for i in self.ids:
            if not 0 <= i < self.vocab_size:
                raise OutOfVocab(f"token id {i} outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return len(self.ids)


class SurfaceNormalizer:
    """Strips leading word-boundary markers before surface comparison."""

    def __init__(self, markers=DEFAULT_MARKERS):
        self.markers = tuple(str(m) for m in markers if m)

    def normalize(self, surface: str) -> str:
        stripped = True
        while stripped:
            stripped = False
            for marker in self.markers:
                if surface.startswith(marker):
                    surface = surface[len(marker):]
                    stripped = True
        return surface


def classify_spans(pivot_len: int, source_len: int) -> str:
    if pivot_len == 1 and source_len == 1:
        return ONE_ONE
    if pivot_len == 1 and source_len > 1:
        return ONE_MANY
    if pivot_len > 1 and source_len == 1:
        return MANY_ONE
    return MANY_MANY


@dataclass(frozen=True)
class AlignmentSegment:
    """Half-open index spans into the pivot and source sequences."""

    pivot_span: tuple
    source_span: tuple
    kind: str

    def __post_init__(self) -> None:
        for span in (self.pivot_span, self.source_span):
            if len(span) != 2 or span[0] >= span[1] or span[0] < 0:
                raise ValueError(f"invalid span {span}")
        expected = classify_spans(
            self.pivot_span[1] - self.pivot_span[0],
            self.source_span[1] - self.source_span[0],
        )
        if self.kind != expected:
            raise ValueError(
                f"kind {self.kind!r} does not match spans "
                f"{self.pivot_span} x {self.source_span} ({expected})"
            )

    def to_json_obj(self) -> dict:
        return {
            "pivot_span": list(self.pivot_span),
            "source_span": list(self.source_span),
            "kind": self.kind,
        }


def char_edit_distance(a: str, b: str) -> int:
    """Plain Levenshtein distance over characters."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        for j, cb in enumerate(b, 1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb))
            )
        previous = current
    return previous[-1]


def surface_distance(a: str, b: str) -> float:
    """Edit distance normalized by the longer surface; 0 for identical."""
    if a == b:
        return 0.0
    return char_edit_distance(a, b) / max(len(a), len(b))


# DP moves; the order is the tie-break preference
_SUB = 0           # consume one pivot and one source token
_PIVOT_ONLY = 1    # consume a pivot token against a gap in the source
_SOURCE_ONLY = 2   # consume a source token against a gap in the pivot


def _align_moves(pivot: TokenSeq, source: TokenSeq, norm: SurfaceNormalizer) -> tuple:
    """Minimum-cost monotone alignment; returns (move list, total cost)."""
    if len(pivot) == 0 or len(source) == 0:
        raise EmptySequence("cannot align an empty token sequence")
    p_surf = [norm.normalize(s) for s in pivot.surfaces]
    s_surf = [norm.normalize(s) for s in source.surfaces]
    sub_cache = {}

    def sub_cost(a: str, b: str) -> float:
        key = (a, b)
        if key not in sub_cache:
            sub_cache[key] = surface_distance(a, b)
        return sub_cache[key]

    n, m = len(p_surf), len(s_surf)
    cost = [[0.0] * (m + 1) for _ in range(n + 1)]
    move = [[_SUB] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i * GAP_COST
        move[i][0] = _PIVOT_ONLY
    for j in range(1, m + 1):
        cost[0][j] = j * GAP_COST
        move[0][j] = _SOURCE_ONLY
    for i in range(1, n + 1):
        row = cost[i]
        above = cost[i - 1]
        for j in range(1, m + 1):
            best = above[j - 1] + sub_cost(p_surf[i - 1], s_surf[j - 1])
            chosen = _SUB
            candidate = above[j] + GAP_COST
            if candidate < best:
                best, chosen = candidate, _PIVOT_ONLY
            candidate = row[j - 1] + GAP_COST
            if candidate < best:
                best, chosen = candidate, _SOURCE_ONLY
            row[j] = best
            move[i][j] = chosen
    moves = []
    i, j = n, m
    while i > 0 or j > 0:
        chosen = move[i][j]
        moves.append(chosen)
        if chosen == _SUB:
            i, j = i - 1, j - 1
        elif chosen == _PIVOT_ONLY:
            i -= 1
        else:
            j -= 1
    moves.reverse()
    return moves, cost[n][m]


def _segment_moves(moves: list) -> list:
    """Cut the move walk into segments.

    A boundary exists only between two adjacent substitutions; every
    gap run therefore stays glued to the substitutions around it, which
    keeps segments maximal.
    """
    spans = []
    seg_p = seg_s = 0
    i = j = 0
    previous = None
    for current in moves:
        if current == _SUB and previous == _SUB:
            spans.append((seg_p, i, seg_s, j))
            seg_p, seg_s = i, j
        if current == _SUB:
            i += 1
            j += 1
        elif current == _PIVOT_ONLY:
            i += 1
        else:
            j += 1
        previous = current
    spans.append((seg_p, i, seg_s, j))
    return [
        AlignmentSegment(
            pivot_span=(p0, p1),
            source_span=(s0, s1),
            kind=classify_spans(p1 - p0, s1 - s0),
        )
        for p0, p1, s0, s1 in spans
    ]


def align_sequences(pivot: TokenSeq, source: TokenSeq,
                    norm: SurfaceNormalizer = None) -> list:
    """Segments of the minimum-cost alignment, covering both sequences.

    Tie-break preference at equal cost: substitution, then a gap in the
    source, then a gap in the pivot.
    """
    moves, _ = _align_moves(pivot, source, norm or SurfaceNormalizer())
    return _segment_moves(moves)


def alignment_cost(pivot: TokenSeq, source: TokenSeq,
                   norm: SurfaceNormalizer = None) -> float:
    """Total cost of the minimum-cost alignment."""
    _, total = _align_moves(pivot, source, norm or SurfaceNormalizer())
    return total


def check_partition(segments: list, pivot_len: int, source_len: int) -> None:
    """Segments must tile [0, pivot_len) and [0, source_len) in order."""
    p_cursor = s_cursor = 0
    for seg in segments:
        if seg.pivot_span[0] != p_cursor or seg.source_span[0] != s_cursor:
            raise ShapeMismatch(f"segment {seg} breaks span continuity")
        p_cursor, s_cursor = seg.pivot_span[1], seg.source_span[1]
    if p_cursor != pivot_len or s_cursor != source_len:
        raise ShapeMismatch(
            f"segments cover [0, {p_cursor}) x [0, {s_cursor}), "
            f"sequences have lengths {pivot_len} and {source_len}"
        )


# --- mapping statistics ---------------------------------------------------------

@dataclass
class AlignStats:
    """Co-occurrence counts of (pivot token id, source token id) pairs."""

    pivot_vocab_size: int
    source_vocab_size: int
    counts: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.pivot_vocab_size = int(self.pivot_vocab_size)
        self.source_vocab_size = int(self.source_vocab_size)
        if self.pivot_vocab_size < 1 or self.source_vocab_size < 1:
            raise ValueError("vocab sizes must be positive")
        for (p, s), c in self.counts.items():
            if not 0 <= p < self.pivot_vocab_size:
                raise OutOfVocab(f"pivot id {p} outside [0, {self.pivot_vocab_size})")
            if not 0 <= s < self.source_vocab_size:
                raise OutOfVocab(f"source id {s} outside [0, {self.source_vocab_size})")
            if c < 1:
                raise ValueError(f"count for ({p}, {s}) must be >= 1, got {c}")

    def combine(self, other: "AlignStats") -> "AlignStats":
        """Entrywise sum; shards of a corpus merge in any order."""
        if (self.pivot_vocab_size != other.pivot_vocab_size
                or self.source_vocab_size != other.source_vocab_size):
            raise ShapeMismatch("cannot combine stats over different vocabularies")
        merged = dict(self.counts)
        for key, c in other.counts.items():
            merged[key] = merged.get(key, 0) + c
        return AlignStats(self.pivot_vocab_size, self.source_vocab_size, merged)

    def total(self) -> int:
        return sum(self.counts.values())


def update_stats(stats: AlignStats, segments: list, pivot: TokenSeq,
                 source: TokenSeq) -> AlignStats:
    """Count every (pivot id, source id) position pair per segment.

    many_many segments are skipped: their internal correspondence is
    unknown, so counting their cross product would only add noise.
    Mutates and returns ``stats``.
    """
    if pivot.vocab_size != stats.pivot_vocab_size:
        raise ShapeMismatch(
            f"pivot vocab {pivot.vocab_size} vs stats {stats.pivot_vocab_size}"
        )
    if source.vocab_size != stats.source_vocab_size:
        raise ShapeMismatch(
            f"source vocab {source.vocab_size} vs stats {stats.source_vocab_size}"
        )
    for seg in segments:
        if seg.kind == MANY_MANY:
            continue
        for p in range(*seg.pivot_span):
            for s in range(*seg.source_span):
                key = (pivot.ids[p], source.ids[s])
                stats.counts[key] = stats.counts.get(key, 0) + 1
    return stats


def kind_histogram(segments: list) -> dict:
    histogram = {kind: 0 for kind in KINDS}
    for seg in segments:
        histogram[seg.kind] += 1
    return histogram


# --- distribution projection ---------------------------------------------------

def _transfer_matrix(stats: AlignStats, vocab_map: str):
    """Sparse [pivot vocab x source vocab] map applied to source rows.

    proportional: column v splits the source token's mass across pivot
    tokens t in proportion to counts[(t, v)].  argmax: all of the mass
    goes to the highest-count pivot token (ties: lowest id).  Columns
    with no counts are zero, so unseen source tokens contribute nothing.
    """
    if vocab_map not in ("proportional", "argmax"):
        raise ValueError(f"unknown vocab_map {vocab_map!r}")
    if not stats.counts:
        return sparse.csr_matrix((stats.pivot_vocab_size, stats.source_vocab_size))
    if vocab_map == "argmax":
        best = {}
        for (p, s), c in stats.counts.items():
            incumbent = best.get(s)
            if incumbent is None or c > incumbent[0] or (c == incumbent[0] and p < incumbent[1]):
                best[s] = (c, p)
        rows = [p for _, p in best.values()]
        cols = list(best.keys())
        vals = np.ones(len(best))
        return sparse.csr_matrix(
            (vals, (rows, cols)),
            shape=(stats.pivot_vocab_size, stats.source_vocab_size),
        )
    rows, cols, vals = [], [], []
    for (p, s), c in stats.counts.items():
        rows.append(p)
        cols.append(s)
        vals.append(float(c))
    matrix = sparse.csr_matrix(
        (vals, (rows, cols)),
        shape=(stats.pivot_vocab_size, stats.source_vocab_size),
    )
    column_sums = np.asarray(matrix.sum(axis=0)).ravel()
    inverse = np.zeros_like(column_sums)
    nonzero = column_sums > 0
    inverse[nonzero] = 1.0 / column_sums[nonzero]
    return matrix @ sparse.diags(inverse)


def project_distribution(src_dist: DistributionMatrix, segments: list,
                         stats: AlignStats, pivot: TokenSeq, source: TokenSeq,
                         pivot_fallback: DistributionMatrix,
                         vocab_map: str = "proportional") -> DistributionMatrix:
    """Rebuild source probability rows over the pivot vocabulary.

    Position mapping per segment: one_one copies its source row;
    one_many picks the source row whose token co-occurs most often with
    the pivot token (ties: leftmost); many_one gives every covered
    pivot position the count-weighted average of the segment's source
    rows (a single row in practice); many_many positions take the
    fallback row.  Each mapped row is then pushed through the vocab
    transfer matrix and renormalized; a row is kept bit-identical when
    no mass was lost, and falls back when almost none survives.
    """
    if src_dist.length != len(source):
        raise ShapeMismatch(
            f"{src_dist.length} source rows for {len(source)} source tokens"
        )
    if pivot_fallback.length != len(pivot):
        raise ShapeMismatch(
            f"{pivot_fallback.length} fallback rows for {len(pivot)} pivot tokens"
        )
    if src_dist.vocab_size != stats.source_vocab_size:
        raise ShapeMismatch(
            f"source rows over {src_dist.vocab_size} tokens, "
            f"stats expect {stats.source_vocab_size}"
        )
    if pivot_fallback.vocab_size != stats.pivot_vocab_size:
        raise ShapeMismatch(
            f"fallback rows over {pivot_fallback.vocab_size} tokens, "
            f"stats expect {stats.pivot_vocab_size}"
        )
    if pivot.vocab_size != stats.pivot_vocab_size:
        raise ShapeMismatch(
            f"pivot vocab {pivot.vocab_size} vs stats {stats.pivot_vocab_size}"
        )
    if source.vocab_size != stats.source_vocab_size:
        raise ShapeMismatch(
            f"source vocab {source.vocab_size} vs stats {stats.source_vocab_size}"
        )
    check_partition(segments, len(pivot), len(source))

    n_pivot = len(pivot)
    chosen = np.zeros((n_pivot, src_dist.vocab_size))
    fallback_mask = np.zeros(n_pivot, dtype=bool)
    for seg in segments:
        p0, p1 = seg.pivot_span
        s0, s1 = seg.source_span
        if seg.kind == MANY_MANY:
            fallback_mask[p0:p1] = True
        elif seg.kind == ONE_ONE:
            chosen[p0] = src_dist.rows[s0]
        elif seg.kind == ONE_MANY:
            pivot_id = pivot.ids[p0]
            best_j, best_count = s0, -1
            for j in range(s0, s1):
                count = stats.counts.get((pivot_id, source.ids[j]), 0)
                if count > best_count:
                    best_count, best_j = count, j
            chosen[p0] = src_dist.rows[best_j]
        else:  # many_one
            for p in range(p0, p1):
                pivot_id = pivot.ids[p]
                weights = np.array(
                    [float(stats.counts.get((pivot_id, source.ids[j]), 0))
                     for j in range(s0, s1)]
                )
                if weights.sum() == 0.0:
                    weights = np.ones(s1 - s0)
                chosen[p] = (weights[:, None] * src_dist.rows[s0:s1]).sum(axis=0) / weights.sum()

    transfer = _transfer_matrix(stats, vocab_map)
    mapped = (transfer @ chosen.T).T
    original_mass = chosen.sum(axis=1)
    mapped_mass = mapped.sum(axis=1)
    out = np.empty((n_pivot, stats.pivot_vocab_size))
    for p in range(n_pivot):
        if fallback_mask[p] or mapped_mass[p] < MIN_MAPPED_MASS * original_mass[p]:
            out[p] = pivot_fallback.rows[p]
        elif mapped_mass[p] == original_mass[p]:
            # no mass lost: skip renormalization so an identity mapping
            # reproduces the input row exactly
            out[p] = mapped[p]
        else:
            out[p] = mapped[p] / mapped_mass[p]
    return DistributionMatrix(out)


# --- JSON-lines persistence -----------------------------------------------------

def load_token_seqs(path, vocab_size: int = None) -> list:
    """JSONL of {"ids": [...], "surfaces": [...]} objects.

    All sequences in a file share one vocabulary; when ``vocab_size``
    is not given it is inferred as max id + 1 over the whole file.
    """
    raw = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IoFailure(f"{path}:{lineno}: not JSON: {exc}") from exc
            if not isinstance(obj, dict) or "ids" not in obj or "surfaces" not in obj:
                raise IoFailure(f"{path}:{lineno}: expected ids and surfaces fields")
            raw.append((obj["ids"], obj["surfaces"]))
    if not raw:
        raise EmptySequence(f"{path} holds no token sequences")
    if vocab_size is None:
        highest = max((max(ids) for ids, _ in raw if ids), default=0)
        vocab_size = highest + 1
    return [TokenSeq(ids, surfaces, vocab_size) for ids, surfaces in raw]


def save_token_seqs(seqs: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(json.dumps({"ids": seq.ids, "surfaces": seq.surfaces}) + "\n")


def save_stats(stats: AlignStats, path) -> None:
    """JSONL, one {"p", "s", "c"} object per counted pair, sorted."""
    with open(path, "w", encoding="utf-8") as fh:
        for (p, s) in sorted(stats.counts):
            fh.write(json.dumps({"p": p, "s": s, "c": stats.counts[(p, s)]}) + "\n")


def load_stats(path, pivot_vocab_size: int = None,
               source_vocab_size: int = None) -> AlignStats:
    counts = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = (int(obj["p"]), int(obj["s"]))
                counts[key] = counts.get(key, 0) + int(obj["c"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IoFailure(f"{path}:{lineno}: bad stats line: {exc}") from exc
    if pivot_vocab_size is None:
        pivot_vocab_size = max((p for p, _ in counts), default=0) + 1
    if source_vocab_size is None:
        source_vocab_size = max((s for _, s in counts), default=0) + 1
    return AlignStats(pivot_vocab_size, source_vocab_size, counts)


def save_segments(segments: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seg in segments:
            fh.write(json.dumps(seg.to_json_obj()) + "\n")
