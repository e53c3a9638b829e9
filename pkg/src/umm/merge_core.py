"""Parameter-level checkpoint merging.

Three methods operate on a base checkpoint plus task vectors (the
elementwise deltas of fine-tuned checkpoints against that base):

* task_arithmetic: base + lambda * sum of weighted deltas
* ties: trim low-magnitude delta entries, elect a per-parameter
  consensus sign, average the sign-agreeing survivors with normalized
  weights, then add the result to the base scaled by lambda
* linear: normalized weighted average of the fine-tuned checkpoints

Coefficients are organized in layer groups: tensors whose names match
the checkpoint's layer-name template with index i share the group
floor(i / group_size); everything else (embeddings, norms, heads) uses
one trailing global group.

Determinism contract: tensors are visited in lexicographic name order,
model contributions are accumulated in recipe order, and all arithmetic
is float32 elementwise, so identical inputs produce identical bits.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from umm.errors import (
    GroupCountMismatch,
    IncompatibleCheckpoints,
    InvalidDensity,
    InvalidWeight,
    MissingLayerMetadata,
    RecipeMethodMismatch,
    RecipeModelMismatch,
)
from umm.tensor_store import Checkpoint, Tensor, require_compat

METHODS = ("linear", "task_arithmetic", "ties")


@dataclass
class TaskVector:
    """Per-tensor float32 deltas of one fine-tuned model against a base."""

    deltas: dict  # tensor name -> np.ndarray (f32)
    source_id: str = ""

    def names(self) -> list:
        return sorted(self.deltas)


@dataclass
class SignVector:
    """Per-tensor consensus signs, values in {-1.0, 0.0, +1.0}."""

    signs: dict  # tensor name -> np.ndarray (f32)


@dataclass
class GroupCoeffs:
    weight: float
    density: float = 1.0

    def validate(self) -> None:
        if not (isinstance(self.weight, (int, float)) and math.isfinite(self.weight)
                and 0.0 <= self.weight <= 1.0):
            raise InvalidWeight(f"weight {self.weight!r} not in [0, 1]")
        if not (isinstance(self.density, (int, float)) and math.isfinite(self.density)
                and 0.0 < self.density <= 1.0):
            raise InvalidDensity(f"density {self.density!r} not in (0, 1]")


@dataclass
class ModelCoeffs:
    source_id: str
    groups: list  # list of GroupCoeffs
    path: str = ""


@dataclass
class MergeRecipe:
    method: str
    group_size: int
    lambda_scale: float = 1.0
    per_model: list = field(default_factory=list)  # list of ModelCoeffs

    def validate(self) -> None:
        if self.method not in METHODS:
            raise RecipeMethodMismatch(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not isinstance(self.group_size, int) or self.group_size < 1:
            raise ValueError(f"group_size must be a positive integer, got {self.group_size!r}")
        if not (math.isfinite(self.lambda_scale) and self.lambda_scale >= 0.0):
            raise ValueError(f"lambda_scale must be finite and >= 0, got {self.lambda_scale!r}")
        if not self.per_model:
            raise ValueError("recipe lists no models")
        counts = {len(m.groups) for m in self.per_model}
        if len(counts) != 1:
            raise GroupCountMismatch(f"models disagree on group count: {sorted(counts)}")
        ids = [m.source_id for m in self.per_model]
        if len(set(ids)) != len(ids):
            raise RecipeModelMismatch(f"duplicate source_id in recipe: {ids}")
        for model in self.per_model:
            for g in model.groups:
                g.validate()

    @property
    def num_groups(self) -> int:
        return len(self.per_model[0].groups) if self.per_model else 0

    def to_json_obj(self) -> dict:
        return {
            "method": self.method,
            "group_size": self.group_size,
            "lambda_scale": self.lambda_scale,
            "models": [
                {
                    "source_id": m.source_id,
                    "path": m.path,
                    "groups": [{"weight": g.weight, "density": g.density} for g in m.groups],
                }
                for m in self.per_model
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2, sort_keys=True)


def recipe_from_json_obj(obj: dict) -> MergeRecipe:
    if not isinstance(obj, dict):
        raise ValueError("recipe must be a JSON object")
    try:
        models = [
            ModelCoeffs(
                source_id=str(m["source_id"]),
                path=str(m.get("path", "")),
                groups=[
                    GroupCoeffs(weight=float(g["weight"]), density=float(g.get("density", 1.0)))
                    for g in m["groups"]
                ],
            )
            for m in obj["models"]
        ]
        recipe = MergeRecipe(
            method=str(obj["method"]),
            group_size=int(obj["group_size"]),
            lambda_scale=float(obj.get("lambda_scale", 1.0)),
            per_model=models,
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"recipe JSON missing or malformed field: {exc}") from exc
    recipe.validate()
    return recipe


def load_recipe(path) -> MergeRecipe:
    with open(path, "r", encoding="utf-8") as fh:
        return recipe_from_json_obj(json.load(fh))


# --- layer-group schedule ----------------------------------------------------

@dataclass
class Schedule:
    """Resolved per-tensor coefficient assignment for one checkpoint."""

    group_index: dict  # tensor name -> group index
    num_layer_groups: int
    group_size: int
    num_layers: int
    recipe: MergeRecipe

    def coeffs(self, name: str) -> list:
        """(weight, density) per model, in recipe order."""
        g = self.group_index[name]
        return [(m.groups[g].weight, m.groups[g].density) for m in self.recipe.per_model]

    def group_table(self) -> list:
        rows = []
        for g in range(self.num_layer_groups + 1):
            if g < self.num_layer_groups:
                lo = g * self.group_size
                hi = min(self.num_layers, lo + self.group_size) - 1
                span = f"layers {lo}-{hi}"
            else:
                span = "global"
            rows.append(
                {
                    "group": g,
                    "span": span,
                    "models": {
                        m.source_id: {"weight": m.groups[g].weight, "density": m.groups[g].density}
                        for m in self.recipe.per_model
                    },
                }
            )
        return rows


def _layer_regex(pattern: str):
    parts = pattern.split("{i}")
    if len(parts) != 2:
        raise MissingLayerMetadata(
            f"layer_pattern must contain exactly one '{{i}}' placeholder, got {pattern!r}"
        )
    return re.compile(r"(\d+)".join(re.escape(p) for p in parts))


def expand_schedule(recipe: MergeRecipe, ckpt: Checkpoint) -> Schedule:
    """Assign every tensor of ``ckpt`` a coefficient group.

    Tensor names matching the metadata layer template with index i get
    group floor(i / group_size); all others share the final global group.
    """
    recipe.validate()
    meta = ckpt.metadata
    if "layer_pattern" not in meta or "num_layers" not in meta:
        raise MissingLayerMetadata("checkpoint metadata needs layer_pattern and num_layers")
    try:
        num_layers = int(meta["num_layers"])
    except ValueError as exc:
        raise MissingLayerMetadata(f"num_layers is not an integer: {meta['num_layers']!r}") from exc
    if num_layers < 1:
        raise MissingLayerMetadata(f"num_layers must be positive, got {num_layers}")
    regex = _layer_regex(meta["layer_pattern"])

    num_layer_groups = math.ceil(num_layers / recipe.group_size)
    expected = num_layer_groups + 1
    if recipe.num_groups != expected:
        raise GroupCountMismatch(
            f"recipe has {recipe.num_groups} groups but {num_layers} layers at "
            f"group_size {recipe.group_size} need {expected} (including the global group)"
        )

    group_index = {}
    for name in ckpt.names():
        match = regex.search(name)
        if match:
            layer = int(match.group(1))
            if layer >= num_layers:
                raise GroupCountMismatch(
                    f"tensor {name!r} has layer index {layer} >= num_layers {num_layers}"
                )
            group_index[name] = layer // recipe.group_size
        else:
            group_index[name] = num_layer_groups
    return Schedule(group_index, num_layer_groups, recipe.group_size, num_layers, recipe)


# --- task vectors -------------------------------------------------------------

def compute_task_vector(base: Checkpoint, finetuned: Checkpoint, source_id: str = "") -> TaskVector:
    """Elementwise float32 difference finetuned - base."""
    require_compat(base, finetuned, "base vs finetuned")
    deltas = {name: finetuned.array(name) - base.array(name) for name in base.names()}
    return TaskVector(deltas=deltas, source_id=source_id)


def _require_vector_compat(base: Checkpoint, vectors: list) -> None:
    base_shapes = {name: t.shape for name, t in base.items()}
    for vec in vectors:
        shapes = {name: arr.shape for name, arr in vec.deltas.items()}
        if shapes != base_shapes:
            raise IncompatibleCheckpoints(
                f"task vector {vec.source_id!r} does not match the base tensor layout"
            )


def _ordered_vectors(recipe: MergeRecipe, vectors: list) -> list:
    """Vectors reordered to recipe model order, matched by source_id."""
    by_id = {}
    for vec in vectors:
        if vec.source_id in by_id:
            raise RecipeModelMismatch(f"duplicate task vector source_id {vec.source_id!r}")
        by_id[vec.source_id] = vec
    recipe_ids = [m.source_id for m in recipe.per_model]
    if sorted(by_id) != sorted(recipe_ids):
        raise RecipeModelMismatch(
            f"recipe models {recipe_ids} do not match task vectors {sorted(by_id)}"
        )
    return [by_id[sid] for sid in recipe_ids]


# --- TIES steps ----------------------------------------------------------------

def _trim_count(density: float, n: int) -> int:
    # ceil(density * n); the 1e-9 slack absorbs binary representation
    # error in products like 0.1 * 30 that are mathematically integral
    return max(1, math.ceil(density * n - 1e-9))


def _trim_array(arr: np.ndarray, density: float) -> np.ndarray:
    if not (isinstance(density, (int, float)) and math.isfinite(density) and 0.0 < density <= 1.0):
        raise InvalidDensity(f"density {density!r} not in (0, 1]")
    flat = arr.ravel()
    k = _trim_count(float(density), flat.size)
    # stable argsort on -|v|: magnitude descending, ties keep lower index
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return np.where(mask, flat, np.float32(0.0)).reshape(arr.shape)


def ties_trim(tv: TaskVector, density) -> TaskVector:
    """Zero all but the ceil(density*n) largest-magnitude entries per tensor.

    ``density`` is a scalar applied to every tensor or a map from tensor
    name to its group's density.
    """
    if isinstance(density, dict):
        deltas = {name: _trim_array(arr, density[name]) for name, arr in sorted(tv.deltas.items())}
    else:
        deltas = {name: _trim_array(arr, density) for name, arr in sorted(tv.deltas.items())}
    return TaskVector(deltas=deltas, source_id=tv.source_id)


def ties_elect(trimmed: list) -> SignVector:
    """Per-parameter sign of the model-order sum of trimmed deltas."""
    if not trimmed:
        raise IncompatibleCheckpoints("cannot elect signs from zero task vectors")
    names = trimmed[0].names()
    for vec in trimmed[1:]:
        if vec.names() != names or any(
            vec.deltas[n].shape != trimmed[0].deltas[n].shape for n in names
        ):
            raise IncompatibleCheckpoints("trimmed task vectors disagree on tensor layout")
    signs = {}
    for name in names:
        acc = np.zeros_like(trimmed[0].deltas[name])
        for vec in trimmed:
            acc = acc + vec.deltas[name]
        # + 0.0 normalizes any -0.0 produced by np.sign
        signs[name] = np.sign(acc) + np.float32(0.0)
    return SignVector(signs=signs)


def ties_disjoint_merge(trimmed: list, signs: SignVector, weights) -> TaskVector:
    """Weight-normalized average over models agreeing with the elected sign.

    ``weights`` is one float per model (recipe order) or a map from
    tensor name to such a list.  Coordinates whose elected sign is zero,
    or where no model agrees, or where agreeing weights sum to zero,
    come out exactly 0.
    """
    if not trimmed:
        raise IncompatibleCheckpoints("cannot merge zero task vectors")
    names = trimmed[0].names()
    if sorted(signs.signs) != names:
        raise IncompatibleCheckpoints("sign vector does not match task vector layout")
    out = {}
    for name in names:
        gamma = signs.signs[name]
        if gamma.shape != trimmed[0].deltas[name].shape:
            raise IncompatibleCheckpoints(f"sign tensor {name!r} shape mismatch")
        per_model = weights[name] if isinstance(weights, dict) else weights
        if len(per_model) != len(trimmed):
            raise RecipeModelMismatch(
                f"{len(per_model)} weights for {len(trimmed)} task vectors"
            )
        num = np.zeros_like(gamma)
        den = np.zeros_like(gamma)
        for vec, weight in zip(trimmed, per_model):
            v = vec.deltas[name]
            w32 = np.float32(weight)
            agree = (np.sign(v) == gamma) & (v != 0) & (gamma != 0)
            num = num + np.where(agree, w32 * v, np.float32(0.0))
            den = den + np.where(agree, w32, np.float32(0.0))
        merged = np.zeros_like(gamma)
        valid = (gamma != 0) & (den > 0)
        np.divide(num, den, out=merged, where=valid)
        out[name] = merged
    return TaskVector(deltas=out, source_id="ties")


# --- merge methods ---------------------------------------------------------------

def _add_scaled(base: Checkpoint, deltas: dict, lam: float) -> Checkpoint:
    """base + lam * deltas per tensor; exact-zero contributions keep base bits."""
    lam32 = np.float32(lam)
    tensors = {}
    for name, tensor in base.items():
        scaled = lam32 * deltas[name]
        if not scaled.any():
            # avoids flipping -0.0 in the base to +0.0
            tensors[name] = Tensor(tensor.data.copy(), dtype="f32")
        else:
            tensors[name] = Tensor(tensor.data + scaled, dtype="f32")
    return Checkpoint(tensors=tensors, metadata=dict(base.metadata))


def task_arithmetic_merge(base: Checkpoint, vectors: list, recipe: MergeRecipe) -> Checkpoint:
    """base + lambda * sum over models of weight(group) * delta."""
    if recipe.method != "task_arithmetic":
        raise RecipeMethodMismatch(f"recipe method is {recipe.method!r}, expected task_arithmetic")
    schedule = expand_schedule(recipe, base)
    ordered = _ordered_vectors(recipe, vectors)
    _require_vector_compat(base, ordered)
    combined = {}
    for name, tensor in base.items():
        acc = np.zeros_like(tensor.data)
        for vec, (weight, _) in zip(ordered, schedule.coeffs(name)):
            acc = acc + np.float32(weight) * vec.deltas[name]
        combined[name] = acc
    return _add_scaled(base, combined, recipe.lambda_scale)


def ties_merge(base: Checkpoint, vectors: list, recipe: MergeRecipe) -> Checkpoint:
    """Trim, elect signs, disjoint-merge, then add to base scaled by lambda."""
    if recipe.method != "ties":
        raise RecipeMethodMismatch(f"recipe method is {recipe.method!r}, expected ties")
    schedule = expand_schedule(recipe, base)
    ordered = _ordered_vectors(recipe, vectors)
    _require_vector_compat(base, ordered)

    names = base.names()
    density_maps = []
    weight_map = {}
    for m, _vec in enumerate(ordered):
        density_maps.append({name: schedule.coeffs(name)[m][1] for name in names})
    for name in names:
        weight_map[name] = [w for w, _ in schedule.coeffs(name)]

    trimmed = [ties_trim(vec, density_maps[m]) for m, vec in enumerate(ordered)]
    signs = ties_elect(trimmed)
    merged = ties_disjoint_merge(trimmed, signs, weight_map)
    return _add_scaled(base, merged.deltas, recipe.lambda_scale)


def linear_merge(base: Checkpoint, vectors: list, recipe: MergeRecipe) -> Checkpoint:
    """Normalized weighted average of the fine-tuned checkpoints.

    Equivalent to base + (sum of w*delta) / (sum of w) per tensor; where
    a tensor's weights all sum to zero the base values pass through.
    Densities and lambda_scale are ignored.
    """
    if recipe.method != "linear":
        raise RecipeMethodMismatch(f"recipe method is {recipe.method!r}, expected linear")
    schedule = expand_schedule(recipe, base)
    ordered = _ordered_vectors(recipe, vectors)
    _require_vector_compat(base, ordered)
    tensors = {}
    for name, tensor in base.items():
        weights = [w for w, _ in schedule.coeffs(name)]
        total = np.float32(0.0)
        for w in weights:
            total = total + np.float32(w)
        if total == 0:
            tensors[name] = Tensor(tensor.data.copy(), dtype="f32")
            continue
        acc = np.zeros_like(tensor.data)
        for vec, w in zip(ordered, weights):
            acc = acc + np.float32(w) * vec.deltas[name]
        tensors[name] = Tensor(tensor.data + acc / total, dtype="f32")
    return Checkpoint(tensors=tensors, metadata=dict(base.metadata))


def merge(base: Checkpoint, vectors: list, recipe: MergeRecipe) -> Checkpoint:
    """Dispatch on recipe.method."""
    recipe.validate()
    if recipe.method == "task_arithmetic":
        return task_arithmetic_merge(base, vectors, recipe)
    if recipe.method == "ties":
        return ties_merge(base, vectors, recipe)
    return linear_merge(base, vectors, recipe)
