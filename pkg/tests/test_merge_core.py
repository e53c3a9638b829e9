import numpy as np
import pytest

from umm.errors import (
    GroupCountMismatch,
    IncompatibleCheckpoints,
    InvalidDensity,
    InvalidWeight,
    MissingLayerMetadata,
    RecipeMethodMismatch,
    RecipeModelMismatch,
)
from umm.merge_core import (
    GroupCoeffs,
    MergeRecipe,
    ModelCoeffs,
    SignVector,
    TaskVector,
    compute_task_vector,
    expand_schedule,
    linear_merge,
    load_recipe,
    merge,
    recipe_from_json_obj,
    task_arithmetic_merge,
    ties_disjoint_merge,
    ties_elect,
    ties_merge,
    ties_trim,
)
from umm.tensor_store import Checkpoint, Tensor

from conftest import random_ties_instance
from reference_impls import (
    ref_elect_by_magnitude,
    ref_ties_merge,
)


def ckpt(metadata=None, **arrays):
    return Checkpoint(
        tensors={k: Tensor(np.asarray(v, np.float32)) for k, v in arrays.items()},
        metadata=metadata or {},
    )


def layered_ckpt(num_layers, extra=("embed.w",), scale=1.0, rng=None):
    arrays = {}
    for i in range(num_layers):
        if rng is None:
            arrays[f"layers.{i}.w"] = np.full(4, float(i) * scale, np.float32)
        else:
            arrays[f"layers.{i}.w"] = rng.standard_normal(4).astype(np.float32) * scale
    for name in extra:
        arrays[name] = (
            np.zeros(3, np.float32) if rng is None
            else rng.standard_normal(3).astype(np.float32) * scale
        )
    meta = {"layer_pattern": "layers.{i}.", "num_layers": str(num_layers)}
    return ckpt(metadata=meta, **arrays)


def simple_recipe(method, group_size, n_groups, n_models=1, weight=1.0, density=1.0, lam=1.0):
    per_model = [
        ModelCoeffs(
            source_id=f"m{m}",
            groups=[GroupCoeffs(weight=weight, density=density) for _ in range(n_groups)],
        )
        for m in range(n_models)
    ]
    return MergeRecipe(method=method, group_size=group_size, lambda_scale=lam, per_model=per_model)


def tv(source_id, **arrays):
    return TaskVector(
        deltas={k: np.asarray(v, np.float32) for k, v in arrays.items()}, source_id=source_id
    )


# --- task vectors ---------------------------------------------------------

def test_task_vector_zero_when_equal():
    a = ckpt(x=[1.0, 2.0])
    vec = compute_task_vector(a, a, "m")
    assert np.array_equal(vec.deltas["x"], [0.0, 0.0])


def test_task_vector_from_zero_base():
    base = ckpt(x=[0.0, 0.0, 0.0])
    ft = ckpt(x=[1.5, -2.0, 3.0])
    vec = compute_task_vector(base, ft)
    assert np.array_equal(vec.deltas["x"], [1.5, -2.0, 3.0])


def test_task_vector_elementwise():
    base = ckpt(x=[1.0, 2.0, 3.0, 4.0])
    ft = ckpt(x=[2.0, 2.0, 2.0, 6.0])
    vec = compute_task_vector(base, ft)
    assert np.array_equal(vec.deltas["x"], [1.0, 0.0, -1.0, 2.0])


def test_task_vector_incompatible():
    with pytest.raises(IncompatibleCheckpoints):
        compute_task_vector(ckpt(x=[1.0]), ckpt(y=[1.0]))


# --- schedule expansion ------------------------------------------------------

def test_schedule_30_layers_group10_table_values():
    base = layered_ckpt(30)
    coder = ModelCoeffs(
        source_id="coder",
        groups=[
            GroupCoeffs(weight=0.45, density=0.90),
            GroupCoeffs(weight=0.083, density=0.73),
            GroupCoeffs(weight=0.52, density=1.0),
            GroupCoeffs(weight=0.50, density=1.0),
        ],
    )
    math_model = ModelCoeffs(
        source_id="math",
        groups=[
            GroupCoeffs(weight=0.58, density=1.0),
            GroupCoeffs(weight=0.78, density=1.0),
            GroupCoeffs(weight=0.78, density=1.0),
            GroupCoeffs(weight=0.70, density=1.0),
        ],
    )
    recipe = MergeRecipe(method="ties", group_size=10, lambda_scale=1.0,
                         per_model=[coder, math_model])
    sched = expand_schedule(recipe, base)
    assert sched.num_layer_groups == 3
    assert sched.group_index["layers.0.w"] == 0
    assert sched.group_index["layers.9.w"] == 0
    assert sched.group_index["layers.10.w"] == 1
    assert sched.group_index["layers.29.w"] == 2
    assert sched.group_index["embed.w"] == 3
    # layers 0-9 of the coder model: weight 0.45, density 0.90
    assert sched.coeffs("layers.3.w")[0] == (0.45, 0.90)
    assert sched.coeffs("layers.15.w")[0] == (0.083, 0.73)
    assert sched.coeffs("layers.22.w")[1] == (0.78, 1.0)
    table = sched.group_table()
    assert len(table) == 4
    assert table[0]["span"] == "layers 0-9"
    assert table[3]["span"] == "global"


def test_schedule_group5_has_seven_groups():
    base = layered_ckpt(30)
    recipe = simple_recipe("task_arithmetic", 5, 7)
    sched = expand_schedule(recipe, base)
    assert sched.num_layer_groups == 6
    assert sched.group_index["layers.29.w"] == 5
    assert sched.group_index["embed.w"] == 6


def test_schedule_degenerate_single_group():
    base = layered_ckpt(4)
    recipe = simple_recipe("task_arithmetic", 100, 2)
    sched = expand_schedule(recipe, base)
    assert sched.num_layer_groups == 1
    assert all(
        sched.group_index[f"layers.{i}.w"] == 0 for i in range(4)
    )
    assert sched.group_index["embed.w"] == 1


def test_schedule_missing_metadata():
    base = ckpt(x=[1.0])
    with pytest.raises(MissingLayerMetadata):
        expand_schedule(simple_recipe("ties", 2, 2), base)


def test_schedule_group_count_mismatch():
    base = layered_ckpt(30)
    with pytest.raises(GroupCountMismatch):
        expand_schedule(simple_recipe("ties", 10, 3), base)


def test_schedule_layer_index_out_of_range():
    base = layered_ckpt(2)
    base.tensors["layers.7.w"] = Tensor(np.zeros(2, np.float32))
    with pytest.raises(GroupCountMismatch):
        expand_schedule(simple_recipe("ties", 2, 2), base)


def test_schedule_bad_pattern():
    base = ckpt(
        metadata={"layer_pattern": "layers.", "num_layers": "2"},
        **{"layers.0.w": [1.0]},
    )
    with pytest.raises(MissingLayerMetadata):
        expand_schedule(simple_recipe("ties", 2, 2), base)


# --- task arithmetic ------------------------------------------------------------

def test_ta_zero_weights_is_base_bitwise():
    base = layered_ckpt(2)
    # include a negative zero to prove the zero-contribution fast path
    base.tensors["embed.w"] = Tensor(np.array([-0.0, 1.0, 2.0], np.float32))
    vec = compute_task_vector(base, layered_ckpt(2, scale=2.0), "m0")
    recipe = simple_recipe("task_arithmetic", 2, 2, weight=0.0)
    out = task_arithmetic_merge(base, [vec], recipe)
    for name in base.names():
        assert out.array(name).tobytes() == base.array(name).tobytes()


def test_ta_single_model_identity():
    rng = np.random.default_rng(5)
    base = layered_ckpt(3, rng=rng)
    ft = layered_ckpt(3, rng=rng, scale=1.5)
    vec = compute_task_vector(base, ft, "m0")
    recipe = simple_recipe("task_arithmetic", 3, 2, weight=1.0, lam=1.0)
    out = task_arithmetic_merge(base, [vec], recipe)
    for name in base.names():
        np.testing.assert_allclose(out.array(name), ft.array(name), rtol=1e-6, atol=1e-7)


def test_ta_hand_example():
    base = ckpt(metadata={"layer_pattern": "layers.{i}.", "num_layers": "1"}, x=[0.0, 0.0])
    v1 = tv("m0", x=[1.0, 2.0])
    v2 = tv("m1", x=[2.0, -2.0])
    recipe = MergeRecipe(
        method="task_arithmetic",
        group_size=1,
        lambda_scale=2.0,
        per_model=[
            ModelCoeffs("m0", [GroupCoeffs(0.5), GroupCoeffs(0.5)]),
            ModelCoeffs("m1", [GroupCoeffs(0.25), GroupCoeffs(0.25)]),
        ],
    )
    out = task_arithmetic_merge(base, [v1, v2], recipe)
    np.testing.assert_allclose(out.array("x"), [2.0, 1.0], rtol=1e-6)


def test_ta_method_mismatch():
    base = layered_ckpt(2)
    vec = compute_task_vector(base, base, "m0")
    with pytest.raises(RecipeMethodMismatch):
        task_arithmetic_merge(base, [vec], simple_recipe("ties", 2, 2))


def test_ta_lambda_linearity(rng):
    base = layered_ckpt(4, rng=rng)
    ft = layered_ckpt(4, rng=rng)
    vec = compute_task_vector(base, ft, "m0")
    r1 = simple_recipe("task_arithmetic", 2, 3, weight=0.7, lam=0.4)
    r2 = simple_recipe("task_arithmetic", 2, 3, weight=0.7, lam=1.2)
    out1 = task_arithmetic_merge(base, [vec], r1)
    out2 = task_arithmetic_merge(base, [vec], r2)
    for name in base.names():
        d1 = out1.array(name) - base.array(name)
        d2 = out2.array(name) - base.array(name)
        np.testing.assert_allclose(3.0 * d1, d2, rtol=1e-5, atol=1e-6)


def test_ta_vector_list_order_irrelevant(rng):
    inst = random_ties_instance(rng, n_models=3)
    recipe = inst["recipe"]
    recipe.method = "task_arithmetic"
    out1 = task_arithmetic_merge(inst["base"], inst["vectors"], recipe)
    out2 = task_arithmetic_merge(inst["base"], inst["vectors"][::-1], recipe)
    for name in out1.names():
        assert out1.array(name).tobytes() == out2.array(name).tobytes()


def test_ta_unknown_source_id():
    base = layered_ckpt(2)
    vec = compute_task_vector(base, base, "stranger")
    with pytest.raises(RecipeModelMismatch):
        task_arithmetic_merge(base, [vec], simple_recipe("task_arithmetic", 2, 2))


# --- TIES steps -------------------------------------------------------------------

def test_trim_density_one_unchanged():
    v = tv("m", x=[3.0, -1.0, 0.5, -4.0])
    out = ties_trim(v, 1.0)
    assert np.array_equal(out.deltas["x"], v.deltas["x"])


def test_trim_half():
    v = tv("m", x=[3.0, -1.0, 0.5, -4.0])
    out = ties_trim(v, 0.5)
    assert np.array_equal(out.deltas["x"], [3.0, 0.0, 0.0, -4.0])


def test_trim_tie_break_low_index():
    v = tv("m", x=[1.0, -1.0, 1.0, -1.0])
    out = ties_trim(v, 0.5)
    assert np.array_equal(out.deltas["x"], [1.0, -1.0, 0.0, 0.0])


def test_trim_idempotent(rng):
    v = tv("m", x=rng.standard_normal(37).astype(np.float32))
    once = ties_trim(v, 0.4)
    twice = ties_trim(once, 0.4)
    assert np.array_equal(once.deltas["x"], twice.deltas["x"])


def test_trim_rejects_bad_density():
    v = tv("m", x=[1.0])
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(InvalidDensity):
            ties_trim(v, bad)


def test_trim_matrix_flat_index_order():
    v = tv("m", x=[[2.0, 2.0], [2.0, 2.0]])
    out = ties_trim(v, 0.5)
    assert np.array_equal(out.deltas["x"], [[2.0, 2.0], [0.0, 0.0]])


def test_elect_example():
    v1 = tv("a", x=[2.0, 3.0])
    v2 = tv("b", x=[-3.0, 1.0])
    signs = ties_elect([v1, v2])
    assert np.array_equal(signs.signs["x"], [-1.0, 1.0])


def test_elect_single_vector():
    v = tv("a", x=[2.0, -5.0, 0.0])
    signs = ties_elect([v])
    assert np.array_equal(signs.signs["x"], [1.0, -1.0, 0.0])


def test_elect_exact_cancellation():
    signs = ties_elect([tv("a", x=[1.0]), tv("b", x=[-1.0])])
    assert np.array_equal(signs.signs["x"], [0.0])


def test_elect_matches_magnitude_oracle(rng):
    for _ in range(200):
        n_models = int(rng.integers(1, 5))
        shape = (int(rng.integers(1, 9)),)
        vecs = [
            tv(f"m{m}", x=rng.integers(-3, 4, size=shape).astype(np.float32))
            for m in range(n_models)
        ]
        got = ties_elect(vecs).signs["x"]
        want = ref_elect_by_magnitude([v.deltas["x"] for v in vecs])
        assert np.array_equal(got, want)


def test_disjoint_merge_example():
    v1 = tv("a", x=[2.0, 3.0])
    v2 = tv("b", x=[-3.0, 1.0])
    signs = SignVector(signs={"x": np.array([-1.0, 1.0], np.float32)})
    out = ties_disjoint_merge([v1, v2], signs, [1.0, 1.0])
    np.testing.assert_allclose(out.deltas["x"], [-3.0, 2.0])


def test_disjoint_merge_identical_vectors(rng):
    arr = rng.standard_normal(9).astype(np.float32)
    v1, v2 = tv("a", x=arr.copy()), tv("b", x=arr.copy())
    signs = ties_elect([v1, v2])
    out = ties_disjoint_merge([v1, v2], signs, [0.5, 0.5])
    np.testing.assert_allclose(out.deltas["x"], arr, rtol=1e-6)


def test_disjoint_merge_normalized_weights():
    v1 = tv("a", x=[4.0])
    v2 = tv("b", x=[2.0])
    signs = SignVector(signs={"x": np.array([1.0], np.float32)})
    out = ties_disjoint_merge([v1, v2], signs, [0.45, 0.52])
    np.testing.assert_allclose(out.deltas["x"], [(0.45 * 4 + 0.52 * 2) / 0.97], rtol=1e-5)
    assert abs(float(out.deltas["x"][0]) - 2.9278) < 1e-3


def test_disjoint_merge_zero_weight_sum_gives_zero():
    v1 = tv("a", x=[4.0])
    signs = SignVector(signs={"x": np.array([1.0], np.float32)})
    out = ties_disjoint_merge([v1], signs, [0.0])
    assert np.array_equal(out.deltas["x"], [0.0])


def test_disjoint_merge_convexity(rng):
    for _ in range(50):
        n_models = int(rng.integers(2, 5))
        vecs = [
            tv(f"m{m}", x=rng.standard_normal(8).astype(np.float32)) for m in range(n_models)
        ]
        weights = [float(rng.uniform(0.01, 1.0)) for _ in range(n_models)]
        signs = ties_elect(vecs)
        out = ties_disjoint_merge(vecs, signs, weights)
        stacked = np.stack([v.deltas["x"] for v in vecs])
        bound = np.abs(stacked).max(axis=0)
        assert np.all(np.abs(out.deltas["x"]) <= bound + 1e-6)


# --- full TIES merge ------------------------------------------------------------------

def test_ties_single_model_identity(rng):
    base = layered_ckpt(3, rng=rng)
    ft = layered_ckpt(3, rng=rng, scale=2.0)
    vec = compute_task_vector(base, ft, "m0")
    recipe = simple_recipe("ties", 3, 2, weight=1.0, density=1.0, lam=1.0)
    out = ties_merge(base, [vec], recipe)
    for name in base.names():
        np.testing.assert_allclose(out.array(name), ft.array(name), rtol=1e-6, atol=1e-7)


def test_ties_identical_vectors_full_density(rng):
    base = layered_ckpt(2, rng=rng)
    delta = {n: rng.standard_normal(base.array(n).shape).astype(np.float32) for n in base.names()}
    v1 = TaskVector(deltas={n: d.copy() for n, d in delta.items()}, source_id="m0")
    v2 = TaskVector(deltas={n: d.copy() for n, d in delta.items()}, source_id="m1")
    lam = 0.5
    recipe = simple_recipe("ties", 2, 2, n_models=2, weight=0.5, density=1.0, lam=lam)
    out = ties_merge(base, [v1, v2], recipe)
    for name in base.names():
        expected = base.array(name) + np.float32(lam) * delta[name]
        assert out.array(name).tobytes() == expected.tobytes()


def test_ties_method_mismatch():
    base = layered_ckpt(2)
    vec = compute_task_vector(base, base, "m0")
    with pytest.raises(RecipeMethodMismatch):
        ties_merge(base, [vec], simple_recipe("task_arithmetic", 2, 2))


def test_ties_matches_reference_300(rng):
    for _ in range(300):
        inst = random_ties_instance(rng)
        out = ties_merge(inst["base"], inst["vectors"], inst["recipe"])
        want = ref_ties_merge(
            inst["base_arrays"],
            inst["vector_arrays"],
            inst["densities"],
            inst["weights"],
            inst["lambda"],
        )
        for name in inst["base"].names():
            assert out.array(name).tobytes() == want[name].tobytes(), name


def test_ties_model_order_invariance(rng):
    inst = random_ties_instance(rng, n_models=3)
    out1 = ties_merge(inst["base"], inst["vectors"], inst["recipe"])
    out2 = ties_merge(inst["base"], inst["vectors"][::-1], inst["recipe"])
    for name in out1.names():
        assert out1.array(name).tobytes() == out2.array(name).tobytes()


# --- linear -------------------------------------------------------------------------------

def test_linear_equal_weights_is_average():
    base = ckpt(metadata={"layer_pattern": "layers.{i}.", "num_layers": "1"}, x=[0.0, 10.0])
    v1 = tv("m0", x=[2.0, -2.0])
    v2 = tv("m1", x=[4.0, 2.0])
    recipe = simple_recipe("linear", 1, 2, n_models=2, weight=0.5)
    out = linear_merge(base, [v1, v2], recipe)
    np.testing.assert_allclose(out.array("x"), [3.0, 10.0])


def test_linear_zero_weights_pass_base():
    base = ckpt(metadata={"layer_pattern": "layers.{i}.", "num_layers": "1"}, x=[7.0])
    v1 = tv("m0", x=[5.0])
    recipe = simple_recipe("linear", 1, 2, weight=0.0)
    out = linear_merge(base, [v1], recipe)
    assert np.array_equal(out.array("x"), [7.0])


def test_merge_dispatch(rng):
    inst = random_ties_instance(rng, n_models=2)
    out1 = merge(inst["base"], inst["vectors"], inst["recipe"])
    out2 = ties_merge(inst["base"], inst["vectors"], inst["recipe"])
    for name in out1.names():
        assert out1.array(name).tobytes() == out2.array(name).tobytes()


# --- recipe serialization ---------------------------------------------------------------------

def test_recipe_json_round_trip(tmp_path):
    recipe = MergeRecipe(
        method="ties",
        group_size=10,
        lambda_scale=1.0,
        per_model=[
            ModelCoeffs("coder", [GroupCoeffs(0.45, 0.9), GroupCoeffs(0.5, 1.0)], path="/a"),
            ModelCoeffs("math", [GroupCoeffs(0.58, 1.0), GroupCoeffs(0.7, 1.0)], path="/b"),
        ],
    )
    path = tmp_path / "r.json"
    path.write_text(recipe.dumps())
    loaded = load_recipe(path)
    assert loaded == recipe


def test_recipe_rejects_bad_weight():
    with pytest.raises(InvalidWeight):
        recipe_from_json_obj(
            {
                "method": "ties",
                "group_size": 1,
                "models": [{"source_id": "a", "groups": [{"weight": 1.5, "density": 1.0}]}],
            }
        )


def test_recipe_rejects_bad_density():
    with pytest.raises(InvalidDensity):
        recipe_from_json_obj(
            {
                "method": "ties",
                "group_size": 1,
                "models": [{"source_id": "a", "groups": [{"weight": 0.5, "density": 0.0}]}],
            }
        )


def test_recipe_rejects_unknown_method():
    with pytest.raises(RecipeMethodMismatch):
        recipe_from_json_obj(
            {
                "method": "slerp",
                "group_size": 1,
                "models": [{"source_id": "a", "groups": [{"weight": 0.5}]}],
            }
        )


def test_recipe_rejects_uneven_groups():
    with pytest.raises(GroupCountMismatch):
        recipe_from_json_obj(
            {
                "method": "ties",
                "group_size": 1,
                "models": [
                    {"source_id": "a", "groups": [{"weight": 0.5}]},
                    {"source_id": "b", "groups": [{"weight": 0.5}, {"weight": 0.5}]},
                ],
            }
        )


def test_recipe_rejects_duplicate_ids():
    with pytest.raises(RecipeModelMismatch):
        recipe_from_json_obj(
            {
                "method": "ties",
                "group_size": 1,
                "models": [
                    {"source_id": "a", "groups": [{"weight": 0.5}]},
                    {"source_id": "a", "groups": [{"weight": 0.5}]},
                ],
            }
        )
