import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interlock.config import (
    RunConfig,
    StrategyConfig,
    apply_overrides,
    derive_seed,
    load_config,
    parse_config,
    parse_lines,
    serialize_config,
    strategy_from_label,
    strategy_label,
)
from interlock.errors import ConfigurationError


def test_default_config_round_trips():
    cfg = RunConfig()
    assert parse_config(serialize_config(cfg)) == cfg


overrides = st.fixed_dictionaries(
    {},
    optional={
        "model.preset": st.sampled_from(["toy_conv", "mlp", "resnet_lite"]),
        "model.depth": st.integers(1, 10).map(str),
        "model.widths": st.lists(st.integers(1, 128), min_size=1, max_size=5).map(lambda v: ",".join(map(str, v))),
        "model.aux_head": st.sampled_from(["linear", "conv"]),
        "strategy.kind": st.sampled_from(["n_wise", "grouped_local", "end_to_end", "hogwild"]),
        "strategy.n": st.integers(1, 6).map(str),
        "strategy.mix_local": st.sampled_from(["true", "false"]),
        "optim.kind": st.sampled_from(["sgd", "adam"]),
        "optim.weight_decay": st.floats(0, 1e-2).map(repr),
        "schedule.kind": st.sampled_from(["constant", "step_decay", "inv_sqrt_warmup"]),
        "schedule.lr": st.floats(1e-6, 1.0).map(repr),
        "schedule.milestones": st.lists(st.integers(1, 300), max_size=3).map(lambda v: ",".join(map(str, sorted(v)))),
        "data.kind": st.sampled_from(["images", "blobs", "spirals"]),
        "data.seed": st.one_of(st.just("none"), st.integers(0, 2**31).map(str)),
        "data.noise": st.one_of(st.just("none"), st.floats(0, 2).map(repr)),
        "data.test_fraction": st.one_of(st.just("none"), st.floats(0.05, 0.5).map(repr)),
        "data.flip": st.sampled_from(["true", "false"]),
        "budget.steps": st.integers(1, 10**6).map(str),
        "train.batch_size": st.integers(1, 512).map(str),
        "train.mode": st.sampled_from(["reference", "pipelined"]),
        "train.phase_delay": st.floats(0, 1).map(repr),
        "seeds": st.lists(st.integers(0, 99), min_size=1, max_size=4).map(lambda v: ",".join(map(str, v))),
        "name": st.text("abcxyz_-0123", min_size=1, max_size=12),
    },
)


@settings(max_examples=150, deadline=None)
@given(pairs=overrides)
def test_round_trip_is_lossless(pairs):
    try:
        cfg = apply_overrides(RunConfig(), pairs).validate()
    except ConfigurationError:
        return
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_parse_lines_skips_comments_and_blanks():
    text = "# header\n\nmodel.depth = 4  # trailing\n  name=abc \n"
    assert parse_lines(text) == {"model.depth": "4", "name": "abc"}


def test_malformed_line_names_its_number():
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_lines("name = a\njust words\n")


@pytest.mark.parametrize(
    "pairs, field",
    [
        ({"strategy.kind": "sideways"}, "strategy"),
        ({"model.depth": "many"}, "model.depth"),
        ({"model.colour": "red"}, "model.colour"),
        ({"widget.size": "1"}, "widget.size"),
        ({"seeds": ""}, "seeds"),
        ({"data.kind": "audio"}, "data.kind"),
        ({"data.kind": "idx"}, "data.path"),
        ({"train.mode": "async"}, "train.mode"),
        ({"optim.kind": "lamb"}, "optim.kind"),
    ],
)
def test_invalid_values_name_the_field(pairs, field):
    with pytest.raises(ConfigurationError, match=field.replace(".", r"\.")):
        apply_overrides(RunConfig(), pairs).validate()


def test_setting_one_budget_replaces_the_other():
    cfg = apply_overrides(RunConfig(), {"budget.epochs": "3"}).validate()
    assert cfg.budget.steps is None and cfg.budget.epochs == 3


def test_two_budgets_are_rejected():
    with pytest.raises(ConfigurationError, match="budget"):
        apply_overrides(RunConfig(), {"budget.epochs": "3", "budget.steps": "10"}).validate()


def test_seed_ranges():
    assert apply_overrides(RunConfig(), {"seeds": "2..5"}).seeds == (2, 3, 4, 5)
    assert apply_overrides(RunConfig(), {"seeds": "7, 1"}).seeds == (7, 1)


def test_load_config_applies_overrides_after_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("model.preset = mlp\nbudget.steps = 5\n")
    cfg = load_config(path, {"budget.steps": "9"})
    assert cfg.model.preset == "mlp"
    assert cfg.budget.steps == 9


def test_missing_config_file_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


def test_derived_seeds_are_stable_and_role_specific():
    assert derive_seed(0, "data") == derive_seed(0, "data")
    assert len({derive_seed(0, r) for r in ("data", "init", "batches")}) == 3
    assert derive_seed(0, "data") != derive_seed(1, "data")
    # frozen so that stored runs stay reproducible across releases
    assert derive_seed(0, "init") == int.from_bytes(__import__("hashlib").sha256(b"0/init").digest()[:8], "little") >> 1


@pytest.mark.parametrize(
    "label, strat",
    [
        ("1-wise", StrategyConfig("n_wise", 1)),
        ("3-wise+mix", StrategyConfig("n_wise", 3, True)),
        ("grouped-2", StrategyConfig("grouped_local", 2)),
        ("end_to_end", StrategyConfig("end_to_end", 1)),
        ("hogwild", StrategyConfig("hogwild", 1)),
    ],
)
def test_strategy_labels_round_trip(label, strat):
    assert strategy_from_label(label) == strat
    assert strategy_label(strat) == label


@pytest.mark.parametrize("label", ["x-wise", "grouped-", "hogwild+mix", "sideways"])
def test_bad_strategy_labels(label):
    with pytest.raises(ConfigurationError, match="strategy"):
        strategy_from_label(label)
