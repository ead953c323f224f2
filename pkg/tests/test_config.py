import pytest

from softq_lab.config import OUTPUT_ENV, ConfigError, RunConfig, parse_config, parse_overrides
from softq_lab.pipeline import default_reward, default_sac


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg == RunConfig()
    assert cfg.mbrl_sac == default_sac("MBRL") and cfg.pt_reward == default_reward("PT")
    assert cfg.plant.var_v == 0.002 and cfg.dataset.n_sequences == 250


def test_flag_beats_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[mbrl.sac]\nbatch_size = 128\n[run]\nseed = 4\n")
    cfg = parse_config(path, ["mbrl.sac.batch_size=64"])
    assert cfg.mbrl_sac.batch_size == 64 and cfg.seed == 4


def test_constraint_error_names_key():
    with pytest.raises(ConfigError, match="buffer_capacity"):
        parse_config(overrides=["mbrl.sac.buffer_capacity=0"])


@pytest.mark.parametrize("item, fragment", [
    ("mbrl.sac.foo=1", "mbrl.sac.foo"),
    ("plant.T_s=abc", "plant.T_s"),
    ("nosuch.key=1", "nosuch"),
    ("pipeline.noise=maybe", "pipeline.noise"),
])
def test_bad_values_name_the_key(item, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        parse_config(overrides=[item])


def test_override_syntax():
    assert parse_overrides(["pt.reward.eps4=5"]) == [("pt.reward", "eps4", "5")]
    for bad in ("novalue", "nosection=1"):
        with pytest.raises(ConfigError):
            parse_overrides([bad])


def test_overrides_apply_together():
    # capacity below the default batch is fine once the batch comes down as well
    cfg = parse_config(overrides=["mfrl.sac.buffer_capacity=128", "mfrl.sac.batch_size=64"])
    assert (cfg.mfrl_sac.buffer_capacity, cfg.mfrl_sac.batch_size) == (128, 64)


def test_optional_and_tuple_values():
    cfg = parse_config(overrides=["pipeline.threshold=40", "mbrl.reward.eps2=none", "run.seeds=3,4",
                                  "limits.alpha_r_forward=0.1,0.2,0.3,0.4"])
    assert cfg.pipeline.threshold == 40.0 and cfg.mbrl_reward.eps2 is None
    assert cfg.run.seeds == (3, 4)
    assert cfg.plant_config().limits.alpha_r_forward == (0.1, 0.2, 0.3, 0.4)


def test_snapshot_round_trip(tmp_path):
    cfg = parse_config(overrides=["pipeline.threshold=12.5", "pt.sac.max_episodes=7", "gait.period=0.6"])
    path = tmp_path / "snap.ini"
    cfg.save(path)
    back = parse_config(path)
    assert back == cfg
    assert back.to_ini() == path.read_text()


def test_missing_file():
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config("/nonexistent/c.ini")


def test_pipeline_config_per_mode():
    cfg = parse_config(overrides=["pipeline.expert_duration=1.0", "run.seed=5"])
    pt = cfg.pipeline_config("pt")
    assert pt.mode == "PT" and pt.expert_steps == 20 and pt.seed == 5
    assert cfg.pipeline_config("MFRL").expert_steps == 0
    assert cfg.with_seed(9).pipeline_config("MBRL", ).seed == 9


def test_output_dir_env(monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/elsewhere")
    assert RunConfig().output_dir == "/tmp/elsewhere"
    assert parse_config(overrides=["run.output_dir=/x"]).output_dir == "/x"
