import json

import numpy as np
import pytest

from demotesim import harness
from demotesim.cache import HierarchyConfig
from demotesim.config import ConfigError, MachineConfig, build_config, load_config, parse_text
from demotesim.machine import Machine, load


def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("")
    cfg = load_config(f)
    assert cfg.to_dict() == MachineConfig().to_dict()
    h = cfg.hierarchy
    assert (h.l1d, h.l1i, h.l2, h.llc, h.dir_ways) == \
        ((64, 12), (64, 8), (2048, 16), (2048, 15), 25)


def test_empty_json_gives_defaults(tmp_path):
    f = tmp_path / "empty.json"
    f.write_text("{}")
    assert load_config(f).to_dict() == MachineConfig().to_dict()


def test_text_and_json_agree(tmp_path):
    t = tmp_path / "a.cfg"
    t.write_text("# comment\nnoise.sigma = 2.5\nhierarchy.llc.ways = 20  # trailing\n"
                 "countermeasures.privileged_only = true\n")
    j = tmp_path / "a.json"
    j.write_text(json.dumps({"noise": {"sigma": 2.5}, "hierarchy": {"llc": {"ways": 20}},
                             "countermeasures": {"privileged_only": True}}))
    a, b = load_config(t), load_config(j)
    assert a.to_dict() == b.to_dict()
    assert a.profile.noise_sigma == 2.5
    assert a.hierarchy.llc == (2048, 20)
    assert a.countermeasures.privileged_only is True


def test_unknown_key_names_the_path():
    with pytest.raises(ConfigError, match="hierarchy.l3.ways"):
        build_config({"hierarchy.l3.ways": 4})
    with pytest.raises(ConfigError, match="noise.sigmaa"):
        build_config({"noise.sigmaa": 1})


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        build_config({"hierarchy.l2.sets": 1000})
    with pytest.raises(ConfigError):
        build_config({"evset.votes": 2})
    with pytest.raises(ConfigError):
        build_config({"countermeasures.noise_injection": -1})
    with pytest.raises(ConfigError):
        build_config({"countermeasures.privileged_only": "maybe"})
    with pytest.raises(ConfigError):
        parse_text("just words")


def test_latency_override():
    cfg = build_config({"latency.LOAD.L1": 40, "latency.probe.FlushDemote": [200, 120]})
    assert cfg.profile.cache["LOAD"]["L1"] == 40
    assert cfg.profile.probe_tables["FlushDemote"] == (200, 120)


def test_defaults_are_not_shared():
    a = build_config({"latency.LOAD.L1": 40})
    assert MachineConfig().profile.cache["LOAD"]["L1"] == 58
    assert a.hierarchy == HierarchyConfig()


def test_sigma_zero_is_deterministic():
    cfg = build_config({"noise.sigma": 0})
    out = []
    for seed in (1, 2):
        m = Machine(cfg, seed=seed)
        m.map(0x10000, 4096)
        th = m.thread("t")
        m.execute(th, load(0x10000))
        lat, _ = m.repeat(th, load(0x10000), 200)
        out.append(lat)
    assert np.all(out[0] == 58)
    assert np.array_equal(out[0], out[1])


def test_llc_ways_end_to_end(tmp_path):
    f = tmp_path / "wide.cfg"
    f.write_text("hierarchy.llc.ways = 20\n")
    rep = harness.run("reverse-llc", str(f), seed=3, samples=2000)
    assert rep.metrics["inferred"]["llc_ways"] == 20
    assert rep.metrics["breakpoints"] == [12, 16, 36]
    assert rep.passed
