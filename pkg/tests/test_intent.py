from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajbench.errors import ConfigError
from trajbench.intent import (
    COUNT_PROBS, DEFAULT_POOLS, IntentProfile, default_assignment, load_pools, sample_persona_style,
    sample_profile, scenario_dimension,
)


def test_count_distribution_100k():
    rng = np.random.default_rng(2024)
    counts = Counter(sample_profile(rng, i).k for i in range(100_000))
    for k, p in enumerate(COUNT_PROBS, 1):
        assert abs(counts[k] / 100_000 - p) <= 0.01


@given(st.integers(0, 2 ** 31), st.one_of(st.integers(), st.text(max_size=12)))
def test_profile_shape_and_determinism(seed, tid):
    prof = sample_profile(seed, tid)
    assert sum(scenario_dimension(s) == 1 for s in prof.scenarios) == 1
    assert len(set(prof.scenarios)) == prof.k
    assert 1 <= prof.k <= 5
    assert sample_profile(seed, tid) == prof
    if prof.k == 1:
        assert prof.scenarios[0] in ("1.1", "1.2")


def test_profiles_vary_with_trajectory_id():
    assert len({sample_profile(0, i).scenarios for i in range(50)}) > 10


def test_profile_validation():
    with pytest.raises(ValueError):
        IntentProfile(1, ("1.1", "1.2"))
    with pytest.raises(ValueError):
        IntentProfile(1, ("2.1",))
    assert IntentProfile(1, ("1.1", "3.1", "3.3")).flags == ["orthogonal_with_route_pref"]


def test_persona_uniformity():
    rng = np.random.default_rng(9)
    forms = Counter(sample_persona_style(rng).styles["literal"][0] for _ in range(60_000))
    assert set(forms) == set(DEFAULT_POOLS["literal_forms"])
    for n in forms.values():
        assert abs(n / 60_000 - 1 / 6) <= 0.01


def test_persona_pool_of_one_and_determinism():
    pools = {k: v[:1] for k, v in DEFAULT_POOLS.items()}
    ps = sample_persona_style(3, pools)
    assert ps.persona == DEFAULT_POOLS["persona"][0]
    assert sample_persona_style(7) == sample_persona_style(7)
    with pytest.raises(ConfigError):
        sample_persona_style(0, {**DEFAULT_POOLS, "persona": []})


def test_load_pools_yaml(tmp_path):
    p = tmp_path / "pools.yaml"
    p.write_text("persona:\n  - Night owl\n")
    pools = load_pools(p)
    assert pools["persona"] == ["Night owl"]
    assert pools["literal_forms"] == DEFAULT_POOLS["literal_forms"]
    p.write_text("bogus: [1]\n")
    with pytest.raises(ConfigError):
        load_pools(p)


@given(st.integers(0, 2 ** 31))
def test_assignment_covers_dimensions(seed):
    a = default_assignment(np.random.default_rng(seed))
    assert sorted(d for dims in a.values() for d in dims) == [1, 2, 3, 4]
    assert sorted(a) == [1, 2, 3]
