import json

import pytest

from cinetraj.path import Keyframe
from cinetraj.serialize import Scenario, ScenarioError
from cinetraj.store import ScenarioStore, UnknownScenarioError


KFS = (
    Keyframe(position=(0.0, 0.0, 1.0), yaw=0.0, pitch=0.0),
    Keyframe(position=(3.0, 0.0, 1.0), yaw=0.4, pitch=0.0),
)


@pytest.fixture
def store(tmp_path):
    return ScenarioStore(tmp_path / "scenarios")


def test_create_get_list(store):
    created = store.create(Scenario(id="a", keyframes=KFS))
    assert created.created != "" and created.created == created.modified
    loaded = store.get("a")
    assert [kf.position for kf in loaded.keyframes] == \
        [kf.position for kf in created.keyframes]
    assert (loaded.mode, loaded.created) == (created.mode, created.created)
    store.create(Scenario(id="b", keyframes=KFS))
    assert store.list_ids() == ["a", "b"]


def test_create_duplicate_rejected(store):
    store.create(Scenario(id="a", keyframes=KFS))
    with pytest.raises(ScenarioError, match="exists"):
        store.create(Scenario(id="a", keyframes=KFS))


def test_update_bumps_modified_keeps_created(store):
    first = store.create(Scenario(id="a", keyframes=KFS))
    updated = store.update(first.with_fields(mode="soft-timed",
                                             timing_tags=((0.0, 0.0), (1.0, 2.0))))
    assert updated.created == first.created
    assert updated.modified >= first.modified
    assert store.get("a").mode == "soft-timed"


def test_update_unknown_raises(store):
    with pytest.raises(UnknownScenarioError) as err:
        store.update(Scenario(id="ghost", keyframes=KFS))
    assert err.value.scenario_id == "ghost"
    assert "ghost" in str(err.value)


def test_delete(store):
    store.create(Scenario(id="a", keyframes=KFS))
    store.delete("a")
    assert store.list_ids() == []
    with pytest.raises(UnknownScenarioError):
        store.delete("a")
    with pytest.raises(UnknownScenarioError):
        store.get("a")


def test_id_validation(store):
    for bad in ("", "../evil", "a b", "-lead", ".hidden"):
        with pytest.raises(ScenarioError):
            store.create(Scenario(id=bad, keyframes=KFS))
    store.create(Scenario(id="Shot_01-b", keyframes=KFS))


def test_files_are_plain_json(store, tmp_path):
    store.create(Scenario(id="a", keyframes=KFS))
    path = tmp_path / "scenarios" / "a.json"
    doc = json.loads(path.read_text())
    assert doc["id"] == "a"
    assert doc["schema_version"] == 1


def test_no_temp_files_left_behind(store, tmp_path):
    for k in range(5):
        store.create(Scenario(id=f"s{k}", keyframes=KFS))
    store.update(Scenario(id="s0", keyframes=KFS))
    names = {p.name for p in (tmp_path / "scenarios").iterdir()}
    assert names == {f"s{k}.json" for k in range(5)}
