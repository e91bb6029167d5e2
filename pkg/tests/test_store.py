import json
import os

import pytest

from modsplit.store import ArtifactStore, hash_path, hash_strings


@pytest.fixture()
def store(tmp_path):
    return ArtifactStore(str(tmp_path / "store"))


def _make_payload(tmp_path, name="a", content=b"hello"):
    p = tmp_path / name
    p.mkdir(exist_ok=True)
    (p / "blob.bin").write_bytes(content)
    return str(p)


class TestHashing:
    def test_directory_hash_covers_names_and_bytes(self, tmp_path):
        a = _make_payload(tmp_path, "a", b"x")
        h1 = hash_path(a)
        (tmp_path / "a" / "blob.bin").write_bytes(b"y")
        assert hash_path(a) != h1
        b = tmp_path / "b"
        b.mkdir()
        (b / "other.bin").write_bytes(b"x")
        assert hash_path(str(b)) != h1

    def test_hash_strings_order_sensitive(self):
        assert hash_strings("a", "b") != hash_strings("b", "a")


class TestStore:
    def test_register_and_get(self, store, tmp_path):
        payload = _make_payload(tmp_path)
        artifact = store.register("model", payload, input_hash="abc")
        entry = store.get(artifact)
        assert entry["kind"] == "model"
        assert entry["path"] == os.path.abspath(payload)
        assert entry["input_hash"] == "abc"

    def test_unknown_parent_rejected(self, store, tmp_path):
        payload = _make_payload(tmp_path)
        with pytest.raises(ValueError, match="unknown parent"):
            store.register("module", payload, parents=["model-nope"])

    def test_parent_dag_links(self, store, tmp_path):
        base = store.register("model", _make_payload(tmp_path, "m"))
        child = store.register("module", _make_payload(tmp_path, "mod"), parents=[base])
        assert store.get(child)["parents"] == [base]

    def test_find_by_input(self, store, tmp_path):
        payload = _make_payload(tmp_path)
        artifact = store.register("model", payload, input_hash="key1")
        assert store.find_by_input("model", "key1") == artifact
        assert store.find_by_input("model", "other") is None
        assert store.find_by_input("module", "key1") is None

    def test_find_by_input_rejects_stale_payload(self, store, tmp_path):
        payload = _make_payload(tmp_path)
        store.register("model", payload, input_hash="key1")
        (tmp_path / "a" / "blob.bin").write_bytes(b"tampered")
        assert store.find_by_input("model", "key1") is None

    def test_verify_detects_corruption(self, store, tmp_path):
        payload = _make_payload(tmp_path)
        artifact = store.register("model", payload)
        assert store.verify() == []
        (tmp_path / "a" / "blob.bin").write_bytes(b"tampered")
        assert store.verify() == [artifact]

    def test_index_is_valid_json_after_updates(self, store, tmp_path):
        for i in range(3):
            store.register("model", _make_payload(tmp_path, f"p{i}", bytes([i])))
        with open(store.index_path) as f:
            assert len(json.load(f)) == 3

    def test_env_var_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MODSPLIT_HOME", str(tmp_path / "envroot"))
        s = ArtifactStore()
        assert s.root == str(tmp_path / "envroot")
