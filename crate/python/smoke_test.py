"""Smoke test for the bimflow extension module.

Build it first, e.g. `maturin develop -m crates/py/Cargo.toml`, or copy the
cdylib from `cargo build -p bimflow-py --features extension-module` next to
this script as `bimflow.so`.
"""

import tempfile
from datetime import datetime, timedelta, timezone

import bimflow

T0 = datetime(2024, 5, 6, 9, 0, tzinfo=timezone.utc)


def event(seconds, prefix, message):
    category = {"Menu": "Menu", "Undo Event": "Undo", "Redo Event": "Undo"}.get(prefix, "Tool")
    ts = (T0 + timedelta(seconds=seconds)).isoformat().replace("+00:00", "Z")
    return {"ts": ts, "category": category, "prefix": prefix, "message": message}


def check_workflows():
    corpus = [["Wall", "Door", "Save"], ["Wall", "Door"], ["Slab", "Wall", "Door", "Save"]]
    merges = bimflow.learn_workflows(corpus, 2)
    assert merges[0] == ("Wall; Door", ["Wall", "Door"]), merges
    encoded = bimflow.encode_workflows(corpus, 1, [["Wall", "Door", "Save"]])
    assert encoded == [["Wall; Door", "Save"]], encoded


def check_recommender():
    with tempfile.TemporaryDirectory() as d:
        checkpoint, bundle = bimflow.train_demo(d, epochs=1, sessions=400)
        rec = bimflow.Recommender(checkpoint, bundle)
        assert len(rec.vocabulary_hash) == 64

        sid = rec.create_session()
        try:
            rec.recommend(sid)
        except ValueError:
            pass
        else:
            raise AssertionError("empty session should not be recommendable")

        assert rec.append(sid, event(0, "Tool", "cmd03"))["length"] == 1
        assert rec.append(sid, event(2, "Tool", "cmd07"))["length"] == 2
        delta = rec.append(sid, event(3, "Undo Event", "cmd07"))
        assert [s["name"] for s in delta["removed"]] == ["cmd07"], delta
        assert rec.steps(sid) == ["cmd03"]

        resp = rec.recommend(sid, k=5)
        probs = [item["probability"] for item in resp["items"]]
        assert len(probs) == 5 and probs == sorted(probs, reverse=True), probs
        assert resp["version"] == rec.version

        try:
            rec.append(sid, {"ts": "soon", "category": "Tool", "prefix": "Tool", "message": "x"})
        except ValueError:
            pass
        else:
            raise AssertionError("bad timestamp accepted")
        try:
            rec.steps("missing")
        except KeyError:
            pass
        else:
            raise AssertionError("unknown session accepted")


if __name__ == "__main__":
    check_workflows()
    check_recommender()
    print("python smoke test: ok")
