"""Smoke test for the Python bindings.

Build the extension first, for example:

    cargo build --release -p splitmachine-py --features extension-module
    cp target/release/libsplitmachine_py.so python/splitmachine_py.so

then run ``python3 python/smoke_test.py``.
"""

import base64
import hashlib
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import splitmachine_py as sm  # noqa: E402


def main() -> int:
    assert set(sm.builtin_scenarios()) >= {"boot", "banking", "insulin"}

    boot = json.loads(sm.run_scenario("boot"))
    assert boot["passed"], boot["first_failure"]
    assert boot["metrics"]["order"][:2] == ["storage", "rmanager"]

    # PCR = H(0^32 || image digest), recomputed here with hashlib.
    digest = hashlib.sha256(b"probe image").hexdigest()
    want = hashlib.sha256(bytes(32) + bytes.fromhex(digest)).hexdigest()
    assert sm.expected_pcr(digest) == want

    manifest = json.loads((Path(__file__).resolve().parent.parent / "manifests" / "default.json").read_text())
    images = {i["name"]: base64.b64decode(i["bytes"]) for i in manifest["images"]}
    for name, entry in boot["metrics"]["pcrs"].items():
        measured = hashlib.sha256(images[name]).digest()
        assert entry["pcr"] == hashlib.sha256(bytes(32) + measured).hexdigest(), name

    banking = json.loads(sm.run_scenario("banking"))
    assert banking["passed"]
    assert all(a["blocked"] for a in banking["attacks"])

    t1 = sm.scenario_trace("banking")
    t2 = sm.scenario_trace("banking")
    assert t1 == t2, "traces differ between runs"
    tcb = json.loads(sm.tcb(t1))
    assert sorted(tcb["guarantees"]["C"]["strong"]) == sorted(["Prog", "mailbox", "reset-guard", "arbiter", "RoT"])

    report = json.loads(sm.check("small"))
    assert report["violations"] == [], report["violations"][:1]
    for name in sm.mutants():
        r = json.loads(sm.check("small", name))
        assert r["violations"], f"mutant {name} not caught"
        assert sm.replay(json.dumps(r["violations"][0]))

    try:
        sm.run_scenario("no-such-scenario")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown scenario accepted")

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
