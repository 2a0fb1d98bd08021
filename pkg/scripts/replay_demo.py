"""Replay the fixture streams through a trained bundle and roll back the quarantined process.

    python3 scripts/replay_demo.py --bundle out/desk/bundle.json
"""
import argparse
import json

from stagedetect.agent import Status, fixture_stream, map_hash, replay, rollback
from stagedetect.bundle import ModelBundle


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bundle", required=True)
    args = ap.parse_args()
    bundle = ModelBundle.load(args.bundle)

    for kind in ("benign", "malicious"):
        res = replay(fixture_stream(kind, n=bundle.n), bundle)
        print(f"== {kind}: {len(res.alerts)} alert(s)")
        for t in res.transitions:
            print(f"  event {t.event_index:>4}  pid {t.pid:<5} {t.old.value} -> {t.new.value}  risk {t.risk:.3f}")
        for alert in res.alerts:
            print("  alert:", json.dumps({k: alert.to_json()[k] for k in ("pid", "event_index", "touched_keys")}))
        for pid, st in sorted(res.states.items()):
            if st.status is Status.QUARANTINED:
                before = map_hash(res.system_map)
                restored = rollback(res.journal, pid, res.system_map, res.states)
                print(f"  rollback pid {pid}: {len(res.journal.for_pid(pid))} effects undone, "
                      f"map {before[:12]} -> {map_hash(restored)[:12]}")


if __name__ == "__main__":
    main()
