"""Smoke test for the `bumper` extension module.

Build the extension first (e.g. `maturin develop -m crates/py/Cargo.toml`, or
`cargo build -p bumper-py --release` and copy `libbumper.so` to `bumper.so`
somewhere on PYTHONPATH), then run this script from the repository root.
"""

import math
import pathlib
import subprocess
import sys
import tempfile

import bumper

ROOT = pathlib.Path(__file__).resolve().parent.parent
CHAD = "When should the next SIA be run in Chad?"


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    s = bumper.compliance_score_elements([0.9, 0.8], [0.5, 0.5])
    check(math.isclose(s, 0.72 * 0.75), "per-element score")
    try:
        bumper.compliance_score_elements([0.9], [])
        check(False, "empty topics rejected")
    except ValueError:
        check(True, "empty topics rejected")

    check(bumper.jaccard("a b c", "b c d") == 0.5, "jaccard")
    check(bumper.jaccard("", "") == 1.0, "jaccard of two empty texts")

    prompts = bumper.render_check_prompt(["Be neutral"], ["Rugby", "Scores"], "Wales lost.", "per-element")
    check(len(prompts) == 3, "one prompt per element")
    whole = bumper.render_check_prompt(["Be neutral"], ["Rugby"], "Wales lost.", "whole")
    check(len(whole) == 1 and "Wales lost." in whole[0], "whole prompt carries the evidence")

    v = bumper.parse_verdict("no. It favours a team.", 0.75)
    check(v["verdict"] == "fail" and math.isclose(v["affirmative_probability"], 0.25), "no-verdict complement")

    pts = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]]
    km = bumper.kmeans(pts, 2, seed=7)
    a = km["assignments"]
    check(a[0] == a[1] and a[2] == a[3] and a[0] != a[2], "kmeans separates two blobs")
    check(len(bumper.project_2d(pts)) == 4, "projection keeps every point")

    with tempfile.TemporaryDirectory() as tmp:
        cli = ROOT / "target" / "debug" / "bumper"
        if cli.exists():
            subprocess.run([str(cli), "init", tmp], check=True, capture_output=True)
            config = pathlib.Path(tmp) / "measles" / "config.json"
            b = bumper.Bumper(str(config))
            check(len(b.actions()) == 4, "measles actions")
            ans = b.ask(CHAD)
            check(ans["check_class"] == "check_flag", "Chad question passes the check")
            check(len(b.transcript()["turns"]) == 1, "transcript records the turn")
            summary = b.evaluate(CHAD, n_answers=3, n_checks=2, out=str(pathlib.Path(tmp) / "bundle"))
            check(summary["n_answers"] == 3 and summary["complete"], "evaluation summary")
        else:
            print("skip: bumper CLI not built, pipeline checks skipped")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
