"""Builds the extension module, imports it and runs a tiny end-to-end grid.

Usage: python3 python/smoke_test.py [--skip-build]
"""

import argparse
import json
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build(out_dir):
    subprocess.run(
        ["cargo", "build", "-p", "promptbench-py", "--features", "extension-module", "--release"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libpromptbench.so")
    shutil.copy(lib, os.path.join(out_dir, "promptbench.so"))


def cube(n, lo, hi):
    inside = lambda v: lo <= v < hi
    return [int(inside(i % n) and inside(i // n % n) and inside(i // (n * n))) for i in range(n ** 3)]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--skip-build", action="store_true", help="import promptbench from sys.path as is")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        if not args.skip_build:
            build(tmp)
            sys.path.insert(0, tmp)
        import promptbench as pb

        gt = pb.Mask([9, 9, 9], cube(9, 1, 8))
        counts = {k: v.count() for k, v in pb.decompose(gt).items()}
        assert counts == {"boundary": 218, "margin": 124, "center": 1}, counts

        prompts = pb.sample(gt, {"kind": "region-constrained", "region": "C", "count": 1}, seed=0)
        assert prompts["prompts"][0]["voxel"] == [4, 4, 4]
        pred = pb.synthetic_segment(gt, prompts)
        print(f"center prompt: dice={pb.dice(pred, gt):.3f} nsd={pb.nsd(pred, gt):.3f}")

        gt.save(os.path.join(tmp, "gt.nii"))
        config = {
            "subjects": [{"case_id": "cube", "gt": "gt.nii"}],
            "strategies": [
                {"name": "whole", "kind": "random-whole"},
                {"name": "center", "kind": "region-constrained", "region": "C"},
            ],
            "prompt_counts": [1],
            "num_seeds": 5,
            "backend": {"kind": "synthetic-oracle"},
            "output_dir": "out",
        }
        config_path = os.path.join(tmp, "config.json")
        with open(config_path, "w") as f:
            json.dump(config, f)
        summary = pb.run_experiment(config_path)
        assert summary["records"] == 10 and summary["failed_cells"] == 0, summary
        print(pb.render_table(os.path.join(tmp, "out", "results.jsonl")))

        t = pb.paired_ttest([0.2, 0.3, 0.4], [0.5, 0.5, 0.7])
        print(f"paired t-test: t={t['t']:.3f} p={t['p']:.4f} -> {pb.format_mean_std(0.5667, 0.0943)}")
    print("smoke test OK")


if __name__ == "__main__":
    main()
