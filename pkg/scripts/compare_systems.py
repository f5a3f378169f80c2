"""Run the hermetic fixture end to end and print KL / calibration per system.

    python scripts/compare_systems.py [--config manifest.json] [--out DIR] [--pooled]
"""
import argparse
import tempfile
from importlib import resources
from pathlib import Path

from mpf.pipeline import load_manifest, load_weights, read_json, report_from_dict, run_pipeline


def main():
    default = Path(str(resources.files("mpf").joinpath("data/fixture/manifest.json")))
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=str(default))
    parser.add_argument("--out", default=None)
    parser.add_argument("--pooled", action="store_true", help="show pooled instead of per-concept averages")
    args = parser.parse_args()

    out = Path(args.out or tempfile.mkdtemp(prefix="mpf_"))
    art = run_pipeline(load_manifest(args.config, out=str(out)))
    names, _, results = load_weights(art.weights)
    print("fitted weights (" + ", ".join(names) + ")")
    for concept, r in results.items():
        print(f"  {concept:<40} " + " ".join(f"{v:.3f}" for v in r.weights.tolist()))

    report = report_from_dict(read_json(art.report)).report
    splits = sorted({c.split for c in report.cells})
    systems = list(dict.fromkeys(c.system for c in report.cells))
    print(f"\n{'system':<16}" + "".join(f"{s[:5] + ' KL':>14}{s[:5] + ' cal':>14}" for s in splits))
    for system in systems:
        row = f"{system:<16}"
        for split in splits:
            c = report.cell(split, system)
            kl, cal = (c.kl_pooled, c.calibration_pooled) if args.pooled else (c.kl_divergence, c.calibration_error)
            row += f"{kl:>14.4f}{cal:>14.4f}"
        print(row)
    print(f"\nartifacts in {out}")


if __name__ == "__main__":
    main()
