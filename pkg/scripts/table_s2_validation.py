"""Score the digitised Table S2 model estimates against the official figures.

Prints unweighted OLS R², population-weighted R² and squared Pearson correlation per task next to the
stated values, and optionally writes the report and scatter CSVs.

    python3 scripts/table_s2_validation.py --out-dir runs/table_s2
"""

import argparse
import sys
from pathlib import Path

from geosdg import aggregate as agg


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", type=Path, default=None, help="write validation_report.csv and scatter.csv here")
    args = ap.parse_args(argv)

    reports = agg.table_s2_reports()
    population = {row.country: row.population for row in agg.table_s2()}
    for r in reports:
        print(f"{r.task:12s} pairs={r.n_pairs:3d} dropped={r.n_dropped:3d} r2={r.r_squared:.4f} "
              f"r2_weighted={r.r_squared_weighted:.4f} pearson_r2={r.pearson_r2:.4f} "
              f"slope={r.slope:.4f} intercept={r.intercept:.3f} stated={agg.PAPER_R2[r.task]}")
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "validation_report.csv").write_text(agg.report_csv(reports))
        (args.out_dir / "scatter.csv").write_text(agg.scatter_export(reports, population))
    return 0


if __name__ == "__main__":
    sys.exit(main())
